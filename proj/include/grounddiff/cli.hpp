#pragma once

// Command implementations behind the CLI front end. Each returns a process
// exit code: 0 success, 2 config/parse error, 3 numeric failure.

#include <functional>
#include <string>
#include <vector>

#include "grounddiff/layout.hpp"

namespace grounddiff {

// Parses the layout JSON {"caption": ..., "entities": [{"text", "box"}]}.
// Boxes must be normalized corners inside [0,1].
ConditionLayout parse_layout_file(const std::string& path);
ConditionLayout parse_layout_json(const std::string& text);

struct GenDataArgs {
    std::string out_dir;
    int num = 100;
    uint64_t seed = 1;
    int canvas = 64;
};
int cmd_gen_data(const GenDataArgs& args);

struct TrainArgs {
    std::string config_path;
    std::string resume;
};
int cmd_train(const TrainArgs& args);

struct SampleArgs {
    std::string ckpt;
    std::string layout_path;
    int steps = 50;
    double guidance = 7.5;
    std::string method = "plms";
    std::vector<uint64_t> seeds = {0};
    std::string out_dir = ".";
    bool overlay = false;
    int threads = 2;
};
int cmd_sample(const SampleArgs& args);

struct EvalArgs {
    std::string ckpt;
    std::string data_dir;
    std::string out_path = "report.json";
    int steps = 50;
    double guidance = 7.5;
    int limit = 0;
    uint64_t seed = 20240001;
    std::string save_images_dir;
    int threads = 2;
};
int cmd_eval(const EvalArgs& args);

// Maps exceptions from command bodies onto exit codes.
int run_guarded(const std::function<int()>& body);

}  // namespace grounddiff
