#include "grounddiff/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "grounddiff/errors.hpp"

namespace grounddiff {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (part.empty()) continue;
        try {
            out.push_back(std::stoi(part));
        } catch (...) {
            throw ConfigError("config: bad integer '" + part + "' in key " + key);
        }
    }
    return out;
}

int parse_int(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        const int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw ConfigError("config: bad integer '" + v + "' for key " + key);
    }
}

int64_t parse_i64(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        const long long out = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw ConfigError("config: bad integer '" + v + "' for key " + key);
    }
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        const unsigned long long out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw ConfigError("config: bad integer '" + v + "' for key " + key);
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw ConfigError("config: bad number '" + v + "' for key " + key);
    }
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("config: bad boolean '" + v + "' for key " + key + " (use 0/1)");
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

}  // namespace

RunConfig default_toy_config() {
    RunConfig cfg;
    cfg.model.unet.image_size = 32;
    cfg.model.unet.in_channels = 3;
    cfg.model.unet.channels = {8, 16, 32};
    cfg.model.unet.attn_levels = {1, 2};
    cfg.model.unet.middle_attention = true;
    cfg.model.unet.res_blocks_per_level = 1;
    cfg.model.unet.time_dim = 32;
    cfg.model.unet.groups = 4;
    cfg.model.unet.context_dim = 64;
    cfg.model.cond.vocab_size = 4096;
    cfg.model.cond.text_dim = 64;
    cfg.model.cond.fuse_hidden = 96;
    cfg.model.cond.context_dim = 64;
    cfg.model.cond.max_entities = 8;
    cfg.model.cond.fourier.num_frequencies = 8;
    return cfg;
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg = default_toy_config();
    std::map<std::string, bool> seen;

    std::stringstream ss(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(ss, raw)) {
        ++line_no;
        const size_t hash = raw.find('#');
        if (hash != std::string::npos) raw = raw.substr(0, hash);
        raw = trim(raw);
        if (raw.empty()) continue;
        const size_t eq = raw.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key=value, got '" + raw + "'");
        const std::string key = trim(raw.substr(0, eq));
        const std::string val = trim(raw.substr(eq + 1));
        if (seen[key])
            throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" +
                              key + "'");
        seen[key] = true;

        if (key == "image_size") cfg.model.unet.image_size = parse_int(val, key);
        else if (key == "channels") cfg.model.unet.channels = parse_int_list(val, key);
        else if (key == "attn_levels") cfg.model.unet.attn_levels = parse_int_list(val, key);
        else if (key == "middle_attention") cfg.model.unet.middle_attention = parse_bool(val, key);
        else if (key == "res_blocks") cfg.model.unet.res_blocks_per_level = parse_int(val, key);
        else if (key == "time_dim") cfg.model.unet.time_dim = parse_int(val, key);
        else if (key == "groups") cfg.model.unet.groups = parse_int(val, key);
        else if (key == "context_dim") {
            cfg.model.unet.context_dim = parse_int(val, key);
            cfg.model.cond.context_dim = cfg.model.unet.context_dim;
            cfg.model.cond.text_dim = cfg.model.unet.context_dim;
        } else if (key == "vocab_size") cfg.model.cond.vocab_size = parse_int(val, key);
        else if (key == "fuse_hidden") cfg.model.cond.fuse_hidden = parse_int(val, key);
        else if (key == "max_entities") cfg.model.cond.max_entities = parse_int(val, key);
        else if (key == "fourier_m") cfg.model.cond.fourier.num_frequencies = parse_int(val, key);
        else if (key == "timesteps") cfg.timesteps = parse_int(val, key);
        else if (key == "beta_start") cfg.beta_start = parse_double(val, key);
        else if (key == "beta_end") cfg.beta_end = parse_double(val, key);
        else if (key == "lr") cfg.lr = parse_double(val, key);
        else if (key == "warmup") cfg.warmup = parse_i64(val, key);
        else if (key == "batch_size") cfg.batch_size = parse_int(val, key);
        else if (key == "grad_accum") cfg.grad_accum = parse_int(val, key);
        else if (key == "total_steps") cfg.total_steps = parse_i64(val, key);
        else if (key == "drop_caption") cfg.drop_caption = parse_double(val, key);
        else if (key == "drop_entities") cfg.drop_entities = parse_double(val, key);
        else if (key == "caption_only") cfg.caption_only = parse_bool(val, key);
        else if (key == "seed") cfg.seed = parse_u64(val, key);
        else if (key == "checkpoint_every") cfg.checkpoint_every = parse_i64(val, key);
        else if (key == "log_every") cfg.log_every = parse_i64(val, key);
        else if (key == "threads") cfg.threads = parse_int(val, key);
        else if (key == "data_dir") cfg.data_dir = val;
        else if (key == "out_dir") cfg.out_dir = val;
        else if (key == "sampler") cfg.sampler = val;
        else if (key == "sample_steps") cfg.sample_steps = parse_int(val, key);
        else if (key == "guidance") cfg.guidance = parse_double(val, key);
        else
            throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" +
                              key + "'");
    }
    validate_run_config(cfg);
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

void validate_run_config(const RunConfig& cfg) {
    validate_model_config(cfg.model);
    if (cfg.lr <= 0) throw ConfigError("config: lr must be > 0");
    if (cfg.grad_accum < 1) throw ConfigError("config: grad_accum must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (cfg.timesteps < 1) throw ConfigError("config: timesteps must be >= 1");
    if (cfg.sample_steps < 1 || cfg.sample_steps > cfg.timesteps)
        throw ConfigError("config: sample_steps must lie in [1, timesteps]");
    if (cfg.guidance < 0) throw ConfigError("config: guidance must be >= 0");
    if (cfg.drop_caption < 0 || cfg.drop_caption > 1 || cfg.drop_entities < 0 ||
        cfg.drop_entities > 1)
        throw ConfigError("config: dropout probabilities must lie in [0,1]");
    if (cfg.threads < 1) throw ConfigError("config: threads must be >= 1");
    sampler_method_from_string(cfg.sampler);
}

std::string canonical_config_string(const RunConfig& cfg) {
    std::ostringstream os;
    os << "attn_levels=" << fmt_int_list(cfg.model.unet.attn_levels) << "\n";
    os << "batch_size=" << cfg.batch_size << "\n";
    os << "beta_end=" << fmt_double(cfg.beta_end) << "\n";
    os << "beta_start=" << fmt_double(cfg.beta_start) << "\n";
    os << "caption_only=" << (cfg.caption_only ? 1 : 0) << "\n";
    os << "channels=" << fmt_int_list(cfg.model.unet.channels) << "\n";
    os << "context_dim=" << cfg.model.unet.context_dim << "\n";
    os << "drop_caption=" << fmt_double(cfg.drop_caption) << "\n";
    os << "drop_entities=" << fmt_double(cfg.drop_entities) << "\n";
    os << "fourier_m=" << cfg.model.cond.fourier.num_frequencies << "\n";
    os << "fuse_hidden=" << cfg.model.cond.fuse_hidden << "\n";
    os << "grad_accum=" << cfg.grad_accum << "\n";
    os << "groups=" << cfg.model.unet.groups << "\n";
    os << "guidance=" << fmt_double(cfg.guidance) << "\n";
    os << "image_size=" << cfg.model.unet.image_size << "\n";
    os << "lr=" << fmt_double(cfg.lr) << "\n";
    os << "max_entities=" << cfg.model.cond.max_entities << "\n";
    os << "middle_attention=" << (cfg.model.unet.middle_attention ? 1 : 0) << "\n";
    os << "res_blocks=" << cfg.model.unet.res_blocks_per_level << "\n";
    os << "sample_steps=" << cfg.sample_steps << "\n";
    os << "sampler=" << cfg.sampler << "\n";
    os << "seed=" << cfg.seed << "\n";
    os << "time_dim=" << cfg.model.unet.time_dim << "\n";
    os << "timesteps=" << cfg.timesteps << "\n";
    os << "vocab_size=" << cfg.model.cond.vocab_size << "\n";
    os << "warmup=" << cfg.warmup << "\n";
    return os.str();
}

uint64_t config_digest(const RunConfig& cfg) {
    const auto s = canonical_config_string(cfg);
    return fnv1a_bytes(s.data(), s.size());
}

}  // namespace grounddiff
