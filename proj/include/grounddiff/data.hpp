#pragma once

// Synthetic colored-shapes scenes (the desk-scale dataset), COCO-style
// annotation records with JSON I/O, and the training preprocessing pipeline.

#include <string>
#include <vector>

#include "grounddiff/image.hpp"
#include "grounddiff/layout.hpp"
#include "grounddiff/rng.hpp"

namespace grounddiff {

// Closed vocabulary: 3 shapes x 3 colors.
const std::vector<std::string>& shape_vocabulary();
bool in_vocabulary(const std::string& category);

// COCO-style record: bbox is [x_min, y_min, w, h] in source pixels.
struct AnnotationBox {
    std::vector<double> bbox;  // x, y, w, h
    std::string category;
};

struct AnnotationRecord {
    int id = 0;
    std::string file;
    int width = 0;
    int height = 0;
    std::vector<AnnotationBox> annotations;
    std::vector<std::string> captions;  // >= 1
};

struct GenConfig {
    int canvas = 64;
    int min_shapes = 1;
    int max_shapes = 5;
    int min_box = 12;
    int max_box = 28;
};

// Deterministic given the rng state: renders 1..max_shapes non-overlapping
// shapes on a dark background and records tight boxes plus caption variants.
std::pair<Image, AnnotationRecord> generate_scene(Rng& rng, const GenConfig& cfg, int image_id);

// Dataset directory layout: <dir>/annotations.json plus <dir>/images/*.png.
void write_dataset(const std::string& dir, const std::vector<std::pair<Image, AnnotationRecord>>& records);
std::vector<AnnotationRecord> read_annotations(const std::string& dir);
Image read_dataset_image(const std::string& dir, const AnnotationRecord& rec);

struct PreprocessConfig {
    int target_size = 512;
    double flip_prob = 0.5;
    double min_rel_area = 0.01;  // boxes under 1% of the image area are dropped
    int max_objects = 30;
};

struct TrainExample {
    std::vector<float> image;  // [3, target, target] in [-1, 1]
    int size = 0;
    ConditionLayout layout;
};

// COCO [x,y,w,h] -> corner format [x1,y1,x2,y2].
Box coco_to_corners(const std::vector<double>& bbox);

// Horizontal flip of a corner box inside a width-W image.
Box flip_box(const Box& b, double width);

// Bicubic resize to the target, optional horizontal flip, 1%-area filter at
// target resolution, largest-30 cap, corner conversion and normalization,
// uniform caption choice. Draw order: flip first, then the caption index.
TrainExample preprocess(const AnnotationRecord& rec, const Image& img, const PreprocessConfig& cfg,
                        Rng& rng);

}  // namespace grounddiff
