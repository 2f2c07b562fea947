#pragma once

// Grounding-precision and image-quality metrics: color/shape oracle
// detector, IoU, COCO-protocol AP/AP50/AP75 + AR, per-class AP, and a
// Frechet feature distance over a frozen random feature extractor.

#include <map>
#include <string>
#include <vector>

#include "grounddiff/image.hpp"
#include "grounddiff/layout.hpp"

namespace grounddiff {

struct Detection {
    Box box;  // normalized corners
    std::string category;
    double confidence = 0.0;
};

struct GtInstance {
    Box box;  // normalized corners
    std::string category;
};

// One evaluated image: detector output plus ground truth.
struct EvalInstance {
    std::vector<Detection> detections;
    std::vector<GtInstance> ground_truth;
};

struct MetricSummary {
    double ap = 0.0;    // mean over IoU 0.50:0.05:0.95 and categories
    double ap50 = 0.0;
    double ap75 = 0.0;
    double ar = 0.0;    // AR@100 over all areas
    std::map<std::string, double> per_class;  // category -> AP
};

double iou(const Box& a, const Box& b);

// Color-threshold segmentation, connected components, fill-ratio shape
// classification. Stand-in for a pretrained detector; exact on clean
// renders of the synthetic vocabulary.
std::vector<Detection> oracle_detect(const Image& img);

// IoU thresholds 0.50:0.05:0.95.
std::vector<double> coco_iou_thresholds();

// COCO protocol: greedy confidence-ordered matching per image and category
// at each threshold, 101-point interpolated precision, categories without
// ground truth excluded from means. Detections are capped at max_dets per
// image by confidence before matching. ap50/ap75 are filled when the
// matching thresholds are present.
MetricSummary compute_ap(const std::vector<EvalInstance>& images,
                         const std::vector<std::string>& taxonomy, int max_dets = 100,
                         const std::vector<double>& thresholds = coco_iou_thresholds());

// Frozen seeded random conv features, 64-d, deterministic across runs.
std::vector<double> feature_extract(const Image& img);
int feature_dim();

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)); covariance ridge 1e-6,
// matrix square roots by symmetric eigendecomposition.
double frechet_distance(const std::vector<std::vector<double>>& feats_a,
                        const std::vector<std::vector<double>>& feats_b);

struct MetricReport {
    MetricSummary summary;
    double fid_analog = 0.0;
};

std::string metric_report_json(const MetricReport& report);
std::string metric_report_table(const MetricReport& report);

}  // namespace grounddiff
