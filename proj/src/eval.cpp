#include "grounddiff/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "grounddiff/data.hpp"
#include "grounddiff/errors.hpp"
#include "grounddiff/rng.hpp"

namespace grounddiff {

double iou(const Box& a, const Box& b) {
    const double ix1 = std::max(a.x1, b.x1);
    const double iy1 = std::max(a.y1, b.y1);
    const double ix2 = std::min(a.x2, b.x2);
    const double iy2 = std::min(a.y2, b.y2);
    const double iw = ix2 - ix1, ih = iy2 - iy1;
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni <= 0.0 ? 0.0 : inter / uni;
}

// ---------------------------------------------------------------------------
// Oracle detector
// ---------------------------------------------------------------------------

namespace {

constexpr int kDetectSize = 128;   // analysis resolution
constexpr int kMinComponent = 60;  // px at analysis resolution

// 0 red / 1 green / 2 blue / -1 background. Requires brightness and a clear
// dominant channel so dark backgrounds and blends drop out.
int classify_pixel(const uint8_t* p) {
    const int r = p[0], g = p[1], b = p[2];
    const int mx = std::max({r, g, b});
    if (mx < 110) return -1;
    int cls;
    int mid;
    if (mx == r) {
        cls = 0;
        mid = std::max(g, b);
    } else if (mx == g) {
        cls = 1;
        mid = std::max(r, b);
    } else {
        cls = 2;
        mid = std::max(r, g);
    }
    return (mx - mid >= 40) ? cls : -1;
}

constexpr const char* kColorNames[3] = {"red", "green", "blue"};

struct ShapePrototype {
    const char* name;
    double fill;
};

constexpr ShapePrototype kShapeProtos[3] = {{"square", 1.0},
                                            {"circle", 0.7853981633974483},
                                            {"triangle", 0.5}};

}  // namespace

std::vector<Detection> oracle_detect(const Image& img) {
    const Image work =
        (img.width == kDetectSize && img.height == kDetectSize)
            ? img
            : bicubic_resize(img, kDetectSize, kDetectSize);

    std::vector<int> cls(static_cast<size_t>(kDetectSize) * kDetectSize);
    for (int y = 0; y < kDetectSize; ++y)
        for (int x = 0; x < kDetectSize; ++x)
            cls[static_cast<size_t>(y) * kDetectSize + x] = classify_pixel(work.px(x, y));

    std::vector<Detection> out;
    std::vector<char> seen(cls.size(), 0);
    std::vector<int> stack;
    for (int y = 0; y < kDetectSize; ++y)
        for (int x = 0; x < kDetectSize; ++x) {
            const size_t idx0 = static_cast<size_t>(y) * kDetectSize + x;
            const int color = cls[idx0];
            if (color < 0 || seen[idx0]) continue;

            // flood fill (4-connectivity)
            stack.assign(1, static_cast<int>(idx0));
            seen[idx0] = 1;
            int minx = x, maxx = x, miny = y, maxy = y;
            int area = 0;
            while (!stack.empty()) {
                const int cur = stack.back();
                stack.pop_back();
                const int cx = cur % kDetectSize, cy = cur / kDetectSize;
                ++area;
                minx = std::min(minx, cx);
                maxx = std::max(maxx, cx);
                miny = std::min(miny, cy);
                maxy = std::max(maxy, cy);
                const int nbr[4][2] = {{cx - 1, cy}, {cx + 1, cy}, {cx, cy - 1}, {cx, cy + 1}};
                for (const auto& n : nbr) {
                    if (n[0] < 0 || n[0] >= kDetectSize || n[1] < 0 || n[1] >= kDetectSize)
                        continue;
                    const size_t ni = static_cast<size_t>(n[1]) * kDetectSize + n[0];
                    if (!seen[ni] && cls[ni] == color) {
                        seen[ni] = 1;
                        stack.push_back(static_cast<int>(ni));
                    }
                }
            }
            if (area < kMinComponent) continue;

            const double w = maxx - minx + 1, h = maxy - miny + 1;
            const double fill = static_cast<double>(area) / (w * h);
            int best = 0;
            for (int s = 1; s < 3; ++s)
                if (std::abs(fill - kShapeProtos[s].fill) <
                    std::abs(fill - kShapeProtos[best].fill))
                    best = s;

            Detection d;
            d.box = Box{static_cast<double>(minx) / kDetectSize,
                        static_cast<double>(miny) / kDetectSize,
                        static_cast<double>(maxx + 1) / kDetectSize,
                        static_cast<double>(maxy + 1) / kDetectSize};
            d.category = std::string(kColorNames[color]) + " " + kShapeProtos[best].name;
            d.confidence =
                std::clamp(1.0 - 2.0 * std::abs(fill - kShapeProtos[best].fill), 0.05, 1.0);
            out.push_back(std::move(d));
        }
    return out;
}

// ---------------------------------------------------------------------------
// COCO-protocol AP / AR
// ---------------------------------------------------------------------------

std::vector<double> coco_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

namespace {

struct RankedDet {
    size_t image;
    size_t det;
    double confidence;
};

}  // namespace

MetricSummary compute_ap(const std::vector<EvalInstance>& images,
                         const std::vector<std::string>& taxonomy, int max_dets,
                         const std::vector<double>& thresholds) {
    for (const auto& img : images)
        for (const auto& d : img.detections)
            if (std::find(taxonomy.begin(), taxonomy.end(), d.category) == taxonomy.end())
                throw ConfigError("compute_ap: detection category '" + d.category +
                                  "' not in the taxonomy");

    // cap detections per image by confidence
    std::vector<std::vector<size_t>> kept(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        std::vector<size_t> order(images[i].detections.size());
        for (size_t j = 0; j < order.size(); ++j) order[j] = j;
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return images[i].detections[a].confidence > images[i].detections[b].confidence;
        });
        if (static_cast<int>(order.size()) > max_dets)
            order.resize(static_cast<size_t>(max_dets));
        kept[i] = std::move(order);
    }

    if (thresholds.empty()) throw ConfigError("compute_ap: no IoU thresholds");
    MetricSummary out;
    double ap_sum = 0, ap50_sum = 0, ap75_sum = 0, ar_sum = 0;
    int categories_counted = 0;

    for (const auto& cat : taxonomy) {
        int total_gt = 0;
        for (const auto& img : images)
            for (const auto& g : img.ground_truth)
                if (g.category == cat) ++total_gt;
        if (total_gt == 0) continue;  // COCO convention: absent categories excluded

        // globally ranked detections of this category
        std::vector<RankedDet> ranked;
        for (size_t i = 0; i < images.size(); ++i)
            for (size_t j : kept[i])
                if (images[i].detections[j].category == cat)
                    ranked.push_back({i, j, images[i].detections[j].confidence});
        std::stable_sort(ranked.begin(), ranked.end(), [](const RankedDet& a, const RankedDet& b) {
            return a.confidence > b.confidence;
        });

        double cat_ap_sum = 0, cat_recall_sum = 0;
        for (size_t ti = 0; ti < thresholds.size(); ++ti) {
            const double tau = thresholds[ti];
            std::vector<std::vector<char>> gt_used(images.size());
            for (size_t i = 0; i < images.size(); ++i)
                gt_used[i].assign(images[i].ground_truth.size(), 0);

            std::vector<char> is_tp(ranked.size(), 0);
            int tp = 0;
            for (size_t r = 0; r < ranked.size(); ++r) {
                const auto& det = images[ranked[r].image].detections[ranked[r].det];
                const auto& gts = images[ranked[r].image].ground_truth;
                double best_iou = 0.0;
                int best_gt = -1;
                for (size_t gi = 0; gi < gts.size(); ++gi) {
                    if (gts[gi].category != cat || gt_used[ranked[r].image][gi]) continue;
                    const double v = iou(det.box, gts[gi].box);
                    if (v > best_iou) {
                        best_iou = v;
                        best_gt = static_cast<int>(gi);
                    }
                }
                if (best_gt >= 0 && best_iou >= tau) {
                    gt_used[ranked[r].image][static_cast<size_t>(best_gt)] = 1;
                    is_tp[r] = 1;
                    ++tp;
                }
            }

            // precision envelope over the ranked list, 101-point integration
            std::vector<double> precision(ranked.size()), recall(ranked.size());
            int cum_tp = 0;
            for (size_t r = 0; r < ranked.size(); ++r) {
                cum_tp += is_tp[r];
                precision[r] = static_cast<double>(cum_tp) / static_cast<double>(r + 1);
                recall[r] = static_cast<double>(cum_tp) / total_gt;
            }
            for (size_t r = ranked.size(); r-- > 1;)
                precision[r - 1] = std::max(precision[r - 1], precision[r]);

            double ap = 0;
            for (int k = 0; k <= 100; ++k) {
                const double r_level = k / 100.0;
                double p = 0;
                for (size_t r = 0; r < ranked.size(); ++r)
                    if (recall[r] >= r_level) {
                        p = precision[r];
                        break;
                    }
                ap += p;
            }
            ap /= 101.0;

            cat_ap_sum += ap;
            cat_recall_sum += static_cast<double>(tp) / total_gt;
            if (std::abs(tau - 0.5) < 1e-9) ap50_sum += ap;
            if (std::abs(tau - 0.75) < 1e-9) ap75_sum += ap;
        }

        const double cat_ap = cat_ap_sum / thresholds.size();
        out.per_class[cat] = cat_ap;
        ap_sum += cat_ap;
        ar_sum += cat_recall_sum / thresholds.size();
        ++categories_counted;
    }

    if (categories_counted > 0) {
        out.ap = ap_sum / categories_counted;
        out.ap50 = ap50_sum / categories_counted;
        out.ap75 = ap75_sum / categories_counted;
        out.ar = ar_sum / categories_counted;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frozen random feature extractor
// ---------------------------------------------------------------------------

namespace {

constexpr int kFeatInput = 32;
constexpr int kFeatDim = 64;

struct FeatWeights {
    // conv1: 3->16 3x3, conv2: 16->16 3x3
    std::vector<double> w1, b1, w2, b2;

    FeatWeights() {
        Rng rng(0xfea715u);
        auto init = [&](std::vector<double>& w, int n, double scale) {
            w.resize(static_cast<size_t>(n));
            for (auto& v : w) v = rng.normal() * scale;
        };
        init(w1, 16 * 3 * 3 * 3, 1.0 / std::sqrt(27.0));
        init(b1, 16, 0.1);
        init(w2, 16 * 16 * 3 * 3, 1.0 / std::sqrt(144.0));
        init(b2, 16, 0.1);
    }
};

const FeatWeights& feat_weights() {
    static const FeatWeights w;
    return w;
}

void conv3x3_silu(const std::vector<double>& in, int cin, int n, const std::vector<double>& w,
                  const std::vector<double>& b, int cout, std::vector<double>& out) {
    out.assign(static_cast<size_t>(cout) * n * n, 0.0);
    for (int oc = 0; oc < cout; ++oc)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                double acc = b[static_cast<size_t>(oc)];
                for (int ic = 0; ic < cin; ++ic)
                    for (int ky = -1; ky <= 1; ++ky)
                        for (int kx = -1; kx <= 1; ++kx) {
                            const int iy = y + ky, ix = x + kx;
                            if (iy < 0 || iy >= n || ix < 0 || ix >= n) continue;
                            acc += w[(((static_cast<size_t>(oc) * cin + ic) * 3 + ky + 1) * 3 +
                                      kx + 1)] *
                                   in[(static_cast<size_t>(ic) * n + iy) * n + ix];
                        }
                out[(static_cast<size_t>(oc) * n + y) * n + x] = acc / (1.0 + std::exp(-acc));
            }
}

void avgpool4(const std::vector<double>& in, int c, int n, std::vector<double>& out) {
    const int m = n / 4;
    out.assign(static_cast<size_t>(c) * m * m, 0.0);
    for (int ic = 0; ic < c; ++ic)
        for (int y = 0; y < m; ++y)
            for (int x = 0; x < m; ++x) {
                double acc = 0;
                for (int dy = 0; dy < 4; ++dy)
                    for (int dx = 0; dx < 4; ++dx)
                        acc += in[(static_cast<size_t>(ic) * n + 4 * y + dy) * n + 4 * x + dx];
                out[(static_cast<size_t>(ic) * m + y) * m + x] = acc / 16.0;
            }
}

}  // namespace

int feature_dim() { return kFeatDim; }

std::vector<double> feature_extract(const Image& img) {
    const Image work = (img.width == kFeatInput && img.height == kFeatInput)
                           ? img
                           : bicubic_resize(img, kFeatInput, kFeatInput);
    std::vector<double> x(static_cast<size_t>(3) * kFeatInput * kFeatInput);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < kFeatInput * kFeatInput; ++i)
            x[static_cast<size_t>(c) * kFeatInput * kFeatInput + i] =
                work.rgb[static_cast<size_t>(i) * 3 + c] / 255.0;

    const auto& w = feat_weights();
    std::vector<double> h1, p1, h2, p2;
    conv3x3_silu(x, 3, kFeatInput, w.w1, w.b1, 16, h1);
    avgpool4(h1, 16, kFeatInput, p1);          // 16 x 8 x 8
    conv3x3_silu(p1, 16, 8, w.w2, w.b2, 16, h2);
    avgpool4(h2, 16, 8, p2);                   // 16 x 2 x 2 = 64
    return p2;
}

// ---------------------------------------------------------------------------
// Frechet distance
// ---------------------------------------------------------------------------

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major d x d).
// Deterministic sweep order; a is destroyed, eigenvalues land on its
// diagonal, v accumulates eigenvectors (unused by callers so far).
std::vector<double> symmetric_eigenvalues(std::vector<double> a, int d,
                                          std::vector<double>* vectors = nullptr) {
    std::vector<double> v;
    if (vectors) {
        v.assign(static_cast<size_t>(d) * d, 0.0);
        for (int i = 0; i < d; ++i) v[static_cast<size_t>(i) * d + i] = 1.0;
    }
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) off += a[static_cast<size_t>(p) * d + q] *
                                                    a[static_cast<size_t>(p) * d + q];
        if (off < 1e-22) break;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) {
                const double apq = a[static_cast<size_t>(p) * d + q];
                if (std::abs(apq) < 1e-30) continue;
                const double app = a[static_cast<size_t>(p) * d + p];
                const double aqq = a[static_cast<size_t>(q) * d + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < d; ++k) {
                    const double akp = a[static_cast<size_t>(k) * d + p];
                    const double akq = a[static_cast<size_t>(k) * d + q];
                    a[static_cast<size_t>(k) * d + p] = c * akp - s * akq;
                    a[static_cast<size_t>(k) * d + q] = s * akp + c * akq;
                }
                for (int k = 0; k < d; ++k) {
                    const double apk = a[static_cast<size_t>(p) * d + k];
                    const double aqk = a[static_cast<size_t>(q) * d + k];
                    a[static_cast<size_t>(p) * d + k] = c * apk - s * aqk;
                    a[static_cast<size_t>(q) * d + k] = s * apk + c * aqk;
                }
                if (vectors)
                    for (int k = 0; k < d; ++k) {
                        const double vkp = v[static_cast<size_t>(k) * d + p];
                        const double vkq = v[static_cast<size_t>(k) * d + q];
                        v[static_cast<size_t>(k) * d + p] = c * vkp - s * vkq;
                        v[static_cast<size_t>(k) * d + q] = s * vkp + c * vkq;
                    }
            }
    }
    std::vector<double> eig(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) eig[static_cast<size_t>(i)] = a[static_cast<size_t>(i) * d + i];
    if (vectors) *vectors = std::move(v);
    return eig;
}

struct Moments {
    std::vector<double> mean;
    std::vector<double> cov;  // d x d
};

Moments fit_moments(const std::vector<std::vector<double>>& feats, int d) {
    Moments m;
    m.mean.assign(static_cast<size_t>(d), 0.0);
    for (const auto& f : feats)
        for (int i = 0; i < d; ++i) m.mean[static_cast<size_t>(i)] += f[static_cast<size_t>(i)];
    const double n = static_cast<double>(feats.size());
    for (auto& v : m.mean) v /= n;

    m.cov.assign(static_cast<size_t>(d) * d, 0.0);
    for (const auto& f : feats)
        for (int i = 0; i < d; ++i) {
            const double di = f[static_cast<size_t>(i)] - m.mean[static_cast<size_t>(i)];
            for (int j = i; j < d; ++j)
                m.cov[static_cast<size_t>(i) * d + j] +=
                    di * (f[static_cast<size_t>(j)] - m.mean[static_cast<size_t>(j)]);
        }
    const double denom = n > 1 ? n - 1 : 1;
    for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) {
            m.cov[static_cast<size_t>(i) * d + j] /= denom;
            m.cov[static_cast<size_t>(j) * d + i] = m.cov[static_cast<size_t>(i) * d + j];
        }
    for (int i = 0; i < d; ++i) m.cov[static_cast<size_t>(i) * d + i] += 1e-6;  // ridge
    return m;
}

std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b, int d) {
    std::vector<double> c(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) {
            const double av = a[static_cast<size_t>(i) * d + k];
            for (int j = 0; j < d; ++j)
                c[static_cast<size_t>(i) * d + j] += av * b[static_cast<size_t>(k) * d + j];
        }
    return c;
}

}  // namespace

double frechet_distance(const std::vector<std::vector<double>>& feats_a,
                        const std::vector<std::vector<double>>& feats_b) {
    if (feats_a.size() < 2 || feats_b.size() < 2)
        throw NumericError("frechet_distance: need at least 2 samples per side");
    const int d = static_cast<int>(feats_a[0].size());
    for (const auto& f : feats_a)
        if (static_cast<int>(f.size()) != d)
            throw NumericError("frechet_distance: inconsistent feature widths");
    for (const auto& f : feats_b)
        if (static_cast<int>(f.size()) != d)
            throw NumericError("frechet_distance: inconsistent feature widths");

    const auto ma = fit_moments(feats_a, d);
    const auto mb = fit_moments(feats_b, d);

    double mean_term = 0;
    for (int i = 0; i < d; ++i) {
        const double diff = ma.mean[static_cast<size_t>(i)] - mb.mean[static_cast<size_t>(i)];
        mean_term += diff * diff;
    }

    double tr_a = 0, tr_b = 0;
    for (int i = 0; i < d; ++i) {
        tr_a += ma.cov[static_cast<size_t>(i) * d + i];
        tr_b += mb.cov[static_cast<size_t>(i) * d + i];
    }

    // sqrt(Sa) via eigendecomposition, then Tr sqrt(Sa Sb) = Tr sqrt(A Sb A)
    // with A = sqrt(Sa) (the similarity-transformed, symmetric product).
    std::vector<double> vecs;
    auto eig_a = symmetric_eigenvalues(ma.cov, d, &vecs);
    std::vector<double> sqrt_a(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) {
        const double lam = std::sqrt(std::max(0.0, eig_a[static_cast<size_t>(i)]));
        for (int r = 0; r < d; ++r) {
            const double vr = vecs[static_cast<size_t>(r) * d + i] * lam;
            for (int c = 0; c < d; ++c)
                sqrt_a[static_cast<size_t>(r) * d + c] +=
                    vr * vecs[static_cast<size_t>(c) * d + i];
        }
    }
    auto inner = matmul_sq(matmul_sq(sqrt_a, mb.cov, d), sqrt_a, d);
    // enforce exact symmetry before the eigensolver
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            const double v = 0.5 * (inner[static_cast<size_t>(i) * d + j] +
                                    inner[static_cast<size_t>(j) * d + i]);
            inner[static_cast<size_t>(i) * d + j] = v;
            inner[static_cast<size_t>(j) * d + i] = v;
        }
    auto eig_m = symmetric_eigenvalues(std::move(inner), d);
    double tr_sqrt = 0;
    for (double lam : eig_m) tr_sqrt += std::sqrt(std::max(0.0, lam));

    const double result = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    if (!std::isfinite(result))
        throw NumericError("frechet_distance: degenerate covariance (non-finite result)");
    return std::max(0.0, result);
}

std::string metric_report_json(const MetricReport& report) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [cat, ap] : report.summary.per_class) per_class[cat] = ap;
    nlohmann::json j = {{"ap", report.summary.ap},       {"ap50", report.summary.ap50},
                        {"ap75", report.summary.ap75},   {"ar", report.summary.ar},
                        {"per_class", per_class},        {"fid_analog", report.fid_analog}};
    return j.dump(1, '\t') + "\n";
}

std::string metric_report_table(const MetricReport& report) {
    std::ostringstream os;
    char line[128];
    os << "metric      value\n";
    os << "-----------------\n";
    std::snprintf(line, sizeof(line), "AP        %7.4f\n", report.summary.ap);
    os << line;
    std::snprintf(line, sizeof(line), "AP50      %7.4f\n", report.summary.ap50);
    os << line;
    std::snprintf(line, sizeof(line), "AP75      %7.4f\n", report.summary.ap75);
    os << line;
    std::snprintf(line, sizeof(line), "AR        %7.4f\n", report.summary.ar);
    os << line;
    std::snprintf(line, sizeof(line), "FID-analog %6.4f\n", report.fid_analog);
    os << line;
    os << "\nper-class AP\n------------\n";
    for (const auto& [cat, ap] : report.summary.per_class) {
        std::snprintf(line, sizeof(line), "%-16s %7.4f\n", cat.c_str(), ap);
        os << line;
    }
    return os.str();
}

}  // namespace grounddiff
