#include "grounddiff/data.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "grounddiff/errors.hpp"
#include "grounddiff/png_io.hpp"

namespace grounddiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ShapeColor {
    const char* name;
    uint8_t r, g, b;
};

constexpr ShapeColor kColors[3] = {{"red", 220, 40, 40}, {"green", 40, 200, 60},
                                   {"blue", 50, 80, 220}};
constexpr const char* kShapes[3] = {"circle", "square", "triangle"};

constexpr ShapeColor kBackgrounds[3] = {{"near-black", 10, 10, 12},
                                        {"dark-gray", 38, 38, 44},
                                        {"dark-olive", 26, 32, 26}};

std::string caption_list(const std::vector<std::string>& cats) {
    std::string out;
    for (size_t i = 0; i < cats.size(); ++i) {
        if (i > 0) out += (i + 1 == cats.size()) ? " and " : ", ";
        out += "a " + cats[i];
    }
    return out;
}

}  // namespace

const std::vector<std::string>& shape_vocabulary() {
    static const std::vector<std::string> vocab = [] {
        std::vector<std::string> v;
        for (const auto& c : kColors)
            for (const auto* s : kShapes) v.push_back(std::string(c.name) + " " + s);
        return v;
    }();
    return vocab;
}

bool in_vocabulary(const std::string& category) {
    const auto& v = shape_vocabulary();
    return std::find(v.begin(), v.end(), category) != v.end();
}

std::pair<Image, AnnotationRecord> generate_scene(Rng& rng, const GenConfig& cfg, int image_id) {
    const auto& bg = kBackgrounds[rng.below(3)];
    Image img(cfg.canvas, cfg.canvas, bg.r, bg.g, bg.b);

    AnnotationRecord rec;
    rec.id = image_id;
    rec.width = cfg.canvas;
    rec.height = cfg.canvas;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%06d.png", image_id);
    rec.file = buf;

    const int want = cfg.min_shapes + static_cast<int>(rng.below(
                                          static_cast<uint64_t>(cfg.max_shapes - cfg.min_shapes + 1)));
    struct Placed {
        int x, y, w, h;
        int color, shape;
    };
    std::vector<Placed> placed;
    for (int s = 0; s < want; ++s) {
        bool ok = false;
        for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
            const int w = cfg.min_box + static_cast<int>(rng.below(
                                            static_cast<uint64_t>(cfg.max_box - cfg.min_box + 1)));
            const double aspect = rng.uniform(0.75, 1.3333);
            int h = static_cast<int>(std::lround(w * aspect));
            h = std::clamp(h, cfg.min_box, cfg.max_box);
            if (w >= cfg.canvas - 2 || h >= cfg.canvas - 2) continue;
            const int x = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.canvas - w)));
            const int y = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.canvas - h)));
            bool overlap = false;
            for (const auto& p : placed) {
                // 2 px separation keeps connected components distinct
                if (x < p.x + p.w + 2 && p.x < x + w + 2 && y < p.y + p.h + 2 &&
                    p.y < y + h + 2) {
                    overlap = true;
                    break;
                }
            }
            if (overlap) continue;
            Placed pl;
            pl.x = x;
            pl.y = y;
            pl.w = w;
            pl.h = h;
            pl.color = static_cast<int>(rng.below(3));
            pl.shape = static_cast<int>(rng.below(3));
            placed.push_back(pl);
            ok = true;
        }
    }

    std::vector<std::string> cats;
    for (const auto& p : placed) {
        const auto& c = kColors[p.color];
        switch (p.shape) {
            case 0: fill_ellipse(img, p.x, p.y, p.w, p.h, c.r, c.g, c.b); break;
            case 1: fill_rect(img, p.x, p.y, p.w, p.h, c.r, c.g, c.b); break;
            default: fill_triangle(img, p.x, p.y, p.w, p.h, c.r, c.g, c.b); break;
        }
        AnnotationBox ab;
        ab.bbox = {static_cast<double>(p.x), static_cast<double>(p.y), static_cast<double>(p.w),
                   static_cast<double>(p.h)};
        ab.category = std::string(c.name) + " " + kShapes[p.shape];
        rec.annotations.push_back(std::move(ab));
        cats.push_back(rec.annotations.back().category);
    }

    const std::string list = caption_list(cats);
    rec.captions = {"a scene with " + list, "an image showing " + list,
                    list + " on a plain background"};
    return {std::move(img), std::move(rec)};
}

void write_dataset(const std::string& dir,
                   const std::vector<std::pair<Image, AnnotationRecord>>& records) {
    fs::create_directories(fs::path(dir) / "images");
    json images = json::array();
    json annotations = json::array();
    json captions = json::array();
    for (const auto& [img, rec] : records) {
        images.push_back(
            {{"id", rec.id}, {"file", rec.file}, {"width", rec.width}, {"height", rec.height}});
        for (const auto& a : rec.annotations)
            annotations.push_back(
                {{"image_id", rec.id}, {"bbox", a.bbox}, {"category", a.category}});
        for (const auto& c : rec.captions)
            captions.push_back({{"image_id", rec.id}, {"text", c}});
        write_png((fs::path(dir) / "images" / rec.file).string(), img);
    }
    json root = {{"images", images}, {"annotations", annotations}, {"captions", captions}};
    std::ofstream f(fs::path(dir) / "annotations.json");
    if (!f) throw IoError("write_dataset: cannot open " + dir + "/annotations.json");
    f << root.dump(1, '\t') << "\n";
}

std::vector<AnnotationRecord> read_annotations(const std::string& dir) {
    const auto path = fs::path(dir) / "annotations.json";
    std::ifstream f(path);
    if (!f) throw IoError("read_annotations: cannot open " + path.string());
    json root;
    try {
        f >> root;
    } catch (const json::exception& e) {
        throw ConfigError("read_annotations: malformed JSON in " + path.string() + ": " + e.what());
    }

    std::vector<AnnotationRecord> out;
    std::vector<int> order;
    if (!root.contains("images") || !root["images"].is_array())
        throw ConfigError("read_annotations: missing top-level \"images\" array");
    size_t idx = 0;
    for (const auto& ji : root["images"]) {
        AnnotationRecord rec;
        try {
            rec.id = ji.at("id").get<int>();
            rec.file = ji.at("file").get<std::string>();
            rec.width = ji.at("width").get<int>();
            rec.height = ji.at("height").get<int>();
        } catch (const json::exception& e) {
            throw ConfigError("read_annotations: images[" + std::to_string(idx) + "]: " + e.what());
        }
        out.push_back(std::move(rec));
        ++idx;
    }

    auto find_record = [&](int id, const char* where, size_t i) -> AnnotationRecord& {
        for (auto& r : out)
            if (r.id == id) return r;
        throw ConfigError("read_annotations: " + std::string(where) + "[" + std::to_string(i) +
                          "] references unknown image_id " + std::to_string(id));
    };

    idx = 0;
    for (const auto& ja : root.value("annotations", json::array())) {
        AnnotationBox ab;
        int image_id = 0;
        try {
            image_id = ja.at("image_id").get<int>();
            ab.category = ja.at("category").get<std::string>();
        } catch (const json::exception& e) {
            throw ConfigError("read_annotations: annotations[" + std::to_string(idx) + "]: " +
                              e.what());
        }
        if (!ja.contains("bbox") || !ja["bbox"].is_array() || ja["bbox"].size() != 4)
            throw ConfigError("read_annotations: annotations[" + std::to_string(idx) +
                              "].bbox must be [x,y,w,h]");
        ab.bbox = ja["bbox"].get<std::vector<double>>();
        if (ab.bbox[2] <= 0 || ab.bbox[3] <= 0)
            throw ConfigError("read_annotations: annotations[" + std::to_string(idx) +
                              "].bbox has non-positive size");
        find_record(image_id, "annotations", idx).annotations.push_back(std::move(ab));
        ++idx;
    }

    idx = 0;
    for (const auto& jc : root.value("captions", json::array())) {
        int image_id = 0;
        std::string text;
        try {
            image_id = jc.at("image_id").get<int>();
            text = jc.at("text").get<std::string>();
        } catch (const json::exception& e) {
            throw ConfigError("read_annotations: captions[" + std::to_string(idx) + "]: " +
                              e.what());
        }
        find_record(image_id, "captions", idx).captions.push_back(std::move(text));
        ++idx;
    }

    for (const auto& r : out)
        if (r.captions.empty())
            throw ConfigError("read_annotations: image id " + std::to_string(r.id) +
                              " has no captions");

    std::sort(out.begin(), out.end(),
              [](const AnnotationRecord& a, const AnnotationRecord& b) { return a.id < b.id; });
    return out;
}

Image read_dataset_image(const std::string& dir, const AnnotationRecord& rec) {
    return read_png((fs::path(dir) / "images" / rec.file).string());
}

Box coco_to_corners(const std::vector<double>& bbox) {
    if (bbox.size() != 4) throw ConfigError("coco_to_corners: bbox must be [x,y,w,h]");
    return Box{bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]};
}

Box flip_box(const Box& b, double width) { return Box{width - b.x2, b.y1, width - b.x1, b.y2}; }

TrainExample preprocess(const AnnotationRecord& rec, const Image& img, const PreprocessConfig& cfg,
                        Rng& rng) {
    if (rec.captions.empty()) throw ConfigError("preprocess: record has no captions");
    const bool flip = rng.bernoulli(cfg.flip_prob);
    const size_t caption_idx = static_cast<size_t>(rng.below(rec.captions.size()));

    Image resized = bicubic_resize(img, cfg.target_size, cfg.target_size);
    if (flip) {
        Image mirrored(resized.width, resized.height);
        for (int y = 0; y < resized.height; ++y)
            for (int x = 0; x < resized.width; ++x) {
                const uint8_t* s = resized.px(resized.width - 1 - x, y);
                uint8_t* d = mirrored.px(x, y);
                d[0] = s[0];
                d[1] = s[1];
                d[2] = s[2];
            }
        resized = std::move(mirrored);
    }

    const double sx = static_cast<double>(cfg.target_size) / rec.width;
    const double sy = static_cast<double>(cfg.target_size) / rec.height;

    struct Scaled {
        Box box;
        std::string category;
        double area;
    };
    std::vector<Scaled> boxes;
    for (const auto& a : rec.annotations) {
        Box b = coco_to_corners(a.bbox);
        b = Box{b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy};
        if (flip) b = flip_box(b, static_cast<double>(cfg.target_size));
        const double area = b.area();
        // drop when the box area is under min_rel_area of the image area
        if (area < cfg.min_rel_area * cfg.target_size * cfg.target_size) continue;
        boxes.push_back({b, a.category, area});
    }
    std::stable_sort(boxes.begin(), boxes.end(),
                     [](const Scaled& a, const Scaled& b) { return a.area > b.area; });
    if (static_cast<int>(boxes.size()) > cfg.max_objects)
        boxes.resize(static_cast<size_t>(cfg.max_objects));

    TrainExample ex;
    ex.image = image_to_planes(resized);
    ex.size = cfg.target_size;
    ex.layout.caption = rec.captions[caption_idx];
    for (const auto& s : boxes) {
        GroundingEntity e;
        e.text = s.category;
        e.box = Box{s.box.x1 / cfg.target_size, s.box.y1 / cfg.target_size,
                    s.box.x2 / cfg.target_size, s.box.y2 / cfg.target_size};
        ex.layout.entities.push_back(std::move(e));
    }
    return ex;
}

}  // namespace grounddiff
