#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "grounddiff/data.hpp"
#include "grounddiff/png_io.hpp"

using namespace grounddiff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("grounddiff_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// independent color classifier for the pixel-scan oracle
int color_class(const uint8_t* p) {
    const int r = p[0], g = p[1], b = p[2];
    if (r > 150 && g < 110 && b < 110) return 0;  // red
    if (g > 150 && r < 110 && b < 110) return 1;  // green
    if (b > 150 && r < 110 && g < 130) return 2;  // blue
    return -1;
}

int category_color(const std::string& cat) {
    if (cat.rfind("red", 0) == 0) return 0;
    if (cat.rfind("green", 0) == 0) return 1;
    return 2;
}

}  // namespace

TEST_CASE("shape vocabulary") {
    const auto& v = shape_vocabulary();
    CHECK(v.size() == 9);
    CHECK(in_vocabulary("red circle"));
    CHECK(in_vocabulary("blue triangle"));
    CHECK(!in_vocabulary("purple hexagon"));
}

TEST_CASE("generate_scene") {
    GenConfig cfg;

    SUBCASE("same seed is bit-identical") {
        Rng r1(99), r2(99);
        auto [img1, rec1] = generate_scene(r1, cfg, 7);
        auto [img2, rec2] = generate_scene(r2, cfg, 7);
        CHECK(img1.rgb == img2.rgb);
        CHECK(rec1.captions == rec2.captions);
        REQUIRE(rec1.annotations.size() == rec2.annotations.size());
        for (size_t i = 0; i < rec1.annotations.size(); ++i) {
            CHECK(rec1.annotations[i].bbox == rec2.annotations[i].bbox);
            CHECK(rec1.annotations[i].category == rec2.annotations[i].category);
        }
    }

    SUBCASE("boxes tightly contain the rendered pixels") {
        Rng rng(123);
        for (int trial = 0; trial < 25; ++trial) {
            auto [img, rec] = generate_scene(rng, cfg, trial);
            for (const auto& a : rec.annotations) {
                const int bx = static_cast<int>(a.bbox[0]), by = static_cast<int>(a.bbox[1]);
                const int bw = static_cast<int>(a.bbox[2]), bh = static_cast<int>(a.bbox[3]);
                const int want = category_color(a.category);
                int minx = 1 << 20, miny = 1 << 20, maxx = -1, maxy = -1;
                for (int y = std::max(0, by - 1); y < std::min(img.height, by + bh + 1); ++y)
                    for (int x = std::max(0, bx - 1); x < std::min(img.width, bx + bw + 1); ++x)
                        if (color_class(img.px(x, y)) == want) {
                            minx = std::min(minx, x);
                            miny = std::min(miny, y);
                            maxx = std::max(maxx, x);
                            maxy = std::max(maxy, y);
                        }
                REQUIRE(maxx >= 0);
                CHECK(std::abs(minx - bx) <= 1);
                CHECK(std::abs(miny - by) <= 1);
                CHECK(std::abs(maxx - (bx + bw - 1)) <= 1);
                CHECK(std::abs(maxy - (by + bh - 1)) <= 1);
            }
        }
    }

    SUBCASE("single-shape caption names exactly one category") {
        GenConfig one = cfg;
        one.min_shapes = 1;
        one.max_shapes = 1;
        Rng rng(5);
        auto [img, rec] = generate_scene(rng, one, 0);
        REQUIRE(rec.annotations.size() == 1);
        const auto& cap = rec.captions[0];
        CHECK(cap.find(rec.annotations[0].category) != std::string::npos);
        CHECK(cap.find(" and ") == std::string::npos);
        CHECK(cap.find(",") == std::string::npos);
        int mentions = 0;
        for (const auto& c : shape_vocabulary())
            if (cap.find(c) != std::string::npos) ++mentions;
        CHECK(mentions == 1);
    }

    SUBCASE("shape count stays within bounds") {
        Rng rng(11);
        for (int i = 0; i < 50; ++i) {
            auto [img, rec] = generate_scene(rng, cfg, i);
            CHECK(rec.annotations.size() >= 1);
            CHECK(rec.annotations.size() <= 5);
            for (const auto& a : rec.annotations) CHECK(in_vocabulary(a.category));
        }
    }
}

TEST_CASE("png round trip") {
    Rng rng(3);
    Image img(37, 23);
    for (auto& v : img.rgb) v = static_cast<uint8_t>(rng.below(256));
    auto bytes = encode_png(img);
    auto back = decode_png(bytes);
    CHECK(back.width == img.width);
    CHECK(back.height == img.height);
    CHECK(back.rgb == img.rgb);

    CHECK_THROWS_AS(decode_png({1, 2, 3}), IoError);
}

TEST_CASE("dataset round trip") {
    TempDir tmp;
    GenConfig cfg;
    Rng rng(42);
    std::vector<std::pair<Image, AnnotationRecord>> records;
    for (int i = 0; i < 100; ++i) records.push_back(generate_scene(rng, cfg, i));
    write_dataset(tmp.path.string(), records);

    auto loaded = read_annotations(tmp.path.string());
    REQUIRE(loaded.size() == 100);
    for (size_t i = 0; i < 100; ++i) {
        const auto& orig = records[i].second;
        const auto& got = loaded[i];
        CHECK(got.id == orig.id);
        CHECK(got.file == orig.file);
        CHECK(got.width == orig.width);
        CHECK(got.height == orig.height);
        CHECK(got.captions == orig.captions);
        REQUIRE(got.annotations.size() == orig.annotations.size());
        for (size_t j = 0; j < got.annotations.size(); ++j) {
            CHECK(got.annotations[j].bbox == orig.annotations[j].bbox);
            CHECK(got.annotations[j].category == orig.annotations[j].category);
        }
        auto img = read_dataset_image(tmp.path.string(), got);
        CHECK(img.rgb == records[i].first.rgb);
    }

    SUBCASE("iteration order is sorted by id even if the file shuffles") {
        // rewrite with reversed image order; reader must sort by id
        std::vector<std::pair<Image, AnnotationRecord>> reversed(records.rbegin(), records.rend());
        write_dataset(tmp.path.string(), reversed);
        auto again = read_annotations(tmp.path.string());
        for (size_t i = 1; i < again.size(); ++i) CHECK(again[i].id > again[i - 1].id);
    }
}

TEST_CASE("malformed annotation errors name the offending field") {
    TempDir tmp;
    std::ofstream f(tmp.path / "annotations.json");
    f << R"({"images":[{"id":0,"file":"a.png","width":64,"height":64}],
             "annotations":[{"image_id":0,"category":"red circle"}],
             "captions":[{"image_id":0,"text":"x"}]})";
    f.close();
    CHECK_THROWS_WITH_AS(read_annotations(tmp.path.string()),
                         doctest::Contains("annotations[0].bbox"), ConfigError);

    std::ofstream g(tmp.path / "annotations.json");
    g << "{ not json";
    g.close();
    CHECK_THROWS_AS(read_annotations(tmp.path.string()), ConfigError);
}

TEST_CASE("preprocess box laws") {
    SUBCASE("coco to corner conversion") {
        auto b = coco_to_corners({10, 20, 30, 40});
        CHECK(b.x1 == 10);
        CHECK(b.y1 == 20);
        CHECK(b.x2 == 40);
        CHECK(b.y2 == 60);
    }

    SUBCASE("flip is an involution and preserves area") {
        const Box b{10, 20, 40, 60};
        auto f = flip_box(b, 512);
        CHECK(f.x1 == 512 - 40);
        CHECK(f.x2 == 512 - 10);
        CHECK(f.y1 == 20);
        CHECK(f.y2 == 60);
        auto ff = flip_box(f, 512);
        CHECK(ff.x1 == b.x1);
        CHECK(ff.y1 == b.y1);
        CHECK(ff.x2 == b.x2);
        CHECK(ff.y2 == b.y2);
        CHECK(f.area() == b.area());
    }

    SUBCASE("1% area filter boundary at 512x512") {
        AnnotationRecord rec;
        rec.id = 0;
        rec.width = 512;
        rec.height = 512;
        rec.captions = {"two boxes"};
        rec.annotations.push_back({{0, 0, 51, 51}, "red square"});     // 2601 < 2621.44
        rec.annotations.push_back({{100, 100, 52, 52}, "blue square"});  // 2704 >= 2621.44
        Image img(512, 512);
        PreprocessConfig cfg;
        cfg.target_size = 512;
        cfg.flip_prob = 0.0;
        Rng rng(1);
        auto ex = preprocess(rec, img, cfg, rng);
        REQUIRE(ex.layout.entities.size() == 1);
        CHECK(ex.layout.entities[0].text == "blue square");
    }

    SUBCASE("largest-30 cap keeps exactly the 30 biggest of 35") {
        AnnotationRecord rec;
        rec.id = 0;
        rec.width = 512;
        rec.height = 512;
        rec.captions = {"many boxes"};
        for (int i = 0; i < 35; ++i) {
            const double side = 60 + i;  // distinct areas, all above the 1% filter
            rec.annotations.push_back(
                {{static_cast<double>(i), static_cast<double>(i), side, side}, "red square"});
        }
        Image img(512, 512);
        PreprocessConfig cfg;
        cfg.target_size = 512;
        cfg.flip_prob = 0.0;
        Rng rng(1);
        auto ex = preprocess(rec, img, cfg, rng);
        REQUIRE(ex.layout.entities.size() == 30);
        // survivors are the 30 largest: sides 65..94, i.e. widths >= 65/512
        for (const auto& e : ex.layout.entities)
            CHECK(e.box.width() * 512 >= 65 - 1e-9);
    }

    SUBCASE("area filter is monotone in box size") {
        Image img(512, 512);
        PreprocessConfig cfg;
        cfg.target_size = 512;
        cfg.flip_prob = 0.0;
        Rng seedgen(77);
        for (int trial = 0; trial < 40; ++trial) {
            const double w = seedgen.uniform(30, 120), h = seedgen.uniform(30, 120);
            AnnotationRecord rec;
            rec.id = 0;
            rec.width = 512;
            rec.height = 512;
            rec.captions = {"one box"};
            rec.annotations.push_back({{10, 10, w, h}, "red square"});
            Rng r1(1);
            auto kept = !preprocess(rec, img, cfg, r1).layout.entities.empty();
            if (kept) {
                rec.annotations[0].bbox = {10, 10, w + 15, h + 15};
                Rng r2(1);
                CHECK(!preprocess(rec, img, cfg, r2).layout.entities.empty());
            }
        }
    }

    SUBCASE("normalized outputs stay in range with flips enabled") {
        GenConfig gen;
        Rng rng(9);
        PreprocessConfig cfg;
        cfg.target_size = 32;
        cfg.flip_prob = 0.5;
        cfg.min_rel_area = 0.01;
        for (int i = 0; i < 60; ++i) {
            auto [img, rec] = generate_scene(rng, gen, i);
            auto ex = preprocess(rec, img, cfg, rng);
            CHECK(ex.image.size() == 3u * 32 * 32);
            for (const auto& e : ex.layout.entities) {
                CHECK(e.box.x1 >= 0.0);
                CHECK(e.box.y1 >= 0.0);
                CHECK(e.box.x2 <= 1.0);
                CHECK(e.box.y2 <= 1.0);
                CHECK(e.box.x1 < e.box.x2);
                CHECK(e.box.y1 < e.box.y2);
            }
        }
    }

    SUBCASE("caption choice is uniform over a 5-caption record") {
        AnnotationRecord rec;
        rec.id = 0;
        rec.width = 64;
        rec.height = 64;
        rec.captions = {"c0", "c1", "c2", "c3", "c4"};
        Image img(64, 64);
        PreprocessConfig cfg;
        cfg.target_size = 16;
        cfg.flip_prob = 0.5;
        Rng rng(2024);
        std::map<std::string, int> counts;
        for (int i = 0; i < 10000; ++i) counts[preprocess(rec, img, cfg, rng).layout.caption]++;
        for (const auto& [cap, n] : counts)
            CHECK(std::abs(n / 10000.0 - 0.2) < 0.02);
        CHECK(counts.size() == 5);
    }
}

TEST_CASE("bicubic resize basics") {
    SUBCASE("identity at equal size") {
        Rng rng(8);
        Image img(16, 16);
        for (auto& v : img.rgb) v = static_cast<uint8_t>(rng.below(256));
        auto out = bicubic_resize(img, 16, 16);
        CHECK(out.rgb == img.rgb);
    }

    SUBCASE("constant image stays constant under any scale") {
        Image img(64, 64, 120, 35, 200);
        auto out = bicubic_resize(img, 31, 17);
        for (size_t i = 0; i < out.rgb.size(); i += 3) {
            CHECK(static_cast<int>(out.rgb[i]) == 120);
            CHECK(static_cast<int>(out.rgb[i + 1]) == 35);
            CHECK(static_cast<int>(out.rgb[i + 2]) == 200);
        }
    }

    SUBCASE("downscale preserves coarse structure") {
        Image img(64, 64, 0, 0, 0);
        fill_rect(img, 0, 0, 32, 64, 250, 250, 250);  // left half white
        auto out = bicubic_resize(img, 32, 32);
        CHECK(static_cast<int>(out.px(4, 16)[0]) > 200);
        CHECK(static_cast<int>(out.px(27, 16)[0]) < 50);
    }
}
