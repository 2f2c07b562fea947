#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "grounddiff/layout.hpp"

namespace grounddiff {

// 8-bit RGB image, row-major, 3 bytes per pixel.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;

    Image() = default;
    Image(int w, int h, uint8_t r = 0, uint8_t g = 0, uint8_t b = 0) : width(w), height(h) {
        rgb.resize(static_cast<size_t>(w) * h * 3);
        for (int i = 0; i < w * h; ++i) {
            rgb[static_cast<size_t>(i) * 3] = r;
            rgb[static_cast<size_t>(i) * 3 + 1] = g;
            rgb[static_cast<size_t>(i) * 3 + 2] = b;
        }
    }

    uint8_t* px(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * width + x) * 3; }
    const uint8_t* px(int x, int y) const {
        return rgb.data() + (static_cast<size_t>(y) * width + x) * 3;
    }
};

// Bicubic resize with the Catmull-Rom kernel (a = -0.5), clamp-to-edge,
// separable passes, no cropping.
Image bicubic_resize(const Image& src, int out_w, int out_h);

// [3,H,W] float planes in [-1,1] <-> 8-bit RGB.
std::vector<float> image_to_planes(const Image& img);
Image planes_to_image(const std::vector<float>& planes, int width, int height);

// Rasterizers used by the scene generator; boxes are integer pixel rects
// [x, y, w, h], shapes touch all four box edges.
void fill_rect(Image& img, int x, int y, int w, int h, uint8_t r, uint8_t g, uint8_t b);
void fill_ellipse(Image& img, int x, int y, int w, int h, uint8_t r, uint8_t g, uint8_t b);
void fill_triangle(Image& img, int x, int y, int w, int h, uint8_t r, uint8_t g, uint8_t b);

// Overlay helpers for layout audit renders.
void draw_box_outline(Image& img, const Box& normalized, uint8_t r, uint8_t g, uint8_t b);
void draw_label(Image& img, int x, int y, const std::string& text, uint8_t r, uint8_t g,
                uint8_t b);

}  // namespace grounddiff
