#include "grounddiff/image.hpp"

#include <algorithm>
#include <cmath>

namespace grounddiff {

namespace {

// Catmull-Rom cubic (a = -0.5).
inline double cubic_weight(double t) {
    const double a = -0.5;
    const double at = std::abs(t);
    if (at <= 1.0) return ((a + 2.0) * at - (a + 3.0)) * at * at + 1.0;
    if (at < 2.0) return ((a * at - 5.0 * a) * at + 8.0 * a) * at - 4.0 * a;
    return 0.0;
}

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace

Image bicubic_resize(const Image& src, int out_w, int out_h) {
    // horizontal pass into a float buffer, then vertical pass
    std::vector<double> tmp(static_cast<size_t>(src.height) * out_w * 3);
    const double sx = static_cast<double>(src.width) / out_w;
    for (int y = 0; y < src.height; ++y)
        for (int ox = 0; ox < out_w; ++ox) {
            const double cx = (ox + 0.5) * sx - 0.5;
            const int ix = static_cast<int>(std::floor(cx));
            double acc[3] = {0, 0, 0};
            for (int k = -1; k <= 2; ++k) {
                const double w = cubic_weight(cx - (ix + k));
                const uint8_t* p = src.px(clampi(ix + k, 0, src.width - 1), y);
                for (int c = 0; c < 3; ++c) acc[c] += w * p[c];
            }
            for (int c = 0; c < 3; ++c)
                tmp[(static_cast<size_t>(y) * out_w + ox) * 3 + c] = acc[c];
        }

    Image out(out_w, out_h);
    const double sy = static_cast<double>(src.height) / out_h;
    for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox) {
            const double cy = (oy + 0.5) * sy - 0.5;
            const int iy = static_cast<int>(std::floor(cy));
            double acc[3] = {0, 0, 0};
            for (int k = -1; k <= 2; ++k) {
                const double w = cubic_weight(cy - (iy + k));
                const int yy = clampi(iy + k, 0, src.height - 1);
                for (int c = 0; c < 3; ++c)
                    acc[c] += w * tmp[(static_cast<size_t>(yy) * out_w + ox) * 3 + c];
            }
            uint8_t* p = out.px(ox, oy);
            for (int c = 0; c < 3; ++c)
                p[c] = static_cast<uint8_t>(clampi(static_cast<int>(std::lround(acc[c])), 0, 255));
        }
    return out;
}

std::vector<float> image_to_planes(const Image& img) {
    std::vector<float> out(static_cast<size_t>(img.width) * img.height * 3);
    const size_t plane = static_cast<size_t>(img.width) * img.height;
    for (size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c)
            out[c * plane + i] = static_cast<float>(img.rgb[i * 3 + c]) / 127.5f - 1.0f;
    return out;
}

Image planes_to_image(const std::vector<float>& planes, int width, int height) {
    Image img(width, height);
    const size_t plane = static_cast<size_t>(width) * height;
    for (size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) {
            const float v = std::clamp(planes[c * plane + i], -1.0f, 1.0f);
            img.rgb[i * 3 + c] =
                static_cast<uint8_t>(clampi(static_cast<int>(std::lround((v + 1.0f) * 127.5f)), 0, 255));
        }
    return img;
}

void fill_rect(Image& img, int x, int y, int w, int h, uint8_t r, uint8_t g, uint8_t b) {
    for (int py = std::max(0, y); py < std::min(img.height, y + h); ++py)
        for (int px = std::max(0, x); px < std::min(img.width, x + w); ++px) {
            uint8_t* p = img.px(px, py);
            p[0] = r;
            p[1] = g;
            p[2] = b;
        }
}

void fill_ellipse(Image& img, int x, int y, int w, int h, uint8_t r, uint8_t g, uint8_t b) {
    const double cx = x + w / 2.0, cy = y + h / 2.0;
    const double rx = w / 2.0, ry = h / 2.0;
    for (int py = std::max(0, y); py < std::min(img.height, y + h); ++py)
        for (int px = std::max(0, x); px < std::min(img.width, x + w); ++px) {
            const double dx = (px + 0.5 - cx) / rx;
            const double dy = (py + 0.5 - cy) / ry;
            if (dx * dx + dy * dy <= 1.0) {
                uint8_t* p = img.px(px, py);
                p[0] = r;
                p[1] = g;
                p[2] = b;
            }
        }
}

void fill_triangle(Image& img, int x, int y, int w, int h, uint8_t r, uint8_t g, uint8_t b) {
    // isoceles, apex at the top-center, base along the bottom edge
    const double cx = x + w / 2.0;
    for (int py = std::max(0, y); py < std::min(img.height, y + h); ++py) {
        const double f = (py + 1.0 - y) / h;  // row bottom within [0,1]
        const double half = f * w / 2.0;
        for (int px = std::max(0, x); px < std::min(img.width, x + w); ++px) {
            if (std::abs(px + 0.5 - cx) <= half) {
                uint8_t* p = img.px(px, py);
                p[0] = r;
                p[1] = g;
                p[2] = b;
            }
        }
    }
}

void draw_box_outline(Image& img, const Box& n, uint8_t r, uint8_t g, uint8_t b) {
    const int x1 = clampi(static_cast<int>(std::lround(n.x1 * img.width)), 0, img.width - 1);
    const int x2 = clampi(static_cast<int>(std::lround(n.x2 * img.width)) - 1, 0, img.width - 1);
    const int y1 = clampi(static_cast<int>(std::lround(n.y1 * img.height)), 0, img.height - 1);
    const int y2 = clampi(static_cast<int>(std::lround(n.y2 * img.height)) - 1, 0, img.height - 1);
    for (int px = x1; px <= x2; ++px) {
        uint8_t* a = img.px(px, y1);
        uint8_t* c = img.px(px, y2);
        a[0] = c[0] = r;
        a[1] = c[1] = g;
        a[2] = c[2] = b;
    }
    for (int py = y1; py <= y2; ++py) {
        uint8_t* a = img.px(x1, py);
        uint8_t* c = img.px(x2, py);
        a[0] = c[0] = r;
        a[1] = c[1] = g;
        a[2] = c[2] = b;
    }
}

namespace {

// 5x7 glyphs, columns packed as 7-bit verticals, LSB = top row.
struct Glyph {
    char ch;
    uint8_t col[5];
};

constexpr Glyph kFont[] = {
    {'A', {0x7e, 0x11, 0x11, 0x11, 0x7e}}, {'B', {0x7f, 0x49, 0x49, 0x49, 0x36}},
    {'C', {0x3e, 0x41, 0x41, 0x41, 0x22}}, {'D', {0x7f, 0x41, 0x41, 0x22, 0x1c}},
    {'E', {0x7f, 0x49, 0x49, 0x49, 0x41}}, {'F', {0x7f, 0x09, 0x09, 0x09, 0x01}},
    {'G', {0x3e, 0x41, 0x49, 0x49, 0x7a}}, {'H', {0x7f, 0x08, 0x08, 0x08, 0x7f}},
    {'I', {0x00, 0x41, 0x7f, 0x41, 0x00}}, {'J', {0x20, 0x40, 0x41, 0x3f, 0x01}},
    {'K', {0x7f, 0x08, 0x14, 0x22, 0x41}}, {'L', {0x7f, 0x40, 0x40, 0x40, 0x40}},
    {'M', {0x7f, 0x02, 0x0c, 0x02, 0x7f}}, {'N', {0x7f, 0x04, 0x08, 0x10, 0x7f}},
    {'O', {0x3e, 0x41, 0x41, 0x41, 0x3e}}, {'P', {0x7f, 0x09, 0x09, 0x09, 0x06}},
    {'Q', {0x3e, 0x41, 0x51, 0x21, 0x5e}}, {'R', {0x7f, 0x09, 0x19, 0x29, 0x46}},
    {'S', {0x46, 0x49, 0x49, 0x49, 0x31}}, {'T', {0x01, 0x01, 0x7f, 0x01, 0x01}},
    {'U', {0x3f, 0x40, 0x40, 0x40, 0x3f}}, {'V', {0x1f, 0x20, 0x40, 0x20, 0x1f}},
    {'W', {0x3f, 0x40, 0x38, 0x40, 0x3f}}, {'X', {0x63, 0x14, 0x08, 0x14, 0x63}},
    {'Y', {0x07, 0x08, 0x70, 0x08, 0x07}}, {'Z', {0x61, 0x51, 0x49, 0x45, 0x43}},
    {'0', {0x3e, 0x51, 0x49, 0x45, 0x3e}}, {'1', {0x00, 0x42, 0x7f, 0x40, 0x00}},
    {'2', {0x42, 0x61, 0x51, 0x49, 0x46}}, {'3', {0x21, 0x41, 0x45, 0x4b, 0x31}},
    {'4', {0x18, 0x14, 0x12, 0x7f, 0x10}}, {'5', {0x27, 0x45, 0x45, 0x45, 0x39}},
    {'6', {0x3c, 0x4a, 0x49, 0x49, 0x30}}, {'7', {0x01, 0x71, 0x09, 0x05, 0x03}},
    {'8', {0x36, 0x49, 0x49, 0x49, 0x36}}, {'9', {0x06, 0x49, 0x49, 0x29, 0x1e}},
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00}},
};

const Glyph* find_glyph(char c) {
    for (const auto& g : kFont)
        if (g.ch == c) return &g;
    return nullptr;
}

}  // namespace

void draw_label(Image& img, int x, int y, const std::string& text, uint8_t r, uint8_t g,
                uint8_t b) {
    int cx = x;
    for (char raw : text) {
        const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
        const Glyph* gl = find_glyph(c);
        if (gl) {
            for (int col = 0; col < 5; ++col)
                for (int row = 0; row < 7; ++row)
                    if (gl->col[col] & (1 << row)) {
                        const int px = cx + col, py = y + row;
                        if (px >= 0 && px < img.width && py >= 0 && py < img.height) {
                            uint8_t* p = img.px(px, py);
                            p[0] = r;
                            p[1] = g;
                            p[2] = b;
                        }
                    }
        }
        cx += 6;
    }
}

}  // namespace grounddiff
