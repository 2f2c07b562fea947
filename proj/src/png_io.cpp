#include "grounddiff/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "grounddiff/errors.hpp"

namespace grounddiff {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    put_u32(out, static_cast<uint32_t>(data.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uint32_t crc = static_cast<uint32_t>(
        ::crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
    put_u32(out, crc);
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

std::vector<uint8_t> encode_png(const Image& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.rgb.size() != static_cast<size_t>(img.width) * img.height * 3)
        throw IoError("encode_png: malformed image buffer");

    // filter byte 0 per scanline
    const size_t stride = static_cast<size_t>(img.width) * 3;
    std::vector<uint8_t> raw((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw[y * (stride + 1)] = 0;
        std::memcpy(raw.data() + y * (stride + 1) + 1, img.rgb.data() + y * stride, stride);
    }

    uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (::compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) !=
        Z_OK)
        throw IoError("encode_png: zlib compression failed");
    compressed.resize(bound);

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(img.width));
    put_u32(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", compressed);
    put_chunk(out, "IEND", {});
    return out;
}

Image decode_png(const std::vector<uint8_t>& bytes) {
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw IoError("decode_png: not a PNG file");

    int width = 0, height = 0;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    bool seen_ihdr = false;
    while (pos + 8 <= bytes.size()) {
        const uint32_t len = get_u32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw IoError("decode_png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const uint8_t* data = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw IoError("decode_png: bad IHDR");
            width = static_cast<int>(get_u32(data));
            height = static_cast<int>(get_u32(data + 4));
            if (data[8] != 8 || data[9] != 2 || data[10] != 0 || data[11] != 0 || data[12] != 0)
                throw IoError("decode_png: unsupported format (need 8-bit RGB, no interlace)");
            seen_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (!seen_ihdr || width <= 0 || height <= 0) throw IoError("decode_png: missing IHDR");

    const size_t stride = static_cast<size_t>(width) * 3;
    std::vector<uint8_t> raw((stride + 1) * height);
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (::uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw IoError("decode_png: zlib decompression failed");

    Image img(width, height);
    std::vector<uint8_t> prev(stride, 0);
    for (int y = 0; y < height; ++y) {
        const uint8_t filter = raw[y * (stride + 1)];
        const uint8_t* line = raw.data() + y * (stride + 1) + 1;
        uint8_t* out = img.rgb.data() + y * stride;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= 3 ? out[i - 3] : 0;
            const int b = prev[i];
            const int c = i >= 3 ? prev[i - 3] : 0;
            int v = line[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw IoError("decode_png: unknown filter type");
            }
            out[i] = static_cast<uint8_t>(v);
        }
        std::memcpy(prev.data(), out, stride);
    }
    return img;
}

void write_png(const std::string& path, const Image& img) {
    const auto bytes = encode_png(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_png: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write_png: write failed for " + path);
}

Image read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_png: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

}  // namespace grounddiff
