#pragma once

#include <string>
#include <vector>

#include "grounddiff/image.hpp"

namespace grounddiff {

// Minimal 8-bit RGB PNG writer/reader on zlib. The writer emits filter-0
// scanlines; the reader handles all five standard filters.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

std::vector<uint8_t> encode_png(const Image& img);
Image decode_png(const std::vector<uint8_t>& bytes);

}  // namespace grounddiff
