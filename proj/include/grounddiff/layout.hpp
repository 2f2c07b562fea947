#pragma once

#include <string>
#include <vector>

#include "grounddiff/errors.hpp"

namespace grounddiff {

// Axis-aligned box in corner form. Conditioning boxes are normalized to
// [0,1]; the data pipeline also uses the same struct in pixel coordinates.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
};

inline void validate_normalized_box(const Box& b) {
    if (!(b.x1 >= 0.0 && b.x1 < b.x2 && b.x2 <= 1.0 && b.y1 >= 0.0 && b.y1 < b.y2 && b.y2 <= 1.0))
        throw ConfigError("invalid normalized box [" + std::to_string(b.x1) + "," +
                          std::to_string(b.y1) + "," + std::to_string(b.x2) + "," +
                          std::to_string(b.y2) + "]: need 0 <= x1 < x2 <= 1, 0 <= y1 < y2 <= 1");
}

// One grounded entity: open-ended text description plus its normalized box.
struct GroundingEntity {
    std::string text;
    Box box;
};

inline void validate_entity(const GroundingEntity& e) {
    if (e.text.empty()) throw ConfigError("grounding entity has empty text");
    validate_normalized_box(e.box);
}

// Full conditioning input for one image: global caption plus up to N
// entities. The dropped flags carry training-time condition dropout and
// select the unconditional branch at sampling time.
struct ConditionLayout {
    std::string caption;
    std::vector<GroundingEntity> entities;
    bool caption_dropped = false;
    bool entities_dropped = false;
};

}  // namespace grounddiff
