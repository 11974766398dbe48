#pragma once

#include <nlohmann/json.hpp>

#include "vcore/geometry.hpp"

namespace vcore {

inline void to_json(nlohmann::json& j, const Point2& p) { j = nlohmann::json::array({p.x, p.y}); }
inline void from_json(const nlohmann::json& j, Point2& p) {
  p.x = j.at(0).get<double>();
  p.y = j.at(1).get<double>();
}

inline void to_json(nlohmann::json& j, const SimilarityTransform& t) {
  j = nlohmann::json{{"scale", t.scale}, {"rotation", t.rotation}, {"tx", t.tx}, {"ty", t.ty}, {"level", t.level}};
}
inline void from_json(const nlohmann::json& j, SimilarityTransform& t) {
  t.scale = j.at("scale").get<double>();
  t.rotation = j.at("rotation").get<double>();
  t.tx = j.at("tx").get<double>();
  t.ty = j.at("ty").get<double>();
  t.level = j.value("level", 0);
}

}  // namespace vcore
