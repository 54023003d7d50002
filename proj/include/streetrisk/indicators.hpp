#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "streetrisk/common.hpp"

namespace streetrisk {

using ClassSet = std::set<int>;

inline constexpr std::array<std::string_view, 11> kRoleNames = {
    "road", "sidewalk", "building", "vegetation", "terrain", "sky",
    "vehicle", "traffic_sign", "obstruction", "obstacle", "escape"};

struct ClassInfo {
  int id = 0;
  std::string name;
};

// Class domain of the segmentation output plus the named class sets each
// indicator reads. Role sets may overlap.
class CategorySchema {
 public:
  CategorySchema() = default;
  CategorySchema(std::vector<ClassInfo> classes, std::map<std::string, ClassSet> roles)
      : classes_(std::move(classes)), roles_(std::move(roles)) {
    validate();
  }

  // The 19-class street-scene taxonomy with the default role assignment.
  static CategorySchema street19() {
    static const char* names[] = {"road",   "sidewalk",      "building",     "wall",       "fence",
                                  "pole",   "traffic light", "traffic sign", "vegetation", "terrain",
                                  "sky",    "person",        "rider",        "car",        "truck",
                                  "bus",    "train",         "motorcycle",   "bicycle"};
    std::vector<ClassInfo> classes;
    for (int i = 0; i < 19; ++i) classes.push_back({i, names[i]});
    std::map<std::string, ClassSet> roles = {
        {"road", {0}},
        {"sidewalk", {1}},
        {"building", {2}},
        {"vegetation", {8}},
        {"terrain", {9}},
        {"sky", {10}},
        {"vehicle", {13, 14, 15, 16, 17, 18}},
        {"traffic_sign", {7}},
        {"obstruction", {2, 3, 4, 5, 8}},
        {"obstacle", {3, 4, 5, 6, 7}},
        {"escape", {1, 9}},
    };
    return CategorySchema(std::move(classes), std::move(roles));
  }

  // {"classes": [{"id": 0, "name": "road"}, ...], "roles": {"road": [0 | "road", ...], ...}}
  // Missing roles fall back to the street19 defaults when the class names line up.
  static CategorySchema from_json(const nlohmann::json& j) {
    std::vector<ClassInfo> classes;
    for (const auto& c : j.at("classes")) classes.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
    std::map<std::string, ClassSet> roles;
    auto id_of = [&](const nlohmann::json& v) -> int {
      if (v.is_number_integer()) return v.get<int>();
      const auto name = v.get<std::string>();
      for (const auto& c : classes)
        if (c.name == name) return c.id;
      fail("role refers to unknown class '{}'", name);
    };
    if (j.contains("roles")) {
      for (const auto& [role, members] : j.at("roles").items()) {
        ClassSet s;
        for (const auto& m : members) s.insert(id_of(m));
        roles[role] = std::move(s);
      }
    }
    const auto defaults = street19();
    for (auto role : kRoleNames) {
      std::string key(role);
      if (roles.count(key)) continue;
      ClassSet s;
      for (int id : defaults.role(key)) {
        const auto& nm = defaults.classes()[static_cast<std::size_t>(id)].name;
        for (const auto& c : classes)
          if (c.name == nm) s.insert(c.id);
      }
      roles[key] = std::move(s);
    }
    return CategorySchema(std::move(classes), std::move(roles));
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["classes"] = nlohmann::json::array();
    for (const auto& c : classes_) j["classes"].push_back({{"id", c.id}, {"name", c.name}});
    for (const auto& [role, ids] : roles_) j["roles"][role] = ids;
    return j;
  }

  const std::vector<ClassInfo>& classes() const { return classes_; }
  std::size_t size() const { return classes_.size(); }
  bool contains(int id) const { return id >= 0 && static_cast<std::size_t>(id) < classes_.size(); }

  const ClassSet& role(const std::string& name) const {
    auto it = roles_.find(name);
    if (it == roles_.end()) fail("schema has no role set '{}'", name);
    return it->second;
  }
  const std::map<std::string, ClassSet>& roles() const { return roles_; }

  int id_of(std::string_view name) const {
    for (const auto& c : classes_)
      if (c.name == name) return c.id;
    fail("schema has no class '{}'", name);
  }

 private:
  void validate() const {
    if (classes_.empty()) fail("schema declares no classes");
    if (classes_.size() > 256) fail("schema declares {} classes; masks are 8-bit", classes_.size());
    for (std::size_t i = 0; i < classes_.size(); ++i)
      if (classes_[i].id != static_cast<int>(i))
        fail("schema class ids must be unique and contiguous from 0; position {} has id {}", i, classes_[i].id);
    for (const auto& [role, ids] : roles_)
      for (int id : ids)
        if (!contains(id)) fail("role '{}' refers to undeclared class id {}", role, id);
  }

  std::vector<ClassInfo> classes_;
  std::map<std::string, ClassSet> roles_;
};

class LabelMask {
 public:
  LabelMask() = default;

  // Throws on dimension mismatch or on a class id outside the schema.
  LabelMask(std::size_t width, std::size_t height, std::vector<std::uint8_t> data, const CategorySchema& schema,
            int heading = 0, std::string point_id = {})
      : width_(width), height_(height), data_(std::move(data)), heading_(heading), point_id_(std::move(point_id)) {
    if (width_ == 0 || height_ == 0) fail("mask dimensions must be at least 1x1, got {}x{}", width_, height_);
    if (data_.size() != width_ * height_)
      fail("mask data has {} pixels, expected {}x{} = {}", data_.size(), width_, height_, width_ * height_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (!schema.contains(data_[i]))
        fail("unknown class {} at pixel (x={}, y={})", static_cast<int>(data_[i]), i % width_, i / width_);
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t pixels() const { return data_.size(); }
  int heading() const { return heading_; }
  const std::string& point_id() const { return point_id_; }
  std::span<const std::uint8_t> data() const { return data_; }
  int at(std::size_t x, std::size_t y) const { return data_[y * width_ + x]; }

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<std::uint8_t> data_;
  int heading_ = 0;
  std::string point_id_;
};

struct CenterRegion {
  double x0 = 0.25, x1 = 0.75, y0 = 0.33, y1 = 1.0;
};

struct IndicatorConfig {
  CenterRegion center;
  int connectivity = 4;
  std::size_t min_component_px = 5;
  std::map<std::string, ClassSet> role_overrides;

  void validate() const {
    const auto& c = center;
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!(in01(c.x0) && in01(c.x1) && in01(c.y0) && in01(c.y1)) || !(c.x0 < c.x1) || !(c.y0 < c.y1))
      fail("center region must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1");
    if (connectivity != 4 && connectivity != 8) fail("connectivity must be 4 or 8, got {}", connectivity);
    if (min_component_px < 1) fail("min_component_px must be >= 1");
  }

  const ClassSet& role(const CategorySchema& schema, const std::string& name) const {
    auto it = role_overrides.find(name);
    return it != role_overrides.end() ? it->second : schema.role(name);
  }
};

inline void to_json(nlohmann::json& j, const IndicatorConfig& c) {
  j = {{"center_region", {c.center.x0, c.center.x1, c.center.y0, c.center.y1}},
       {"connectivity", c.connectivity},
       {"min_component_px", c.min_component_px},
       {"roles", c.role_overrides}};
}

inline void from_json(const nlohmann::json& j, IndicatorConfig& c) {
  if (j.contains("center_region")) {
    auto r = j.at("center_region").get<std::vector<double>>();
    if (r.size() != 4) fail("center_region needs [x0, x1, y0, y1]");
    c.center = {r[0], r[1], r[2], r[3]};
  }
  c.connectivity = j.value("connectivity", c.connectivity);
  c.min_component_px = j.value("min_component_px", c.min_component_px);
  if (j.contains("roles")) c.role_overrides = j.at("roles").get<std::map<std::string, ClassSet>>();
  c.validate();
}

struct IndicatorVector {
  static constexpr std::size_t kSize = 11;
  static constexpr std::array<std::string_view, kSize> kNames = {"bc", "sor", "bor", "vod", "vo", "dar",
                                                                 "es", "sr",  "vc",  "tsi", "vd"};

  double bc = 0, sor = 0, bor = 0, vod = 0, vo = 0, dar = 0, es = 0, sr = 0, vc = 0, tsi = 0, vd = 0;

  std::array<double, kSize> values() const { return {bc, sor, bor, vod, vo, dar, es, sr, vc, tsi, vd}; }

  static IndicatorVector from_values(std::span<const double> v) {
    if (v.size() != kSize) fail("indicator vector needs {} values, got {}", kSize, v.size());
    return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10]};
  }

  friend bool operator==(const IndicatorVector&, const IndicatorVector&) = default;
};

// Per-class pixel counts indexed by class id.
inline std::vector<std::size_t> class_counts(const LabelMask& mask) {
  std::vector<std::size_t> counts(256, 0);
  for (auto v : mask.data()) ++counts[v];
  return counts;
}

// Fraction of pixels per present class.
inline std::map<int, double> class_proportions(const LabelMask& mask) {
  const auto counts = class_counts(mask);
  const double total = static_cast<double>(mask.pixels());
  std::map<int, double> out;
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c]) out[static_cast<int>(c)] = static_cast<double>(counts[c]) / total;
  return out;
}

inline double class_ratio(const LabelMask& mask, const ClassSet& roles) {
  const auto counts = class_counts(mask);
  std::size_t hit = 0;
  for (int c : roles)
    if (c >= 0 && c < 256) hit += counts[static_cast<std::size_t>(c)];
  return static_cast<double>(hit) / static_cast<double>(mask.pixels());
}

// Shannon entropy over present classes, normalised by ln(number of present
// classes). A single-class mask has complexity 0.
inline double background_complexity(const LabelMask& mask) {
  const auto counts = class_counts(mask);
  const double total = static_cast<double>(mask.pixels());
  double h = 0.0;
  int present = 0;
  for (auto n : counts) {
    if (!n) continue;
    ++present;
    const double p = static_cast<double>(n) / total;
    h -= p * std::log(p);
  }
  if (present <= 1) return 0.0;
  return std::clamp(h / std::log(static_cast<double>(present)), 0.0, 1.0);
}

struct PixelRect {
  std::size_t col0, col1, row0, row1;  // half-open
  std::size_t area() const { return (col1 - col0) * (row1 - row0); }
};

inline PixelRect center_pixels(const IndicatorConfig& cfg, std::size_t width, std::size_t height) {
  auto at = [](double f, std::size_t n) { return static_cast<std::size_t>(std::lround(f * static_cast<double>(n))); };
  PixelRect r{at(cfg.center.x0, width), at(cfg.center.x1, width), at(cfg.center.y0, height),
              at(cfg.center.y1, height)};
  if (r.col1 <= r.col0 || r.row1 <= r.row0)
    fail("center region is empty at {}x{} pixels (cols {}..{}, rows {}..{})", width, height, r.col0, r.col1, r.row0,
         r.row1);
  return r;
}

inline double sight_obstruction_risk(const LabelMask& mask, const CategorySchema& schema, const IndicatorConfig& cfg) {
  const auto rect = center_pixels(cfg, mask.width(), mask.height());
  const auto& obstruction = cfg.role(schema, "obstruction");
  std::size_t hit = 0;
  for (std::size_t y = rect.row0; y < rect.row1; ++y)
    for (std::size_t x = rect.col0; x < rect.col1; ++x) hit += obstruction.count(mask.at(x, y));
  return static_cast<double>(hit) / static_cast<double>(rect.area());
}

struct Component {
  std::size_t area = 0;
  std::size_t perimeter = 0;  // pixel edges bordering a non-member pixel or the image edge
  std::size_t min_x = 0, min_y = 0, max_x = 0, max_y = 0;
};

// Maximal connected regions of pixels whose class is in `roles`, in
// row-major order of their first pixel. Components under min_component_px are dropped.
inline std::vector<Component> connected_components(const LabelMask& mask, const ClassSet& roles,
                                                   const IndicatorConfig& cfg) {
  const std::size_t w = mask.width(), h = mask.height();
  std::array<bool, 256> member{};
  for (int c : roles)
    if (c >= 0 && c < 256) member[static_cast<std::size_t>(c)] = true;
  auto in_set = [&](std::size_t x, std::size_t y) { return member[static_cast<std::size_t>(mask.at(x, y))]; };

  std::vector<bool> seen(w * h, false);
  std::vector<Component> out;
  std::vector<std::pair<std::size_t, std::size_t>> stack;
  const bool eight = cfg.connectivity == 8;

  for (std::size_t sy = 0; sy < h; ++sy) {
    for (std::size_t sx = 0; sx < w; ++sx) {
      if (seen[sy * w + sx] || !in_set(sx, sy)) continue;
      Component comp{0, 0, sx, sy, sx, sy};
      seen[sy * w + sx] = true;
      stack.push_back({sx, sy});
      while (!stack.empty()) {
        auto [x, y] = stack.back();
        stack.pop_back();
        ++comp.area;
        comp.min_x = std::min(comp.min_x, x);
        comp.max_x = std::max(comp.max_x, x);
        comp.min_y = std::min(comp.min_y, y);
        comp.max_y = std::max(comp.max_y, y);
        comp.perimeter += (x == 0 || !in_set(x - 1, y)) + (x + 1 == w || !in_set(x + 1, y)) +
                          (y == 0 || !in_set(x, y - 1)) + (y + 1 == h || !in_set(x, y + 1));
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            if (!eight && dx != 0 && dy != 0) continue;
            const auto nx = static_cast<std::ptrdiff_t>(x) + dx;
            const auto ny = static_cast<std::ptrdiff_t>(y) + dy;
            if (nx < 0 || ny < 0 || nx >= static_cast<std::ptrdiff_t>(w) || ny >= static_cast<std::ptrdiff_t>(h))
              continue;
            const auto ux = static_cast<std::size_t>(nx), uy = static_cast<std::size_t>(ny);
            if (seen[uy * w + ux] || !in_set(ux, uy)) continue;
            seen[uy * w + ux] = true;
            stack.push_back({ux, uy});
          }
        }
      }
      if (comp.area >= cfg.min_component_px) out.push_back(comp);
    }
  }
  return out;
}

// Obstacle components per 10 000 px of image area.
inline double visible_obstacle_density(const LabelMask& mask, const CategorySchema& schema,
                                       const IndicatorConfig& cfg) {
  const auto comps = connected_components(mask, cfg.role(schema, "obstacle"), cfg);
  return static_cast<double>(comps.size()) / (static_cast<double>(mask.pixels()) / 10000.0);
}

inline double circularity(const Component& c) {
  constexpr double pi = 3.14159265358979323846;
  const double p = static_cast<double>(c.perimeter);
  return std::clamp(4.0 * pi * static_cast<double>(c.area) / (p * p), 0.0, 1.0);
}

// Mean circularity of traffic-sign components; 0 when the view has none.
inline double traffic_sign_integrity(const LabelMask& mask, const CategorySchema& schema, const IndicatorConfig& cfg) {
  const auto comps = connected_components(mask, cfg.role(schema, "traffic_sign"), cfg);
  if (comps.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : comps) s += circularity(c);
  return s / static_cast<double>(comps.size());
}

inline ClassSet set_union(const ClassSet& a, const ClassSet& b) {
  ClassSet out = a;
  out.insert(b.begin(), b.end());
  return out;
}

inline IndicatorVector compute_indicators(const LabelMask& mask, const CategorySchema& schema,
                                          const IndicatorConfig& cfg) {
  cfg.validate();
  auto role = [&](const char* name) -> const ClassSet& { return cfg.role(schema, name); };
  IndicatorVector v;
  v.bc = background_complexity(mask);
  v.sor = sight_obstruction_risk(mask, schema, cfg);
  v.bor = class_ratio(mask, role("building"));
  v.vod = visible_obstacle_density(mask, schema, cfg);
  v.vo = class_ratio(mask, set_union(role("sky"), role("terrain")));
  v.dar = class_ratio(mask, role("road"));
  v.es = class_ratio(mask, role("escape"));
  v.sr = class_ratio(mask, role("sidewalk"));
  v.vc = class_ratio(mask, role("vegetation"));
  v.tsi = traffic_sign_integrity(mask, schema, cfg);
  v.vd = class_ratio(mask, role("vehicle"));
  return v;
}

// Unweighted mean over the views of one point.
inline IndicatorVector aggregate_views(std::span<const IndicatorVector> views) {
  if (views.empty()) fail("aggregate_views needs at least one view");
  // Mean as first + mean offset, so identical views reproduce the input exactly.
  const auto first = views.front().values();
  std::array<double, IndicatorVector::kSize> acc{};
  for (const auto& v : views) {
    const auto vals = v.values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += vals[i] - first[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = first[i] + acc[i] / static_cast<double>(views.size());
  return IndicatorVector::from_values(acc);
}

}  // namespace streetrisk
