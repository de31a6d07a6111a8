#include "pmss/data/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "pmss/numerics/checkpoint.hpp"
#include "pmss/numerics/rng.hpp"

namespace pmss::data {

namespace {

constexpr std::array<ShapeKind, 4> kKinds{ShapeKind::disk, ShapeKind::rectangle, ShapeKind::triangle,
                                          ShapeKind::curve};
constexpr std::array<std::array<double, 3>, 4> kPalette{{
    {0.90, 0.20, 0.20},  // red
    {0.20, 0.80, 0.30},  // green
    {0.20, 0.30, 0.90},  // blue
    {0.90, 0.85, 0.20},  // yellow
}};

/// Color of every downstream foreground class; shape alone tells classes apart.
constexpr std::array<double, 3> kSharedColor{0.80, 0.80, 0.80};

std::array<double, 3> hue_color(std::size_t i) {
  const double h = std::fmod(0.13 + 0.381966 * static_cast<double>(i), 1.0) * 6.0;
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  for (auto& c : rgb) c = 0.15 + 0.75 * c;
  return rgb;
}

std::vector<ClassAppearance> default_classes(std::size_t num_classes) {
  std::vector<ClassAppearance> out;
  for (std::size_t c = 1; c < num_classes; ++c) {
    const std::size_t i = c - 1;
    out.push_back({i < kPalette.size() ? kPalette[i] : hue_color(i), kKinds[i % kKinds.size()]});
  }
  return out;
}

struct Point {
  double x, y;
};

double cross(Point o, Point a, Point b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

/// One rasterizable primitive with a conservative bounding box.
struct Primitive {
  ShapeKind kind{};
  std::vector<Point> pts;  // disk: center; rectangle: 4 corners; triangle: 3; curve: polyline
  double radius = 0.0;     // disk radius or curve half-width
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool inside(Point p) const {
    switch (kind) {
      case ShapeKind::disk: {
        const double dx = p.x - pts[0].x, dy = p.y - pts[0].y;
        return dx * dx + dy * dy <= radius * radius;
      }
      case ShapeKind::rectangle:
      case ShapeKind::triangle: {
        // Convex polygon with counter-clockwise or clockwise winding.
        bool pos = false, neg = false;
        for (std::size_t i = 0; i < pts.size(); ++i) {
          const double c = cross(pts[i], pts[(i + 1) % pts.size()], p);
          pos = pos || c > 0;
          neg = neg || c < 0;
        }
        return !(pos && neg);
      }
      case ShapeKind::curve:
        for (std::size_t i = 0; i + 1 < pts.size(); ++i)
          if (segment_distance(p, pts[i], pts[i + 1]) <= radius) return true;
        return false;
    }
    return false;
  }

  void bound() {
    x0 = y0 = 1e300;
    x1 = y1 = -1e300;
    for (auto p : pts) {
      x0 = std::min(x0, p.x);
      y0 = std::min(y0, p.y);
      x1 = std::max(x1, p.x);
      y1 = std::max(y1, p.y);
    }
    const double pad = kind == ShapeKind::disk || kind == ShapeKind::curve ? radius : 0.0;
    x0 -= pad + 1;
    y0 -= pad + 1;
    x1 += pad + 1;
    y1 += pad + 1;
  }
};

Primitive make_primitive(ShapeKind kind, double size, Rng& rng) {
  const double s = size / 64.0;
  Primitive p;
  p.kind = kind;
  const double margin = 6.0 * s;
  const Point c{rng.uniform(margin, size - margin), rng.uniform(margin, size - margin)};
  const double theta = rng.uniform(0.0, std::numbers::pi);
  switch (kind) {
    case ShapeKind::disk:
      p.pts = {c};
      p.radius = rng.uniform(5.0, 11.0) * s;
      break;
    case ShapeKind::rectangle: {
      const double a = rng.uniform(4.0, 11.0) * s, b = rng.uniform(4.0, 11.0) * s;
      const double ct = std::cos(theta), st = std::sin(theta);
      for (auto [u, v] : {std::pair{-a, -b}, std::pair{a, -b}, std::pair{a, b}, std::pair{-a, b}})
        p.pts.push_back({c.x + u * ct - v * st, c.y + u * st + v * ct});
      break;
    }
    case ShapeKind::triangle: {
      const double r = rng.uniform(7.0, 13.0) * s;
      for (int k = 0; k < 3; ++k) {
        const double a = theta + 2.0 * std::numbers::pi * k / 3.0 + rng.uniform(-0.3, 0.3);
        p.pts.push_back({c.x + r * std::cos(a), c.y + r * std::sin(a)});
      }
      break;
    }
    case ShapeKind::curve: {
      // Quadratic Bezier spanning a good part of the image, 2 px wide.
      const double len = rng.uniform(0.35, 0.7) * size;
      const Point a{c.x - 0.5 * len * std::cos(theta), c.y - 0.5 * len * std::sin(theta)};
      const Point b{c.x + 0.5 * len * std::cos(theta), c.y + 0.5 * len * std::sin(theta)};
      const double bend = rng.uniform(-0.4, 0.4) * len;
      const Point m{c.x - bend * std::sin(theta), c.y + bend * std::cos(theta)};
      constexpr int kSegments = 24;
      for (int i = 0; i <= kSegments; ++i) {
        const double t = static_cast<double>(i) / kSegments;
        const double u = 1.0 - t;
        p.pts.push_back({u * u * a.x + 2 * u * t * m.x + t * t * b.x, u * u * a.y + 2 * u * t * m.y + t * t * b.y});
      }
      p.radius = 1.0;
      break;
    }
  }
  p.bound();
  return p;
}

void paint_background(const SynthSpec& spec, Rng& rng, std::vector<double>& img) {
  const std::size_t n = spec.size;
  const std::size_t plane = n * n;
  if (spec.texture == 0) {
    const double f1 = rng.uniform(0.05, 0.15), f2 = rng.uniform(0.05, 0.15);
    const double p1 = rng.uniform(0, 6.283), p2 = rng.uniform(0, 6.283);
    std::array<double, 3> tint{rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double v = 0.45 + 0.12 * std::sin(f1 * x + p1) * std::cos(f2 * y + p2);
        for (std::size_t c = 0; c < 3; ++c) img[c * plane + y * n + x] = v + tint[c];
      }
  } else {
    const double f = rng.uniform(0.6, 1.2), th = rng.uniform(0, std::numbers::pi), ph = rng.uniform(0, 6.283);
    const double ct = std::cos(th), st = std::sin(th);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double v = 0.5 + 0.18 * std::sin(f * (x * ct + y * st) + ph);
        for (std::size_t c = 0; c < 3; ++c) img[c * plane + y * n + x] = v;
      }
  }
}

}  // namespace

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::curve: return "curve";
  }
  return "disk";
}

ShapeKind shape_kind_from(const std::string& name) {
  for (auto k : kKinds)
    if (to_string(k) == name) return k;
  throw std::invalid_argument("unknown shape kind '" + name + "'");
}

SynthSpec SynthSpec::downstream() {
  SynthSpec s;
  s.seed = 1;
  s.classes = default_classes(s.num_classes);
  for (auto& c : s.classes) c.color = kSharedColor;
  return s;
}

SynthSpec SynthSpec::source() {
  SynthSpec s = downstream();
  s.seed = 1001;
  // Same shapes, rotated color assignment.
  for (std::size_t i = 0; i < s.classes.size() && i < kPalette.size(); ++i)
    s.classes[i].color = kPalette[(i + 2) % kPalette.size()];
  s.texture = 1;
  s.n_train = 512;
  return s;
}

SynthSpec SynthSpec::thin_structure() {
  SynthSpec s;
  s.seed = 7;
  s.size = 48;
  s.num_classes = 2;
  s.min_shapes = 3;
  s.max_shapes = 6;
  s.classes = {{{0.60, 0.12, 0.10}, ShapeKind::curve}};
  s.n_train = 10;
  s.n_val = 0;
  return s;
}

void SynthSpec::validate() const {
  if (num_classes < 2) throw std::invalid_argument("synthetic task needs K >= 2");
  if (size < 16) throw std::invalid_argument("synthetic image size must be >= 16");
  if (classes.size() != num_classes - 1)
    throw std::invalid_argument("need one appearance per foreground class (" + std::to_string(num_classes - 1) +
                                "), got " + std::to_string(classes.size()));
  if (min_shapes > max_shapes) throw std::invalid_argument("min_shapes exceeds max_shapes");
  if (n_train + n_val == 0) throw std::invalid_argument("synthetic dataset must contain samples");
  if (texture != 0 && texture != 1) throw std::invalid_argument("texture family must be 0 or 1");
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : s.classes) classes.push_back({{"color", c.color}, {"shape", to_string(c.shape)}});
  j = {{"seed", s.seed},         {"size", s.size},        {"num_classes", s.num_classes},
       {"min_shapes", s.min_shapes}, {"max_shapes", s.max_shapes}, {"classes", classes},
       {"texture", s.texture},   {"color_jitter", s.color_jitter}, {"noise", s.noise},
       {"n_train", s.n_train},   {"n_val", s.n_val}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  s.seed = j.value("seed", s.seed);
  s.size = j.value("size", s.size);
  const std::size_t k = j.value("num_classes", s.num_classes);
  if (k != s.num_classes || s.classes.size() + 1 != k) s.classes = default_classes(k);
  s.num_classes = k;
  s.min_shapes = j.value("min_shapes", s.min_shapes);
  s.max_shapes = j.value("max_shapes", s.max_shapes);
  if (j.contains("classes")) {
    s.classes.clear();
    for (const auto& c : j.at("classes"))
      s.classes.push_back({c.at("color").get<std::array<double, 3>>(), shape_kind_from(c.at("shape").get<std::string>())});
  }
  s.texture = j.value("texture", s.texture);
  s.color_jitter = j.value("color_jitter", s.color_jitter);
  s.noise = j.value("noise", s.noise);
  s.n_train = j.value("n_train", s.n_train);
  s.n_val = j.value("n_val", s.n_val);
}

Sample generate_sample(const SynthSpec& spec, std::size_t index) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, index));
  const std::size_t n = spec.size;
  const std::size_t plane = n * n;
  std::vector<double> img(3 * plane);
  paint_background(spec, rng, img);
  LabelMap label(1, n, n, 0);

  const std::size_t count = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
  constexpr int kSuper = 4;
  for (std::size_t s = 0; s < count; ++s) {
    const auto cls = static_cast<std::int32_t>(1 + rng.below(spec.num_classes - 1));
    const ClassAppearance& look = spec.classes[static_cast<std::size_t>(cls - 1)];
    std::array<double, 3> color = look.color;
    for (auto& c : color) c = std::clamp(c + rng.uniform(-spec.color_jitter, spec.color_jitter), 0.0, 1.0);
    const Primitive prim = make_primitive(look.shape, static_cast<double>(n), rng);

    const auto lo_y = static_cast<std::size_t>(std::clamp(std::floor(prim.y0), 0.0, double(n)));
    const auto hi_y = static_cast<std::size_t>(std::clamp(std::ceil(prim.y1), 0.0, double(n)));
    const auto lo_x = static_cast<std::size_t>(std::clamp(std::floor(prim.x0), 0.0, double(n)));
    const auto hi_x = static_cast<std::size_t>(std::clamp(std::ceil(prim.x1), 0.0, double(n)));
    for (std::size_t y = lo_y; y < hi_y; ++y)
      for (std::size_t x = lo_x; x < hi_x; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx)
            hits += prim.inside({x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper});
        if (hits == 0) continue;
        const double alpha = static_cast<double>(hits) / (kSuper * kSuper);
        for (std::size_t c = 0; c < 3; ++c) {
          double& v = img[c * plane + y * n + x];
          v = (1.0 - alpha) * v + alpha * color[c];
        }
        if (prim.inside({x + 0.5, y + 0.5})) label.at(0, y, x) = cls;
      }
  }
  for (auto& v : img) v += rng.uniform(-spec.noise, spec.noise);
  return {Tensor::from({1, 3, n, n}, std::move(img)), std::move(label)};
}

Dataset generate(const SynthSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  for (std::size_t i = 0; i < spec.n_train; ++i) ds.train.push_back(generate_sample(spec, i));
  for (std::size_t i = 0; i < spec.n_val; ++i) ds.val.push_back(generate_sample(spec, spec.n_train + i));
  return ds;
}

Batch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const Sample& first = samples[indices[0]];
  const std::size_t c = first.image.dim(1), h = first.image.dim(2), w = first.image.dim(3);
  std::vector<double> pixels;
  pixels.reserve(indices.size() * c * h * w);
  LabelMap labels(indices.size(), h, w);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Sample& s = samples[indices[b]];
    if (s.image.dim(2) != h || s.image.dim(3) != w) throw std::invalid_argument("batch samples differ in size");
    pixels.insert(pixels.end(), s.image.data().begin(), s.image.data().end());
    std::copy(s.label.labels.begin(), s.label.labels.end(), labels.labels.begin() + static_cast<std::ptrdiff_t>(b * h * w));
  }
  return {Tensor::from({indices.size(), c, h, w}, std::move(pixels)), std::move(labels)};
}

Batch make_batch(std::span<const Sample> samples) {
  std::vector<std::size_t> all(samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batch(samples, all);
}

std::string serialize(const Dataset& ds) {
  std::ostringstream os(std::ios::binary);
  auto put = [&](const std::vector<Sample>& split, const std::string& tag) {
    for (std::size_t i = 0; i < split.size(); ++i) {
      const auto& s = split[i];
      write_entry(os, tag + ".img." + std::to_string(i), s.image);
      std::vector<double> lab(s.label.labels.begin(), s.label.labels.end());
      write_entry(os, tag + ".lab." + std::to_string(i), Tensor::from({s.label.n, s.label.h, s.label.w}, lab),
                  DType::f32);
    }
  };
  put(ds.train, "train");
  put(ds.val, "val");
  return os.str();
}

}  // namespace pmss::data
