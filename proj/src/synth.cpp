#include "vcore/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include "vcore/image_io.hpp"
#include "vcore/json_io.hpp"

namespace vcore {

namespace {

constexpr double kPi = std::numbers::pi;

struct Wave {
  double kx, ky, phase, amp;
};

std::vector<Wave> make_waves(std::mt19937_64& rng, int count, double min_wavelength, double max_wavelength) {
  std::uniform_real_distribution<double> angle(0, 2 * kPi), phase(0, 2 * kPi), wl(min_wavelength, max_wavelength),
      amp(0.5, 1.0);
  std::vector<Wave> waves;
  double norm = 0;
  for (int k = 0; k < count; ++k) {
    const double a = angle(rng), w = 2 * kPi / wl(rng);
    waves.push_back({w * std::cos(a), w * std::sin(a), phase(rng), amp(rng)});
    norm += waves.back().amp * waves.back().amp;
  }
  // Unit variance overall.
  const double s = std::sqrt(2.0 / norm);
  for (Wave& w : waves) w.amp *= s;
  return waves;
}

double eval_waves(const std::vector<Wave>& waves, Point2 p) {
  double v = 0;
  for (const Wave& w : waves) v += w.amp * std::cos(w.kx * p.x + w.ky * p.y + w.phase);
  return v;
}

struct Gland {
  Point2 c;
  double a, b, cos_t, sin_t;
};

// The specimen in reference coordinates: one bent ribbon with textured
// stroma and ring-shaped glands.
class Specimen {
 public:
  Specimen(const SynthSpec& spec, std::mt19937_64& rng) {
    const double side = std::min(spec.width, spec.height);
    centre_ = {spec.width / 2.0, spec.height / 2.0};
    length_ = 0.62 * side;
    half_width_ = 0.09 * side;
    bend_ = 0.06 * side;
    std::uniform_real_distribution<double> tilt(-20.0, 20.0);
    const double alpha = tilt(rng) * kPi / 180.0;
    ca_ = std::cos(alpha);
    sa_ = std::sin(alpha);
    stroma_ = make_waves(rng, 24, 10.0, 40.0);

    std::uniform_real_distribution<double> uu(-0.5, 0.5), vv(-1, 1), ax(6, 13), ratio(0.55, 1.0), th(0, kPi);
    for (int attempt = 0; attempt < 2000 && glands_.size() < 40; ++attempt) {
      const double u = uu(rng) * (length_ - 40);
      const double a = ax(rng), b = a * ratio(rng);
      const double v = bend(u) + vv(rng) * (half_width_ - a - 6);
      const Point2 c = to_ref(u, v);
      bool clash = false;
      for (const Gland& g : glands_) clash |= distance(g.c, c) < g.a + a + 5;
      if (clash) continue;
      const double t = th(rng);
      glands_.push_back({c, a, b, std::cos(t), std::sin(t)});
    }
  }

  double bend(double u) const { return bend_ * std::sin(kPi * u / length_); }

  Point2 to_ref(double u, double v) const { return {centre_.x + ca_ * u - sa_ * v, centre_.y + sa_ * u + ca_ * v}; }

  // Local ribbon coordinates: u along the axis, v across it.
  void local(Point2 p, double& u, double& v) const {
    const double dx = p.x - centre_.x, dy = p.y - centre_.y;
    u = ca_ * dx + sa_ * dy;
    v = -sa_ * dx + ca_ * dy;
  }

  double half_width(double u) const {
    const double r = 2 * u / length_;
    if (std::abs(r) >= 1) return 0;
    return half_width_ * std::pow(1 - std::pow(r, 8), 0.25);
  }

  /// Signed inset: positive inside the ribbon, roughly in pixels.
  double inset(Point2 p) const {
    double u, v;
    local(p, u, v);
    return std::min(half_width(u) - std::abs(v - bend(u)), length_ / 2 - std::abs(u));
  }

  bool inside(Point2 p) const { return inset(p) >= 0; }

  /// Tissue darkness field in [0, 1]: stroma noise plus gland rings.
  void shade(Point2 p, double& stroma, double& ring, double& lumen) const {
    stroma = eval_waves(stroma_, p);
    ring = 0;
    lumen = 0;
    for (const Gland& g : glands_) {
      const double dx = p.x - g.c.x, dy = p.y - g.c.y;
      if (std::abs(dx) > g.a + 4 || std::abs(dy) > g.a + 4) continue;
      const double lx = g.cos_t * dx + g.sin_t * dy, ly = -g.sin_t * dx + g.cos_t * dy;
      const double rho = std::sqrt((lx / g.a) * (lx / g.a) + (ly / g.b) * (ly / g.b));
      const double edge = std::abs(rho - 1.0) * g.b;  // approximate pixel distance to the rim
      ring = std::max(ring, std::exp(-edge * edge / (2 * 1.3 * 1.3)));
      if (rho < 1.0) lumen = std::max(lumen, std::clamp((1.0 - rho) * g.b / 2.0, 0.0, 1.0));
    }
  }

  /// Points along the ribbon outline, used for the in-frame rejection test.
  std::vector<Point2> outline(int samples) const {
    std::vector<Point2> pts;
    for (int k = 0; k <= samples; ++k) {
      const double u = -length_ / 2 + length_ * k / samples;
      const double h = half_width(u);
      pts.push_back(to_ref(u, bend(u) + h));
      pts.push_back(to_ref(u, bend(u) - h));
    }
    return pts;
  }

  Point2 random_interior(std::mt19937_64& rng, double margin) const {
    std::uniform_real_distribution<double> uu(-0.5, 0.5), vv(-1, 1);
    for (;;) {
      const double u = uu(rng) * (length_ - 2 * margin);
      const double h = half_width(u) - margin;
      if (h <= 0) continue;
      const Point2 p = to_ref(u, bend(u) + vv(rng) * h);
      if (inset(p) >= margin) return p;
    }
  }

 private:
  Point2 centre_;
  double length_, half_width_, bend_, ca_, sa_;
  std::vector<Wave> stroma_;
  std::vector<Gland> glands_;
};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.sections = j.value("sections", s.sections);
  s.width = j.value("width", s.width);
  s.height = j.value("height", s.height);
  if (j.contains("rotation_deg")) s.rotation_deg = {j["rotation_deg"].at(0), j["rotation_deg"].at(1)};
  if (j.contains("scale")) s.scale = {j["scale"].at(0), j["scale"].at(1)};
  s.translation = j.value("translation", s.translation);
  s.elastic_amplitude = j.value("elastic_amplitude", s.elastic_amplitude);
  s.elastic_wavelength = j.value("elastic_wavelength", s.elastic_wavelength);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.decorrelation = j.value("decorrelation", s.decorrelation);
  s.landmarks = j.value("landmarks", s.landmarks);
  s.mpp = j.value("mpp", s.mpp);
  s.seed = j.value("seed", s.seed);
  if (s.sections < 1 || s.width < 64 || s.height < 64 || s.landmarks < 0 || !(s.mpp > 0)) {
    throw std::invalid_argument("synth spec: sections >= 1, frame >= 64x64, landmarks >= 0, mpp > 0 required");
  }
  return s;
}

nlohmann::json to_json(const SynthSpec& s) {
  return {{"sections", s.sections},
          {"width", s.width},
          {"height", s.height},
          {"rotation_deg", {s.rotation_deg.lo, s.rotation_deg.hi}},
          {"scale", {s.scale.lo, s.scale.hi}},
          {"translation", s.translation},
          {"elastic_amplitude", s.elastic_amplitude},
          {"elastic_wavelength", s.elastic_wavelength},
          {"noise_sigma", s.noise_sigma},
          {"decorrelation", s.decorrelation},
          {"landmarks", s.landmarks},
          {"mpp", s.mpp},
          {"seed", s.seed}};
}

Point2 SynthStack::elastic(std::size_t section, Point2 q) const {
  const double a = spec.elastic_amplitude;
  if (a == 0) return {};
  const double k = 2 * kPi / spec.elastic_wavelength;
  return {0.3 * a * std::sin(k * q.y + phase_x[section]), a * std::sin(k * q.x + phase_y[section])};
}

SynthStack generate_stack(const SynthSpec& spec) {
  if (spec.sections < 1) throw std::invalid_argument("generate_stack: need at least one section");
  std::mt19937_64 rng(spec.seed);
  SynthStack out;
  out.spec = spec;
  const Specimen specimen(spec, rng);
  const std::vector<Point2> outline = specimen.outline(64);
  const Point2 c{spec.width / 2.0, spec.height / 2.0};
  const double margin = 12.0 + 1.3 * spec.elastic_amplitude;

  std::uniform_real_distribution<double> rot(spec.rotation_deg.lo, spec.rotation_deg.hi), sc(spec.scale.lo, spec.scale.hi),
      tr(-spec.translation, spec.translation), ph(0, 2 * kPi);

  out.pairwise.push_back(SimilarityTransform::identity());
  out.truth.push_back(SimilarityTransform::identity());
  for (int i = 1; i < spec.sections; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 5000 && !placed; ++attempt) {
      // About the frame centre: p -> s R (p - c) + c + t.
      SimilarityTransform p{sc(rng), rot(rng) * kPi / 180.0, 0, 0, 0};
      const double tx = tr(rng), ty = tr(rng);
      const Point2 rc = p.apply(c);
      p.tx = c.x - rc.x + tx;
      p.ty = c.y - rc.y + ty;
      const SimilarityTransform t = out.truth.back().compose(p);
      const SimilarityTransform inv = t.inverse();
      placed = std::all_of(outline.begin(), outline.end(), [&](Point2 q) {
        const Point2 s = inv.apply(q);
        return s.x >= margin && s.y >= margin && s.x <= spec.width - 1 - margin && s.y <= spec.height - 1 - margin;
      });
      if (placed) {
        out.pairwise.push_back(p);
        out.truth.push_back(t);
      }
    }
    if (!placed) throw std::runtime_error("generate_stack: could not keep the ribbon inside the frame");
  }
  for (int i = 0; i < spec.sections; ++i) {
    out.phase_x.push_back(ph(rng));
    out.phase_y.push_back(ph(rng));
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  for (int i = 0; i < spec.sections; ++i) {
    const std::vector<Wave> own = make_waves(rng, 12, 8.0, 30.0);
    SectionImage img;
    img.mpp = spec.mpp;
    img.level = 0;
    img.section_index = i;
    img.rgb = Raster<Rgb>(spec.width, spec.height);
    BinaryMask ribbon(spec.width, spec.height, 0);
    const SimilarityTransform& t = out.truth[static_cast<std::size_t>(i)];
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        const Point2 q{double(x), double(y)};
        const Point2 b = t.apply(q + out.elastic(static_cast<std::size_t>(i), q));
        double r = 248, g = 248, bl = 248;
        if (specimen.inside(b)) {
          ribbon.at(x, y) = 1;
          double stroma, ring, lumen;
          specimen.shade(b, stroma, ring, lumen);
          const double tex = (1 - spec.decorrelation) * stroma + spec.decorrelation * eval_waves(own, b);
          // Pink stroma, darker purple rims, pale lumens.
          r = 228 + 14 * tex;
          g = 140 + 26 * tex;
          bl = 200 + 12 * tex;
          r += ring * (120 - r);
          g += ring * (60 - g);
          bl += ring * (150 - bl);
          r += lumen * (246 - r);
          g += lumen * (222 - g);
          bl += lumen * (240 - bl);
        }
        if (spec.noise_sigma > 0) {
          r += spec.noise_sigma * noise(rng);
          g += spec.noise_sigma * noise(rng);
          bl += spec.noise_sigma * noise(rng);
        }
        img.rgb.at(x, y) = Rgb{to_byte(r), to_byte(g), to_byte(bl)};
      }
    }
    out.sections.push_back(std::move(img));
    out.ribbons.push_back(std::move(ribbon));
  }

  // Landmarks: reference points carried into every section through the
  // inverse of the true maps, q + e_i(q) = truth_i^-1(L).
  for (int k = 0; k < spec.landmarks;) {
    const Point2 ref = specimen.random_interior(rng, 8.0);
    std::vector<Point2> track;
    bool ok = true;
    for (int i = 0; i < spec.sections && ok; ++i) {
      const Point2 m = out.truth[static_cast<std::size_t>(i)].inverse().apply(ref);
      Point2 q = m;
      for (int it = 0; it < 100; ++it) q = m - out.elastic(static_cast<std::size_t>(i), q);
      const int qx = static_cast<int>(std::lround(q.x)), qy = static_cast<int>(std::lround(q.y));
      ok = out.ribbons[static_cast<std::size_t>(i)].contains(qx, qy) && out.ribbons[static_cast<std::size_t>(i)].at(qx, qy);
      track.push_back(q);
    }
    if (!ok) continue;
    out.landmarks.push_back(std::move(track));
    ++k;
  }
  return out;
}

void write_stack(const SynthStack& stack, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json sections = nlohmann::json::array();
  for (std::size_t i = 0; i < stack.sections.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "section_%03zu.png", i);
    const auto path = dir / name;
    write_png(path, stack.sections[i].rgb);
    write_sidecar(path, stack.sections[i]);
    sections.push_back({{"file", name}, {"pairwise", stack.pairwise[i]}, {"truth", stack.truth[i]}});
  }
  const nlohmann::json meta{{"spec", to_json(stack.spec)}, {"sections", sections}};
  std::ofstream(dir / "stack.json") << meta.dump(2) << '\n';
  nlohmann::json lm = nlohmann::json::array();
  for (const auto& track : stack.landmarks) lm.push_back(track);
  std::ofstream out(dir / "landmarks.json");
  out << nlohmann::json{{"landmarks", lm}}.dump() << '\n';
  if (!out) throw std::runtime_error("write_stack: cannot write " + (dir / "landmarks.json").string());
}

}  // namespace vcore
