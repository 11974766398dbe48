#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcore/geometry.hpp"
#include "vcore/raster.hpp"

namespace vcore {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Synthetic serial-section stack parameters. Rotation and scale of each
/// neighbouring pair act about the frame centre; `translation` bounds the
/// extra shift on each axis.
struct SynthSpec {
  int sections = 8;
  int width = 512;
  int height = 512;
  Range rotation_deg{-15.0, 15.0};
  Range scale{0.95, 1.05};
  double translation = 50.0;
  double elastic_amplitude = 0.0;  ///< pixels
  double elastic_wavelength = 256.0;
  double noise_sigma = 2.0;        ///< 8-bit units
  double decorrelation = 0.08;     ///< weight of per-section texture
  int landmarks = 100;
  double mpp = 0.5;
  std::uint64_t seed = 1;
};

SynthSpec synth_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SynthSpec& spec);

struct SynthStack {
  SynthSpec spec;
  std::vector<SectionImage> sections;
  std::vector<SimilarityTransform> pairwise;  ///< [i] maps section i into section i-1; [0] = identity
  std::vector<SimilarityTransform> truth;     ///< section i -> reference (section 0)
  /// landmarks[k][i]: landmark k in section i pixels.
  std::vector<std::vector<Point2>> landmarks;
  std::vector<BinaryMask> ribbons;            ///< true ribbon mask per section
  /// Elastic field of section i at section pixel q (zero when amplitude is 0).
  Point2 elastic(std::size_t section, Point2 q) const;

  std::vector<double> phase_y;
  std::vector<double> phase_x;
};

/// Section i shows the specimen at truth[i](q + e_i(q)); e_i is a sinusoidal
/// field with per-section phases. Landmarks are tracked through these maps.
SynthStack generate_stack(const SynthSpec& spec);

/// Writes section_XXX.png with sidecars, stack.json (spec and truths) and
/// landmarks.json.
void write_stack(const SynthStack& stack, const std::filesystem::path& dir);

}  // namespace vcore
