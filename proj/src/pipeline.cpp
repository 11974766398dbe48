#include "vcore/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "vcore/image_io.hpp"
#include "vcore/json_io.hpp"

namespace vcore {

std::vector<SectionImage> load_stack_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".tif" || ext == ".tiff") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<SectionImage> out;
  for (std::size_t i = 0; i < files.size(); ++i) {
    SectionImage s = read_section(files[i]);
    s.section_index = static_cast<int>(i);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw std::runtime_error("no section images in " + dir.string());
  return out;
}

int effective_thumbnail_factor(std::span<const SectionImage> sections, int requested, int min_side) {
  int factor = std::max(1, requested);
  int smallest = std::numeric_limits<int>::max();
  for (const SectionImage& s : sections) smallest = std::min({smallest, s.width(), s.height()});
  while (factor > 1 && (smallest + factor - 1) / factor < min_side) factor /= 2;
  return factor;
}

Point2 section_to_canvas(const VolumetricCore& core, std::size_t section, Point2 p, bool with_field) {
  const auto& field = core.chain.fields.at(section);
  return map_to_canvas(p, core.chain.rigid.at(section), with_field && field ? &*field : nullptr, core.canvas);
}

std::vector<std::vector<std::pair<Point2, Point2>>> canvas_match_pairs(const VolumetricCore& core, bool with_fields) {
  std::vector<std::vector<std::pair<Point2, Point2>>> out;
  for (const PairDiagnostics& d : core.chain.pairs) {
    std::vector<std::pair<Point2, Point2>> pairs;
    for (const PointPair& p : d.inliers) {
      pairs.emplace_back(section_to_canvas(core, d.moving, p.src, with_fields),
                         section_to_canvas(core, d.moving - 1, p.dst, with_fields));
    }
    out.push_back(std::move(pairs));
  }
  return out;
}

std::vector<std::vector<std::pair<Point2, Point2>>> landmark_canvas_pairs(
    const VolumetricCore& core, const std::vector<std::vector<Point2>>& landmarks, bool with_fields) {
  std::vector<std::vector<std::pair<Point2, Point2>>> out(core.chain.size() > 0 ? core.chain.size() - 1 : 0);
  for (const auto& track : landmarks) {
    if (track.size() != core.chain.size()) throw std::invalid_argument("landmark track length != section count");
    for (std::size_t i = 1; i < track.size(); ++i)
      out[i - 1].emplace_back(section_to_canvas(core, i, track[i], with_fields),
                              section_to_canvas(core, i - 1, track[i - 1], with_fields));
  }
  return out;
}

std::vector<std::vector<Point2>> read_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return nlohmann::json::parse(in).at("landmarks").get<std::vector<std::vector<Point2>>>();
}

AlignResult align_stack(std::span<const SectionImage> sections, const AlignOptions& options) {
  if (sections.empty()) throw std::invalid_argument("align_stack: empty stack");
  for (const SectionImage& s : sections) s.validate();

  AlignResult result;
  const int factor = effective_thumbnail_factor(sections, options.thumbnail_factor, options.min_thumbnail_side);
  result.thumbnail_factor = factor;

  std::vector<SectionImage> thumbs;
  thumbs.reserve(sections.size());
  for (const SectionImage& s : sections) thumbs.push_back(factor > 1 ? downsample(s, factor) : s);

  std::vector<SectionFeatures> features;
  for (const SectionImage& t : thumbs) features.push_back(extract_section_features(t, options.chain));
  std::vector<std::vector<PointPair>> correspondences;
  std::vector<std::size_t> ratio_counts;
  for (std::size_t i = 1; i < thumbs.size(); ++i) {
    correspondences.push_back(correspond(features[i], features[i - 1], options.chain));
    if (options.compare_matchers) {
      ChainOptions alt = options.chain;
      alt.matcher = options.chain.matcher == MatcherKind::Sinkhorn ? MatcherKind::RatioTest : MatcherKind::Sinkhorn;
      ratio_counts.push_back(correspond(features[i], features[i - 1], alt).size());
    }
  }
  RegistrationChain chain = chain_from_correspondences(correspondences, options.chain, thumbs.front().level);

  // Thumbnail -> full resolution.
  const int level = sections.front().level;
  for (SimilarityTransform& t : chain.rigid) t = propagate_to_level(t, factor, level);
  for (PairDiagnostics& d : chain.pairs) {
    d.pairwise = propagate_to_level(d.pairwise, factor, level);
    d.residual_px *= factor;
    for (PointPair& p : d.inliers) {
      p.src = double(factor) * p.src;
      p.dst = double(factor) * p.dst;
    }
  }

  const Canvas canvas = compute_canvas(sections, chain.rigid, options.assemble.canvas_multiple);
  auto mask_of = [&](const SectionImage& warped) {
    return ribbon_mask(warped, options.assemble.tissue, options.assemble.close_radius,
                       options.assemble.min_ribbon_fraction);
  };

  nlohmann::json nonrigid_report = nlohmann::json::array();
  if (options.nonrigid && sections.size() > 1) {
    BinaryMask previous = mask_of(apply_warp(sections[0], chain.rigid[0], nullptr, canvas));
    for (std::size_t i = 1; i < sections.size(); ++i) {
      const BinaryMask moving = mask_of(apply_warp(sections[i], chain.rigid[i], nullptr, canvas));
      nlohmann::json entry{{"section", i}};
      const PairDiagnostics& diag = chain.pairs[i - 1];
      if (diag.failed) {
        entry["skipped"] = "rigid pair failed";
      } else if (count_set(previous) == 0 || count_set(moving) == 0) {
        entry["skipped"] = "empty ribbon mask";
      } else {
        // Seed with the predecessor's field: the finished section i-1 already
        // carries it, so only the pairwise difference is left to find.
        const DisplacementField* seed = chain.fields[i - 1] ? &*chain.fields[i - 1] : nullptr;
        const NonrigidResult r = nonrigid_refine(previous, moving, options.nonrigid_options, seed);
        const BoundaryObjective probe(previous, moving, options.nonrigid_options.grid_spacing, 0.0);
        entry["initial_cost"] = r.initial_cost;
        entry["final_cost"] = r.final_cost;
        entry["iterations"] = r.iterations;
        entry["diverged"] = r.diverged;
        entry["rigid_boundary_residual_px"] = probe.mean_abs_residual(DisplacementField(canvas.width, canvas.height,
                                                                                        options.nonrigid_options.grid_spacing));
        entry["final_boundary_residual_px"] = probe.mean_abs_residual(r.field);
        chain.nonrigid_cost[i] = r.final_cost;
        chain.fields[i] = r.field;
      }
      nonrigid_report.push_back(entry);
      const DisplacementField* f = chain.fields[i] ? &*chain.fields[i] : nullptr;
      previous = f ? mask_of(apply_warp(sections[i], chain.rigid[i], f, canvas)) : moving;
    }
  }

  result.core = assemble_core(sections, chain, options.assemble);

  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t k = 0; k < chain.pairs.size(); ++k) {
    const PairDiagnostics& d = chain.pairs[k];
    nlohmann::json p{{"moving", d.moving},
                     {"fixed", d.moving - 1},
                     {"match_count", d.match_count},
                     {"inlier_count", d.inlier_count},
                     {"inlier_ratio", d.inlier_ratio},
                     {"residual_px", d.residual_px},
                     {"failed", d.failed},
                     {"failure", d.failure},
                     {"rigid", d.pairwise}};
    if (k < ratio_counts.size()) p["alternate_matcher_count"] = ratio_counts[k];
    pairs.push_back(std::move(p));
  }
  result.report = {{"sections", sections.size()},
                   {"thumbnail_factor", factor},
                   {"matcher", options.chain.matcher == MatcherKind::Sinkhorn ? "sinkhorn" : "ratio"},
                   {"canvas", {{"width", canvas.width}, {"height", canvas.height},
                               {"origin_x", canvas.origin_x}, {"origin_y", canvas.origin_y}}},
                   {"pairs", pairs},
                   {"nonrigid", nonrigid_report}};
  return result;
}

}  // namespace vcore
