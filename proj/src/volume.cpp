#include "vcore/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "vcore/image_io.hpp"
#include "vcore/json_io.hpp"
#include "binary_io.hpp"

namespace vcore {

using detail::get_u32;
using detail::put_u32;

namespace {

int round_up(int v, int multiple) { return multiple <= 1 ? v : ((v + multiple - 1) / multiple) * multiple; }

std::string indexed(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.%s", stem, i, ext);
  return buf;
}

nlohmann::json field_to_json(const DisplacementField& f) {
  std::vector<double> flat;
  flat.reserve(f.controls().size() * 2);
  for (const Point2& c : f.controls()) {
    flat.push_back(c.x);
    flat.push_back(c.y);
  }
  return {{"width", f.width()}, {"height", f.height()}, {"spacing", f.spacing()}, {"controls", flat}};
}

DisplacementField field_from_json(const nlohmann::json& j) {
  DisplacementField f(j.at("width").get<int>(), j.at("height").get<int>(), j.at("spacing").get<double>());
  const auto flat = j.at("controls").get<std::vector<double>>();
  auto ctrl = f.controls();
  if (flat.size() != 2 * ctrl.size()) throw std::runtime_error("displacement field: control count mismatch");
  for (std::size_t k = 0; k < ctrl.size(); ++k) ctrl[k] = {flat[2 * k], flat[2 * k + 1]};
  return f;
}

}  // namespace

Canvas compute_canvas(std::span<const SectionImage> sections, std::span<const SimilarityTransform> rigid, int multiple) {
  if (sections.empty() || sections.size() != rigid.size()) {
    throw std::invalid_argument("compute_canvas: need one transform per section");
  }
  double x0 = std::numeric_limits<double>::infinity(), y0 = x0;
  double x1 = -x0, y1 = -x0;
  for (std::size_t i = 0; i < sections.size(); ++i) {
    const double w = sections[i].width() - 1, h = sections[i].height() - 1;
    for (const Point2 c : {Point2{0, 0}, Point2{w, 0}, Point2{0, h}, Point2{w, h}}) {
      const Point2 p = rigid[i].apply(c);
      x0 = std::min(x0, p.x);
      y0 = std::min(y0, p.y);
      x1 = std::max(x1, p.x);
      y1 = std::max(y1, p.y);
    }
  }
  Canvas canvas;
  // Snap near-integers so that exact integer geometry stays exact.
  auto snap_floor = [](double v) { return std::floor(v + 1e-9); };
  auto snap_ceil = [](double v) { return std::ceil(v - 1e-9); };
  canvas.origin_x = snap_floor(x0);
  canvas.origin_y = snap_floor(y0);
  canvas.width = round_up(static_cast<int>(snap_ceil(x1) - canvas.origin_x) + 1, multiple);
  canvas.height = round_up(static_cast<int>(snap_ceil(y1) - canvas.origin_y) + 1, multiple);
  return canvas;
}

VolumetricCore assemble_core(std::span<const SectionImage> raws, const RegistrationChain& chain,
                             const AssembleOptions& options) {
  if (raws.empty()) throw std::invalid_argument("assemble_core: no sections");
  if (raws.size() != chain.size() || chain.fields.size() != chain.size()) {
    throw std::invalid_argument("assemble_core: chain covers " + std::to_string(chain.size()) + " sections, got " +
                                std::to_string(raws.size()));
  }
  VolumetricCore core;
  core.chain = chain;
  core.mpp = raws.front().mpp;
  core.canvas = compute_canvas(raws, chain.rigid, options.canvas_multiple);
  for (std::size_t i = 0; i < raws.size(); ++i) {
    const DisplacementField* field = chain.fields[i] ? &*chain.fields[i] : nullptr;
    SectionImage warped = apply_warp(raws[i], chain.rigid[i], field, core.canvas);
    warped.section_index = static_cast<int>(i);
    core.tissue_masks.push_back(ribbon_mask(warped, options.tissue, options.close_radius, options.min_ribbon_fraction));
    core.sections.push_back(std::move(warped));
  }
  return core;
}

std::vector<std::int64_t> patch_tissue_counts(const VolumetricCore& core, int x, int y, int size) {
  std::vector<std::int64_t> counts;
  for (const BinaryMask& m : core.tissue_masks) {
    std::int64_t n = 0;
    for (int r = y; r < y + size; ++r)
      for (int c = x; c < x + size; ++c) n += m.at(c, r) ? 1 : 0;
    counts.push_back(n);
  }
  return counts;
}

std::vector<VolumetricPatch> extract_patches(const VolumetricCore& core, const PatchOptions& options) {
  if (options.size < 1) throw std::invalid_argument("extract_patches: size must be >= 1");
  std::vector<VolumetricPatch> out;
  const int depth = core.depth();
  if (depth == 0) return out;
  const double area = double(options.size) * options.size;
  for (int y = 0; y + options.size <= core.canvas.height; y += options.size) {
    for (int x = 0; x + options.size <= core.canvas.width; x += options.size) {
      const auto counts = patch_tissue_counts(core, x, y, options.size);
      std::int64_t total = 0, least = std::numeric_limits<std::int64_t>::max();
      for (std::int64_t c : counts) {
        total += c;
        least = std::min(least, c);
      }
      const double mean_fraction = double(total) / (area * depth);
      const double rule_fraction = options.rule == TissueRule::DepthMean ? mean_fraction : double(least) / area;
      if (!(rule_fraction > options.min_tissue)) continue;
      VolumetricPatch p;
      p.x = x;
      p.y = y;
      p.depth = depth;
      p.side = options.size;
      p.tissue_fraction = mean_fraction;
      p.voxels.reserve(static_cast<std::size_t>(depth) * options.size * options.size * 3);
      for (const SectionImage& s : core.sections) {
        for (int r = y; r < y + options.size; ++r) {
          for (int c = x; c < x + options.size; ++c) {
            const Rgb& px = s.rgb.at(c, r);
            p.voxels.insert(p.voxels.end(), {px.r, px.g, px.b});
          }
        }
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

nlohmann::json chain_to_json(const RegistrationChain& chain) {
  nlohmann::json sections = nlohmann::json::array();
  for (std::size_t i = 0; i < chain.size(); ++i) {
    nlohmann::json s{{"rigid", chain.rigid[i]}, {"nonrigid_cost", chain.nonrigid_cost[i]}};
    s["field"] = chain.fields[i] ? field_to_json(*chain.fields[i]) : nlohmann::json(nullptr);
    sections.push_back(std::move(s));
  }
  nlohmann::json pairs = nlohmann::json::array();
  for (const PairDiagnostics& d : chain.pairs) {
    nlohmann::json inliers = nlohmann::json::array();
    for (const PointPair& p : d.inliers) inliers.push_back({p.src.x, p.src.y, p.dst.x, p.dst.y});
    pairs.push_back({{"moving", d.moving},
                     {"fixed", d.moving - 1},
                     {"match_count", d.match_count},
                     {"inlier_count", d.inlier_count},
                     {"inlier_ratio", d.inlier_ratio},
                     {"residual_px", d.residual_px},
                     {"failed", d.failed},
                     {"failure", d.failure},
                     {"pairwise", d.pairwise},
                     {"inliers", inliers}});
  }
  return {{"reference_index", chain.reference_index}, {"sections", sections}, {"pairs", pairs}};
}

RegistrationChain chain_from_json(const nlohmann::json& j) {
  RegistrationChain chain;
  chain.reference_index = j.value("reference_index", std::size_t{0});
  for (const auto& s : j.at("sections")) {
    chain.rigid.push_back(s.at("rigid").get<SimilarityTransform>());
    chain.nonrigid_cost.push_back(s.value("nonrigid_cost", 0.0));
    if (s.contains("field") && !s["field"].is_null()) {
      chain.fields.emplace_back(field_from_json(s["field"]));
    } else {
      chain.fields.emplace_back();
    }
  }
  for (const auto& p : j.at("pairs")) {
    PairDiagnostics d;
    d.moving = p.at("moving").get<std::size_t>();
    d.match_count = p.value("match_count", std::size_t{0});
    d.inlier_count = p.value("inlier_count", std::size_t{0});
    d.inlier_ratio = p.value("inlier_ratio", 0.0);
    d.residual_px = p.value("residual_px", 0.0);
    d.failed = p.value("failed", false);
    d.failure = p.value("failure", std::string{});
    d.pairwise = p.at("pairwise").get<SimilarityTransform>();
    for (const auto& q : p.value("inliers", nlohmann::json::array())) {
      d.inliers.push_back({{q.at(0).get<double>(), q.at(1).get<double>()}, {q.at(2).get<double>(), q.at(3).get<double>()}});
    }
    chain.pairs.push_back(std::move(d));
  }
  return chain;
}

void write_core(const VolumetricCore& core, const std::filesystem::path& dir, const nlohmann::json& extra) {
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < core.sections.size(); ++i) {
    const std::string image = indexed("section", i, "png"), mask = indexed("mask", i, "png");
    write_png(dir / image, core.sections[i].rgb);
    write_mask_png(dir / mask, core.tissue_masks[i]);
    files.push_back({{"image", image}, {"mask", mask}});
  }
  nlohmann::json meta{{"D", core.depth()},
                      {"mpp", core.mpp},
                      {"level", core.sections.empty() ? 0 : core.sections.front().level},
                      {"canvas",
                       {{"width", core.canvas.width},
                        {"height", core.canvas.height},
                        {"origin_x", core.canvas.origin_x},
                        {"origin_y", core.canvas.origin_y}}},
                      {"z_spacing_um", nullptr},
                      {"sections", files},
                      {"chain", chain_to_json(core.chain)}};
  if (extra.is_object()) meta.update(extra);
  std::ofstream out(dir / "core.json");
  out << meta.dump(2) << '\n';
  if (!out) throw std::runtime_error("write_core: cannot write " + (dir / "core.json").string());
}

VolumetricCore read_core(const std::filesystem::path& dir) {
  std::ifstream in(dir / "core.json");
  if (!in) throw std::runtime_error("read_core: missing " + (dir / "core.json").string());
  const auto meta = nlohmann::json::parse(in);
  VolumetricCore core;
  core.mpp = meta.at("mpp").get<double>();
  const auto& cv = meta.at("canvas");
  core.canvas = {cv.at("width").get<int>(), cv.at("height").get<int>(), cv.value("origin_x", 0.0),
                 cv.value("origin_y", 0.0)};
  const int level = meta.value("level", 0);
  int index = 0;
  for (const auto& f : meta.at("sections")) {
    SectionImage s = read_section(dir / f.at("image").get<std::string>());
    s.mpp = core.mpp;
    s.level = level;
    s.section_index = index++;
    BinaryMask m = read_mask_png(dir / f.at("mask").get<std::string>());
    if (s.width() != core.canvas.width || s.height() != core.canvas.height || !m.same_shape(s.rgb)) {
      throw std::runtime_error("read_core: section " + std::to_string(index - 1) + " does not match the canvas");
    }
    core.sections.push_back(std::move(s));
    core.tissue_masks.push_back(std::move(m));
  }
  if (meta.contains("chain")) core.chain = chain_from_json(meta["chain"]);
  return core;
}

void write_patches(std::span<const VolumetricPatch> patches, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < patches.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "patch_%05zu.bin", i);
    const VolumetricPatch& p = patches[i];
    std::ofstream out(dir / name, std::ios::binary);
    put_u32(out, static_cast<std::uint32_t>(p.depth));
    put_u32(out, static_cast<std::uint32_t>(p.side));
    out.write(reinterpret_cast<const char*>(p.voxels.data()), static_cast<std::streamsize>(p.voxels.size()));
    if (!out) throw std::runtime_error("write_patches: cannot write " + (dir / name).string());
    index.push_back({{"file", name}, {"x", p.x}, {"y", p.y}, {"depth", p.depth}, {"side", p.side},
                     {"tissue_fraction", p.tissue_fraction}});
  }
  std::ofstream(dir / "patches.json") << nlohmann::json{{"patches", index}}.dump(2) << '\n';
}

VolumetricPatch read_patch_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_patch_blob: cannot open " + path.string());
  VolumetricPatch p;
  p.depth = static_cast<int>(get_u32(in));
  p.side = static_cast<int>(get_u32(in));
  p.voxels.resize(static_cast<std::size_t>(p.depth) * p.side * p.side * 3);
  in.read(reinterpret_cast<char*>(p.voxels.data()), static_cast<std::streamsize>(p.voxels.size()));
  if (!in) throw std::runtime_error("read_patch_blob: truncated " + path.string());
  return p;
}

}  // namespace vcore
