// Command-line driver: synth, align, patch, tile, serve and eval.
//
// Exit codes: 0 success, 1 pipeline failure, 2 bad arguments.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vcore/metrics.hpp"
#include "vcore/pipeline.hpp"
#include "vcore/service.hpp"
#include "vcore/synth.hpp"
#include "vcore/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct BadArguments : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw BadArguments("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw BadArguments(path.string() + ": " + e.what());
  }
}

void emit(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream f(out);
  f << j.dump(2) << '\n';
  if (!f) throw std::runtime_error("cannot write " + out);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string spec;
  std::string out = "stack";
};

void run_synth(const SynthArgs& a) {
  vcore::SynthSpec spec;
  try {
    spec = vcore::synth_spec_from_json(read_json(a.spec));
  } catch (const std::invalid_argument& e) {
    throw BadArguments(e.what());
  }
  const vcore::SynthStack stack = vcore::generate_stack(spec);
  vcore::write_stack(stack, a.out);
  std::cerr << "wrote " << stack.sections.size() << " sections to " << a.out << '\n';
}

struct AlignArgs {
  std::string stack;
  std::string out;
  bool rigid_only = false;
  std::string matcher = "sinkhorn";
  int thumbnail = 16;
  double grid_spacing = 48.0;
  double lambda = 0.01;
};

void run_align(const AlignArgs& a) {
  vcore::AlignOptions o;
  o.nonrigid = !a.rigid_only;
  o.chain.matcher = a.matcher == "ratio" ? vcore::MatcherKind::RatioTest : vcore::MatcherKind::Sinkhorn;
  o.thumbnail_factor = a.thumbnail;
  o.nonrigid_options.grid_spacing = a.grid_spacing;
  o.nonrigid_options.lambda_bend = a.lambda;
  const auto sections = vcore::load_stack_dir(a.stack);
  if (sections.empty()) throw std::runtime_error("no section images in " + a.stack);
  const vcore::AlignResult r = vcore::align_stack(sections, o);
  vcore::write_core(r.core, a.out);
  std::ofstream(fs::path(a.out) / "report.json") << r.report.dump(2) << '\n';
  // Keep synthetic ground truth next to the core so eval can find it.
  if (fs::exists(fs::path(a.stack) / "landmarks.json"))
    fs::copy_file(fs::path(a.stack) / "landmarks.json", fs::path(a.out) / "landmarks.json",
                  fs::copy_options::overwrite_existing);
  int failed = 0;
  for (const auto& p : r.report["pairs"]) failed += p.value("failed", false) ? 1 : 0;
  std::cerr << "aligned " << sections.size() << " sections, " << failed << " failed pairs -> " << a.out << '\n';
}

struct PatchArgs {
  std::string core;
  std::string out;
  int size = 256;
  double min_tissue = 0.6;
};

void run_patch(const PatchArgs& a) {
  if (a.size < 1 || a.min_tissue < 0 || a.min_tissue > 1) throw BadArguments("size >= 1 and min-tissue in [0, 1]");
  const vcore::VolumetricCore core = vcore::read_core(a.core);
  const auto patches = vcore::extract_patches(core, {a.size, a.min_tissue});
  const fs::path out = a.out.empty() ? fs::path(a.core) / "patches" : fs::path(a.out);
  vcore::write_patches(patches, out);
  if (patches.empty()) std::cerr << "warning: no patch passed the tissue threshold\n";
  std::cerr << patches.size() << " patches -> " << out.string() << '\n';
}

struct TileArgs {
  std::string core;
  vcore::PyramidOptions pyramid;
};

void run_tile(const TileArgs& a) {
  if (a.pyramid.tile_size < 1 || a.pyramid.overlap < 0 || a.pyramid.quality < 1 || a.pyramid.quality > 100)
    throw BadArguments("tile-size >= 1, overlap >= 0, quality in 1..100");
  const vcore::CoreManifest m = vcore::tile_core(a.core, a.pyramid);
  std::cerr << "tiled " << m.depth << " sections of " << m.core_id << '\n';
}

struct ServeArgs {
  std::string root;
  int port = -1;
  std::string host = "0.0.0.0";
};

vcore::TileService* g_service = nullptr;

void run_serve(const ServeArgs& a) {
  const fs::path root = a.root.empty() ? vcore::env_root() : fs::path(a.root);
  if (!fs::is_directory(root)) throw BadArguments("not a directory: " + root.string());
  int port = a.port;
  if (port < 0) {
    try {
      port = vcore::env_port();
    } catch (const std::invalid_argument& e) {
      throw BadArguments(e.what());
    }
  }
  vcore::TileService service({root, {}});
  const int bound = service.bind(a.host, port);
  g_service = &service;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  std::cerr << "serving " << root.string() << " on " << a.host << ':' << bound << '\n';
  service.run();
  g_service = nullptr;
}

struct EvalArgs {
  std::string core;
  std::string stack;
  std::string predictions;
  std::string out;
};

json eval_core(const EvalArgs& a) {
  const vcore::VolumetricCore core = vcore::read_core(a.core);
  json j;
  auto both = [&](const std::vector<vcore::MatchedPositions>& with, const std::vector<vcore::MatchedPositions>& without) {
    json r;
    try {
      r["nonrigid"] = vcore::registration_error(with, core.mpp);
      r["rigid_only"] = vcore::registration_error(without, core.mpp);
      const double n = r["nonrigid"]["core_error_um"], g = r["rigid_only"]["core_error_um"];
      r["reduction"] = g > 0 ? 1.0 - n / g : 0.0;
    } catch (const vcore::NoMatches& e) {
      r["error"] = e.what();
    }
    return r;
  };
  j["matches"] = both(vcore::canvas_match_pairs(core, true), vcore::canvas_match_pairs(core, false));

  fs::path landmarks = a.stack.empty() ? fs::path(a.core) / "landmarks.json" : fs::path(a.stack) / "landmarks.json";
  if (fs::exists(landmarks)) {
    const auto lm = vcore::read_landmarks(landmarks);
    json l = both(vcore::landmark_canvas_pairs(core, lm, true), vcore::landmark_canvas_pairs(core, lm, false));
    // Landmark errors in canvas pixels as well.
    for (const char* key : {"nonrigid", "rigid_only"})
      if (l.contains(key)) l[key]["core_error_px"] = l[key]["core_error_um"].get<double>() / core.mpp;
    j["landmarks"] = l;
  } else if (!a.stack.empty()) {
    throw BadArguments("no landmarks.json in " + a.stack);
  }
  return j;
}

std::vector<bool> correct(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels) {
  std::vector<bool> out;
  for (std::size_t k = 0; k < scores.size(); ++k)
    out.push_back(std::max_element(scores[k].begin(), scores[k].end()) - scores[k].begin() == labels[k]);
  return out;
}

json eval_predictions(const EvalArgs& a) {
  const json in = read_json(a.predictions);
  json j;
  try {
    const auto scores = in.at("scores").get<std::vector<std::vector<double>>>();
    const auto labels = in.at("labels").get<std::vector<int>>();
    const vcore::ClassificationReport r = vcore::classification_report(scores, labels);
    j["classification"] = r;
    j["confusion_csv"] = r.confusion.to_csv();
    if (in.contains("compare_scores")) {
      const auto other = in["compare_scores"].get<std::vector<std::vector<double>>>();
      if (other.size() != scores.size()) throw std::invalid_argument("compare_scores length mismatch");
      const std::vector<bool> x = correct(scores, labels), y = correct(other, labels);
      std::int64_t b = 0, c = 0;
      for (std::size_t k = 0; k < x.size(); ++k) {
        b += x[k] && !y[k];
        c += !x[k] && y[k];
      }
      j["mcnemar"] = vcore::mcnemar(b, c);
    }
    if (in.contains("ratings")) {
      const auto& r2 = in["ratings"];
      j["quadratic_kappa"] = vcore::quadratic_kappa(r2.at("a").get<std::vector<int>>(),
                                                    r2.at("b").get<std::vector<int>>(), r2.at("categories").get<int>());
    }
  } catch (const json::exception& e) {
    throw BadArguments(a.predictions + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw BadArguments(a.predictions + ": " + e.what());
  }
  return j;
}

void run_eval(const EvalArgs& a) {
  if (a.core.empty() == a.predictions.empty()) throw BadArguments("eval needs either <core_dir> or --predictions");
  emit(a.core.empty() ? eval_predictions(a) : eval_core(a), a.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric core toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic serial-section stack");
  s->add_option("spec", synth.spec, "SynthSpec JSON")->required()->check(CLI::ExistingFile);
  s->add_option("-o,--out", synth.out, "Output directory");

  AlignArgs align;
  auto* al = app.add_subcommand("align", "Register a stack and assemble the core");
  al->add_option("stack_dir", align.stack)->required()->check(CLI::ExistingDirectory);
  al->add_option("-o,--out", align.out, "Core directory")->required();
  al->add_flag("--rigid-only", align.rigid_only, "Skip non-rigid refinement");
  al->add_option("--matcher", align.matcher)->check(CLI::IsMember({"sinkhorn", "ratio"}));
  al->add_option("--thumbnail", align.thumbnail, "Requested thumbnail factor")->check(CLI::PositiveNumber);
  al->add_option("--grid-spacing", align.grid_spacing)->check(CLI::PositiveNumber);
  al->add_option("--lambda", align.lambda)->check(CLI::NonNegativeNumber);

  PatchArgs patch;
  auto* pa = app.add_subcommand("patch", "Extract volumetric patches");
  pa->add_option("core_dir", patch.core)->required()->check(CLI::ExistingDirectory);
  pa->add_option("-o,--out", patch.out, "Patch directory (default <core_dir>/patches)");
  pa->add_option("--size", patch.size);
  pa->add_option("--min-tissue", patch.min_tissue);

  TileArgs tile;
  auto* ti = app.add_subcommand("tile", "Build deep-zoom pyramids and the manifest");
  ti->add_option("core_dir", tile.core)->required()->check(CLI::ExistingDirectory);
  ti->add_option("--tile-size", tile.pyramid.tile_size);
  ti->add_option("--overlap", tile.pyramid.overlap);
  ti->add_option("--quality", tile.pyramid.quality);

  ServeArgs serve;
  auto* se = app.add_subcommand("serve", "Serve tiles and grade records");
  se->add_option("root", serve.root, "Core archive (default $VOLCORE_ROOT)");
  se->add_option("--port", serve.port, "Port (default $VOLCORE_PORT or 8080)")->check(CLI::Range(0, 65535));
  se->add_option("--host", serve.host);

  EvalArgs eval;
  auto* ev = app.add_subcommand("eval", "Emit metrics JSON");
  ev->add_option("core_dir", eval.core)->check(CLI::ExistingDirectory);
  ev->add_option("--stack", eval.stack, "Synthetic stack with landmarks.json")->check(CLI::ExistingDirectory);
  ev->add_option("--predictions", eval.predictions, "scores/labels JSON")->check(CLI::ExistingFile);
  ev->add_option("-o,--out", eval.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*s) run_synth(synth);
    if (*al) run_align(align);
    if (*pa) run_patch(patch);
    if (*ti) run_tile(tile);
    if (*se) run_serve(serve);
    if (*ev) run_eval(eval);
  } catch (const BadArguments& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
