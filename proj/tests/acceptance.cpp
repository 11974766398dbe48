// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <thread>

#include "attention_oracles.hpp"
#include "core_fixture.hpp"
#include "metrics_oracles.hpp"
#include "oracles.hpp"
#include "volume_oracles.hpp"
#include "vcore/attention.hpp"
#include "vcore/image_io.hpp"
#include "vcore/matching.hpp"
#include "vcore/metrics.hpp"
#include "vcore/pipeline.hpp"
#include "vcore/register.hpp"
#include "vcore/service.hpp"
#include "vcore/synth.hpp"

// After Eigen: <resolv.h> defines a macro that collides with Eigen parameter names.
#include <httplib.h>

using namespace vcore;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

VolumetricPatch random_patch(int depth, int side, std::mt19937_64& rng) {
  VolumetricPatch p;
  p.depth = depth;
  p.side = side;
  p.voxels.resize(static_cast<std::size_t>(depth) * side * side * 3);
  std::uniform_int_distribution<int> u(0, 255);
  for (auto& v : p.voxels) v = static_cast<std::uint8_t>(u(rng));
  return p;
}

double max_row_error(const Mat& w) {
  double worst = 0;
  for (Eigen::Index r = 0; r < w.rows(); ++r) worst = std::max(worst, std::abs(w.row(r).sum() - 1.0));
  return worst;
}

// ---------------------------------------------------------------------------

// 20 default stacks; a fifth of each pair's correspondences are replaced by
// uniform outliers before the chain is estimated.
Outcome rigid_registration() {
  double worst_err = 0, worst_time = 0;
  int failed_pairs = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SynthSpec spec;
    spec.seed = seed;
    const SynthStack st = generate_stack(spec);
    const auto t0 = Clock::now();
    ChainOptions opt;
    std::vector<SectionFeatures> f;
    for (const auto& s : st.sections) f.push_back(extract_section_features(s, opt));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(0, spec.width), uy(0, spec.height);
    std::vector<std::vector<PointPair>> pairs;
    for (std::size_t i = 1; i < f.size(); ++i) {
      std::vector<PointPair> p = correspond(f[i], f[i - 1], opt);
      const std::size_t outliers = (p.size() + 2) / 4;  // 20% of the final list
      for (std::size_t k = 0; k < outliers; ++k) p.push_back({{ux(rng), uy(rng)}, {ux(rng), uy(rng)}});
      std::shuffle(p.begin(), p.end(), rng);
      pairs.push_back(std::move(p));
    }
    const RegistrationChain chain = chain_from_correspondences(pairs, opt);
    worst_time = std::max(worst_time, seconds_since(t0));
    for (const auto& d : chain.pairs) failed_pairs += d.failed;
    double err = 0;
    int n = 0;
    for (const auto& track : st.landmarks)
      for (std::size_t i = 1; i < track.size(); ++i, ++n)
        err += distance(chain.rigid[i].apply(track[i]), track[0]);
    worst_err = std::max(worst_err, err / n);
  }
  return {worst_err < 2.0 && worst_time < 60.0,
          fmt("20 stacks, worst mean landmark error %.3f px, slowest %.2f s, failed pairs %d", worst_err, worst_time,
              failed_pairs)};
}

double landmark_core_error(const VolumetricCore& core, const SynthStack& st, bool with_fields) {
  return registration_error(landmark_canvas_pairs(core, st.landmarks, with_fields), 1.0).core_error;
}

Outcome elastic_improvement() {
  int passed = 0;
  double least = 1.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SynthSpec spec;
    spec.seed = seed;
    spec.elastic_amplitude = 6;
    const SynthStack st = generate_stack(spec);
    const AlignResult r = align_stack(st.sections);
    const double rigid = landmark_core_error(r.core, st, false);
    const double full = landmark_core_error(r.core, st, true);
    const double reduction = 1.0 - full / rigid;
    least = std::min(least, reduction);
    passed += reduction >= 0.4;
  }
  return {passed >= 18, fmt("%d/20 seeds with >= 40%% reduction (smallest %.1f%%)", passed, 100 * least)};
}

Outcome sinkhorn_reference() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> m_dist(1, 16), n_dist(1, 24);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  double worst_marginal = 0, worst_ref = 0;
  int unconverged = 0;
  for (int trial = 0; trial < 100; ++trial) {
    CostMatrix c;
    c.scores = Matrix(m_dist(rng), n_dist(rng));
    for (double& v : c.scores.values) v = u(rng);
    c.dustbin_score = u(rng);
    const TransportPlan p = sinkhorn_assign(c, 1000, 1e-9);
    unconverged += !p.converged;
    worst_marginal = std::max(worst_marginal, oracle::marginal_violation(p.plan));
    const Matrix ref = oracle::sinkhorn_linear(c, p.iterations);
    for (std::size_t k = 0; k < ref.values.size(); ++k)
      worst_ref = std::max(worst_ref, std::abs(ref.values[k] - p.plan.values[k]));
  }
  return {unconverged == 0 && worst_marginal < 1e-6 && worst_ref < 1e-6,
          fmt("100 matrices up to 16x24, marginal violation %.2e, reference gap %.2e, unconverged %d",
              worst_marginal, worst_ref, unconverged)};
}

Outcome divided_attention() {
  std::mt19937_64 rng(77);
  double worst = 0, worst_row = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int N = 1 + int(rng() % 6), F = 1 + int(rng() % 5), heads = 1 + int(rng() % 4), dh = 1 + int(rng() % 6);
    const bool class_key = trial % 2 == 0;
    HeadProjections h;
    for (int a = 0; a < heads; ++a) {
      h.q.push_back(random_mat(N * F + 1, dh, rng));
      h.k.push_back(random_mat(N * F + 1, dh, rng));
      h.v.push_back(random_mat(N * F + 1, dh, rng));
    }
    for (bool time : {true, false}) {
      const SublayerOutput o = time ? time_attention(h, N, F, {class_key}) : space_attention(h, N, F, {class_key});
      const auto ref = oracle::dense_masked_attention(h, oracle::divided_mask(N, F, time, class_key));
      worst = std::max({worst, oracle::max_abs_diff(ref.out, o.heads_out), oracle::max_abs_diff(ref.weights, o.weights)});
      worst_row = std::max(worst_row, max_row_error(o.weights));
      for (int a = 0; a < heads; ++a) {
        // Each head's softmax rows, recovered from the dense oracle per head.
        HeadProjections one{{h.q[a]}, {h.k[a]}, {h.v[a]}};
        const SublayerOutput oh = time ? time_attention(one, N, F, {class_key}) : space_attention(one, N, F, {class_key});
        worst_row = std::max(worst_row, max_row_error(oh.weights));
      }
    }
  }
  return {worst <= 1e-10 && worst_row <= 1e-6,
          fmt("50 configs, max deviation from dense oracle %.2e, max row-sum error %.2e", worst, worst_row)};
}

Outcome rollout_paths() {
  std::mt19937_64 rng(5);
  double worst = 0, worst_prob = 0;
  bool nonnegative = true;
  for (int trial = 0; trial < 20; ++trial) {
    const int depth = 1 + trial % 4, patch = 4, side = 4 * (1 + trial % 3);
    const EncoderConfig cfg{.side = side, .depth = depth, .patch = patch, .dim = 8, .heads = 2, .layers = 1};
    const VideoEncoder enc = random_encoder(cfg, 100 + trial);
    const AttentionConfig ac{trial % 2 == 0};
    const EncoderOutput out = encode_patch(random_patch(depth, side, rng), enc, ac);
    const BlockRecord& layer = out.attention.layers[0];
    worst = std::max(worst, oracle::max_abs_diff(oracle::two_hop(layer, out.attention.N, out.attention.F, ac.class_key),
                                                 combine_space_time(layer)));
    const Rollout r = rollout(out.attention);
    nonnegative = nonnegative && r.class_relevance.minCoeff() >= 0.0;
    worst_prob = std::max(worst_prob, std::abs(r.class_relevance.sum() - 1.0));
  }
  return {worst <= 1e-12 && nonnegative && worst_prob < 1e-9,
          fmt("20 one-layer configs, max two-hop gap %.2e, class relevance sum error %.2e", worst, worst_prob)};
}

Outcome abmil_gradients() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const int fd = 3 + int(seed % 5), hidden = 2 + int(seed % 4), classes = 2 + int(seed % 3), K = 1 + int(seed % 9);
    AbmilModel m = make_abmil(fd, hidden, classes, seed);
    m.b1 = random_mat(hidden, 1, rng, 0.3).col(0);
    m.bc = random_mat(classes, 1, rng, 0.3).col(0);
    const Mat bag = random_mat(K, fd, rng);
    const int label = int(seed % classes);
    const AbmilGradients g = abmil_backward(bag, label, m);
    auto loss = [&] { return abmil_loss(bag, label, m); };
    worst = std::max({worst, oracle::relative_error(g.W1, oracle::central_difference(m.W1, loss)),
                      oracle::relative_error(g.b1, oracle::central_difference(m.b1, loss)),
                      oracle::relative_error(g.w2, oracle::central_difference(m.w2, loss)),
                      oracle::relative_error(g.Wc, oracle::central_difference(m.Wc, loss)),
                      oracle::relative_error(g.bc, oracle::central_difference(m.bc, loss))});
  }
  return {worst < 1e-4, fmt("100 seeds, all parameters, max relative error %.2e", worst)};
}

struct ToyBag {
  Mat x;
  int label = 0;
  std::vector<int> signal;
};

// 32 instances of N(0, I_16); a positive bag has 1 to 3 of them shifted by 5u.
ToyBag toy_bag(std::mt19937_64& rng, const Vec& u, bool positive) {
  std::normal_distribution<double> g;
  ToyBag b;
  b.x.resize(32, 16);
  for (Eigen::Index i = 0; i < b.x.size(); ++i) b.x.data()[i] = g(rng);
  b.label = positive;
  if (positive) {
    const int k = 1 + int(rng() % 3);
    while (int(b.signal.size()) < k) {
      const int idx = int(rng() % 32);
      if (std::find(b.signal.begin(), b.signal.end(), idx) != b.signal.end()) continue;
      b.signal.push_back(idx);
      b.x.row(idx) += 5.0 * u.transpose();
    }
  }
  return b;
}

Outcome abmil_toy_task() {
  std::mt19937_64 rng(0);
  std::normal_distribution<double> g;
  Vec u(16);
  for (int i = 0; i < 16; ++i) u[i] = g(rng);
  u.normalize();
  AbmilModel m = make_abmil(16, 32, 2, 0);
  AbmilTrainer trainer(m, {.lr = 3e-3});
  for (int s = 0; s < 2000; ++s) {
    std::vector<Mat> bags;
    std::vector<int> labels;
    for (int k = 0; k < 8; ++k) {
      ToyBag b = toy_bag(rng, u, (s * 8 + k) % 2);
      bags.push_back(std::move(b.x));
      labels.push_back(b.label);
    }
    trainer.step(bags, labels);
  }
  std::mt19937_64 held(999);
  int correct = 0, positives = 0;
  double ratio = 0;
  for (int t = 0; t < 1000; ++t) {
    const ToyBag b = toy_bag(held, u, t % 2);
    const AbmilOutput o = abmil_forward(b.x, m);
    correct += int(o.logits(1) > o.logits(0)) == b.label;
    if (b.label) {
      double mass = 0;
      for (int i : b.signal) mass += o.attention(i);
      ratio += mass / (double(b.signal.size()) / 32.0);
      ++positives;
    }
  }
  const double accuracy = correct / 1000.0;
  ratio /= positives;
  return {accuracy >= 0.95 && ratio > 2.0,
          fmt("held-out accuracy %.1f%% after %d steps, signal attention %.1fx uniform", 100 * accuracy,
              trainer.steps(), ratio)};
}

Outcome patch_extraction() {
  int mismatches = 0, boundary_ok = 0;
  std::size_t retained = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const int depth = 5;  // makes 60% of 256^2 * D a whole pixel count
    const VolumetricCore core = oracle::random_mask_core(3, 2, depth, 256, seed, {0, 0}, {1, 0});
    const auto ref = oracle::retained_cells(core, 256, 6, 10);
    const auto got = extract_patches(core);
    retained += got.size();
    if (got.size() != ref.size()) {
      ++mismatches;
      continue;
    }
    for (std::size_t k = 0; k < got.size(); ++k)
      if (got[k].x != ref[k].x || got[k].y != ref[k].y ||
          got[k].tissue_fraction != double(ref[k].tissue) / (256.0 * 256.0 * depth))
        ++mismatches;
    const auto has = [&](int x, int y) {
      return std::any_of(got.begin(), got.end(), [&](const VolumetricPatch& p) { return p.x == x && p.y == y; });
    };
    boundary_ok += !has(0, 0) && has(256, 0);
  }
  return {mismatches == 0 && boundary_ok == 10,
          fmt("10 cores, %zu patches, %d oracle mismatches, exactly-60%% cell dropped and +1 px kept in %d/10",
              retained, mismatches, boundary_ok)};
}

Outcome metrics_exact() {
  std::mt19937_64 rng(31);
  int bad = 0, tables = 0;
  auto mark = [&](bool ok) { bad += !ok; };
  for (int trial = 0; trial < 100; ++trial, ++tables) {
    const std::size_t n = 2 + rng() % 199;
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    const std::unique_ptr<bool[]> flags(new bool[n]);
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = flags[i] = rng() % 3 == 0;
      s[i] = double(rng() % 9) / 8.0;
    }
    const double a = roc_auc(s, std::span<const bool>(flags.get(), n)), ref = oracle::auc_pairs(s, pos);
    mark(std::isnan(ref) ? std::isnan(a) : a == ref && oracle::auc_thresholds(s, pos) == ref);

    const int C = 2 + int(rng() % 4);
    std::vector<int> ra(n), rb(n);
    for (std::size_t i = 0; i < n; ++i) {
      ra[i] = int(rng() % C);
      rb[i] = rng() % 2 ? ra[i] : int(rng() % C);
    }
    mark(quadratic_kappa(ra, rb, C) == oracle::kappa_pairs(ra, rb));
    mark(quadratic_kappa(ra, ra, C) == 1.0);

    std::vector<std::vector<double>> scores(n, std::vector<double>(C));
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      double t = 0;
      for (double& v : scores[i]) t += v = 1.0 + double(rng() % 4);
      for (double& v : scores[i]) v /= t;
      labels[i] = int(rng() % C);
    }
    const ClassificationReport r = classification_report(scores, labels);
    const oracle::ClassCounts cc = oracle::class_counts(scores, labels);
    mark(r.confusion.counts == cc.confusion && r.accuracy == cc.accuracy && r.precision == cc.precision &&
         r.recall == cc.recall && r.f1 == cc.f1);
  }
  for (int b = 0; b < 25; ++b)
    for (int c = 0; b + c < 25; ++c) mark(mcnemar(b, c).p_value == oracle::binomial_two_sided(b, c));
  mark(mcnemar(0, 0).p_value == 1.0);
  const std::unique_ptr<bool[]> sep(new bool[6]{true, true, true, false, false, false});
  const std::vector<double> sep_scores{0.9, 0.8, 0.7, 0.3, 0.2, 0.1};
  mark(roc_auc(sep_scores, std::span<const bool>(sep.get(), 6)) == 1.0);
  return {bad == 0, fmt("%d random tables (<= 200 samples) plus McNemar b+c < 25, %d mismatches", tables, bad)};
}

Outcome tile_pyramids() {
  const fs::path root = testsupport::temp_dir("accept");
  const VolumetricCore core = testsupport::synthetic_core(600, 400, 3, 12);
  write_core(core, root / "core-a");
  tile_core(root / "core-a");

  TileService service({root, {}});
  const int port = service.bind("127.0.0.1", 0);
  std::thread server([&] { service.run(); });
  while (!service.running()) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  httplib::Client cli("127.0.0.1", port);

  int fetched = 0, failures = 0;
  double worst_diff = 0;
  for (int z = 0; z < core.depth(); ++z) {
    const std::string base = "/cores/core-a/z/" + std::to_string(z);
    const auto d = cli.Get(base + "/image.dzi");
    if (!d || d->status != 200) {
      ++failures;
      continue;
    }
    const TilePyramid p = parse_dzi(d->body);
    for (int l = 0; l <= p.max_level(); ++l)
      for (int r = 0; r < p.rows(l); ++r)
        for (int c = 0; c < p.columns(l); ++c) {
          const auto t = cli.Get(base + "/files/" + std::to_string(l) + "/" + std::to_string(c) + "_" +
                                 std::to_string(r) + ".jpg");
          ++fetched;
          if (!t || t->status != 200) {
            ++failures;
            continue;
          }
          if (l != p.max_level() || c != 0 || r != 0) continue;
          const Raster<Rgb> tile = decode_image(
              std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(t->body.data()), t->body.size()));
          double sum = 0;
          for (int y = 0; y < tile.height(); ++y)
            for (int x = 0; x < tile.width(); ++x) {
              const Rgb a = tile.at(x, y), b = core.sections[z].rgb.at(x, y);
              sum += std::abs(a.r - b.r) + std::abs(a.g - b.g) + std::abs(a.b - b.b);
            }
          worst_diff = std::max(worst_diff, sum / (3.0 * tile.width() * tile.height()));
        }
  }
  service.stop();
  server.join();
  fs::remove_all(root);
  return {failures == 0 && worst_diff < 3.0,
          fmt("%d tiles crawled, %d non-200, full-resolution round trip %.2f/255", fetched, failures, worst_diff)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"rigid-registration", rigid_registration}, {"elastic-improvement", elastic_improvement},
      {"sinkhorn", sinkhorn_reference},           {"divided-attention", divided_attention},
      {"rollout", rollout_paths},                 {"abmil-gradients", abmil_gradients},
      {"abmil-toy-task", abmil_toy_task},         {"patch-extraction", patch_extraction},
      {"metrics", metrics_exact},                 {"tile-pyramids", tile_pyramids},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %-20s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", int(criteria.size()) - failed, criteria.size());
  return failed ? 1 : 0;
}
