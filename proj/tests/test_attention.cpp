#include <filesystem>
#include <numeric>
#include <random>

#include "attention_oracles.hpp"
#include "doctest.h"
#include "vcore/attention.hpp"

using namespace vcore;

namespace {

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

HeadProjections random_heads(int heads, int tokens, int dh, std::mt19937_64& rng) {
  HeadProjections h;
  for (int a = 0; a < heads; ++a) {
    h.q.push_back(random_mat(tokens, dh, rng));
    h.k.push_back(random_mat(tokens, dh, rng));
    h.v.push_back(random_mat(tokens, dh, rng));
  }
  return h;
}

void check_rows_stochastic(const Mat& w) {
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    CHECK(std::abs(w.row(r).sum() - 1.0) < 1e-6);
    CHECK(w.row(r).minCoeff() >= 0.0);
  }
}

}  // namespace

TEST_CASE("tokenize") {
  std::mt19937_64 rng(3);
  SUBCASE("zero embedding and position give zero tokens") {
    const VolumetricPatch p = random_patch(2, 8, rng);
    const TokenGrid g = tokenize(p, Mat::Zero(5, 48), Mat::Zero(9, 5), 4);
    CHECK(g.N == 4);
    CHECK(g.F == 2);
    CHECK(g.z.isZero(0.0));
  }
  SUBCASE("P equal to side gives one token per slice") {
    const VolumetricPatch p = random_patch(3, 4, rng);
    const TokenGrid g = tokenize(p, random_mat(6, 48, rng), random_mat(4, 6, rng), 4);
    CHECK(g.N == 1);
    CHECK(g.tokens() == 4);
  }
  SUBCASE("matches voxel-by-voxel oracle") {
    const VolumetricPatch p = random_patch(2, 8, rng);
    const Mat E = random_mat(7, 48, rng), pos = random_mat(9, 7, rng);
    const TokenGrid g = tokenize(p, E, pos, 4);
    CHECK(oracle::max_abs_diff(oracle::tokenize(p, E, pos, 4), g.z) < 1e-6);
  }
  SUBCASE("shape errors") {
    const VolumetricPatch p = random_patch(2, 8, rng);
    CHECK_THROWS_AS(tokenize(p, Mat::Zero(5, 48), Mat::Zero(9, 5), 3), ShapeMismatch);
    CHECK_THROWS_AS(tokenize(p, Mat::Zero(5, 47), Mat::Zero(9, 5), 4), ShapeMismatch);
    CHECK_THROWS_AS(tokenize(p, Mat::Zero(5, 48), Mat::Zero(8, 5), 4), ShapeMismatch);
  }
}

TEST_CASE("layer norm and qkv") {
  std::mt19937_64 rng(5);
  const VideoEncoder enc = random_encoder({.side = 8, .depth = 2, .patch = 4, .dim = 12, .heads = 3, .layers = 1}, 9);
  const BlockWeights& w = enc.blocks[0];

  SUBCASE("constant token normalises to zero") {
    LayerNorm ln(12);
    CHECK(ln.apply(Vec::Constant(12, 3.5)).isZero(0.0));
  }
  SUBCASE("random token has zero mean and unit variance") {
    LayerNorm ln(12);
    for (int k = 0; k < 20; ++k) {
      const Vec y = ln.apply(random_mat(12, 1, rng, 2.0).col(0));
      CHECK(std::abs(y.mean()) < 1e-12);
      CHECK(std::abs((y.array() - y.mean()).square().mean() - 1.0) < 1e-5);
    }
  }
  SUBCASE("identity projection of a constant token is zero") {
    BlockWeights id = w;
    id.heads = 1;
    id.time.wq = id.time.wk = id.time.wv = {Mat::Identity(12, 12)};
    const HeadProjections h = qkv(Mat::Constant(9, 12, -1.25), id, Sublayer::Time);
    CHECK(h.q[0].isZero(0.0));
    CHECK(h.v[0].isZero(0.0));
  }
  SUBCASE("per-token loop oracle") {
    LayerNorm ln(12);
    ln.gain = random_mat(12, 1, rng).col(0);
    ln.bias = random_mat(12, 1, rng).col(0);
    BlockWeights b = w;
    b.space.norm = ln;
    const Mat z = random_mat(9, 12, rng);
    const HeadProjections h = qkv(z, b, Sublayer::Space);
    double worst = 0;
    for (int tok = 0; tok < 9; ++tok) {
      std::vector<double> x(12);
      for (int d = 0; d < 12; ++d) x[d] = z(tok, d);
      const auto n = oracle::layer_norm(x, ln.gain, ln.bias, LayerNorm::eps);
      for (int a = 0; a < 3; ++a)
        for (int r = 0; r < 4; ++r) {
          double q = 0, k = 0, v = 0;
          for (int d = 0; d < 12; ++d) {
            q += b.space.wq[a](r, d) * n[d];
            k += b.space.wk[a](r, d) * n[d];
            v += b.space.wv[a](r, d) * n[d];
          }
          worst = std::max({worst, std::abs(q - h.q[a](tok, r)), std::abs(k - h.k[a](tok, r)),
                            std::abs(v - h.v[a](tok, r))});
        }
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("time attention") {
  std::mt19937_64 rng(11);
  SUBCASE("single slice without class key attends to itself") {
    const HeadProjections h = random_heads(2, 5, 3, rng);
    const SublayerOutput o = time_attention(h, 4, 1, {.class_key = false});
    for (int p = 0; p < 4; ++p) CHECK(o.weights(1 + p, 1 + p) == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("equal keys give uniform weights") {
    const int N = 3, F = 4;
    HeadProjections h = random_heads(1, N * F + 1, 4, rng);
    const Vec key = random_mat(4, 1, rng).col(0);
    for (Eigen::Index r = 0; r < h.k[0].rows(); ++r) h.k[0].row(r) = key.transpose();
    const SublayerOutput o = time_attention(h, N, F);
    for (int t = 0; t < F; ++t)
      for (int p = 0; p < N; ++p) {
        const int a = 1 + t * N + p;
        CHECK(o.weights(a, 0) == doctest::Approx(1.0 / (F + 1)));
        for (int q = 0; q < F; ++q) CHECK(o.weights(a, 1 + q * N + p) == doctest::Approx(1.0 / (F + 1)));
      }
  }
  SUBCASE("random two-head case equals masked dense oracle") {
    for (bool ck : {true, false}) {
      const int N = 4, F = 3;
      const HeadProjections h = random_heads(2, N * F + 1, 5, rng);
      const SublayerOutput o = time_attention(h, N, F, {.class_key = ck});
      const auto ref = oracle::dense_masked_attention(h, oracle::divided_mask(N, F, true, ck));
      CHECK(oracle::max_abs_diff(ref.out, o.heads_out) < 1e-10);
      CHECK(oracle::max_abs_diff(ref.weights, o.weights) < 1e-10);
      check_rows_stochastic(o.weights);
    }
  }
}

TEST_CASE("space attention") {
  std::mt19937_64 rng(13);
  SUBCASE("single location sees itself and the class token") {
    const HeadProjections h = random_heads(2, 4, 3, rng);
    const SublayerOutput o = space_attention(h, 1, 3);
    for (int t = 0; t < 3; ++t) {
      const int a = 1 + t;
      CHECK(o.weights(a, 0) + o.weights(a, a) == doctest::Approx(1.0));
      CHECK(o.weights(a, 0) > 0.0);
    }
  }
  SUBCASE("equal keys give uniform weights") {
    const int N = 5, F = 2;
    HeadProjections h = random_heads(1, N * F + 1, 4, rng);
    for (Eigen::Index r = 1; r < h.k[0].rows(); ++r) h.k[0].row(r) = h.k[0].row(0);
    const SublayerOutput o = space_attention(h, N, F);
    for (int a = 1; a < N * F + 1; ++a) CHECK(o.weights(a, 0) == doctest::Approx(1.0 / (N + 1)));
  }
  SUBCASE("random case equals masked dense oracle") {
    for (bool ck : {true, false}) {
      const int N = 6, F = 2;
      const HeadProjections h = random_heads(3, N * F + 1, 4, rng);
      const SublayerOutput o = space_attention(h, N, F, {.class_key = ck});
      const auto ref = oracle::dense_masked_attention(h, oracle::divided_mask(N, F, false, ck));
      CHECK(oracle::max_abs_diff(ref.out, o.heads_out) < 1e-10);
      CHECK(oracle::max_abs_diff(ref.weights, o.weights) < 1e-10);
    }
  }
  SUBCASE("one slice with the class key masked is plain spatial attention") {
    const int N = 7;
    const HeadProjections h = random_heads(2, N + 1, 4, rng);
    const SublayerOutput o = space_attention(h, N, 1, {.class_key = false});
    oracle::Mask vit(N + 1, std::vector<bool>(N + 1, true));
    for (int a = 1; a <= N; ++a) vit[a][0] = false;
    const auto ref = oracle::dense_masked_attention(h, vit);
    CHECK(oracle::max_abs_diff(ref.out, o.heads_out) < 1e-10);
  }
}

TEST_CASE("block forward and encoder") {
  std::mt19937_64 rng(17);
  const EncoderConfig cfg{.side = 16, .depth = 3, .patch = 4, .dim = 16, .heads = 4, .layers = 2};
  const VideoEncoder enc = random_encoder(cfg, 21);
  const VolumetricPatch p = random_patch(3, 16, rng);
  const EncoderOutput out = encode_patch(p, enc);
  CHECK(out.feature.size() == 16);
  CHECK(out.attention.layers.size() == 2);
  for (const BlockRecord& r : out.attention.layers) {
    check_rows_stochastic(r.time);
    check_rows_stochastic(r.space);
  }
  CHECK(out.feature.allFinite());

  SUBCASE("accessors index the recorded matrices") {
    const int N = out.attention.N;
    CHECK(out.attention.T(0, 2, 1, 0) == out.attention.layers[0].time(1 + 1 * N + 2, 1 + 2));
    CHECK(out.attention.S(1, 3, 2, 5) == out.attention.layers[1].space(1 + 2 * N + 3, 1 + 2 * N + 5));
  }
  SUBCASE("geometry mismatch") {
    CHECK_THROWS_AS(encode_patch(random_patch(2, 16, rng), enc), ShapeMismatch);
    CHECK_THROWS_AS(random_encoder({.dim = 10, .heads = 4}, 1), ShapeMismatch);
  }
}

TEST_CASE("rollout") {
  std::mt19937_64 rng(19);
  SUBCASE("identity attention gives the identity class row") {
    AttentionStack st;
    st.N = 3;
    st.F = 2;
    st.layers.push_back({Mat::Identity(7, 7), Mat::Identity(7, 7)});
    const Rollout r = rollout(st);
    CHECK(r.class_relevance(0) == 1.0);
    CHECK(r.class_relevance.tail(6).isZero(0.0));
  }
  SUBCASE("combined weights equal two-hop path enumeration") {
    const VideoEncoder enc = random_encoder({.side = 8, .depth = 3, .patch = 4, .dim = 8, .heads = 2, .layers = 1}, 4);
    const EncoderOutput out = encode_patch(random_patch(3, 8, rng), enc);
    const BlockRecord& layer = out.attention.layers[0];
    const Mat W = combine_space_time(layer);
    const int N = out.attention.N, F = out.attention.F;
    CHECK(oracle::max_abs_diff(oracle::two_hop(layer, N, F, true), W) <= 1e-12);
    // Patch-to-patch entries less the class detour are S[i,j,p] * T[p,j,q].
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < F; ++j)
        for (int p = 0; p < N; ++p)
          for (int q = 0; q < F; ++q) {
            const int a = 1 + j * N + i, b = 1 + q * N + p;
            const double direct = W(a, b) - layer.space(a, 0) * layer.time(0, b);
            CHECK(std::abs(direct - out.attention.S(0, i, j, p) * out.attention.T(0, p, j, q)) <= 1e-12);
          }
  }
  SUBCASE("relevance is a probability vector") {
    const VideoEncoder enc = random_encoder({.side = 16, .depth = 2, .patch = 4, .dim = 8, .heads = 2, .layers = 3}, 8);
    const Rollout r = rollout(encode_patch(random_patch(2, 16, rng), enc).attention);
    check_rows_stochastic(r.joint);
    CHECK(r.class_relevance.minCoeff() >= 0.0);
    CHECK(std::abs(r.class_relevance.sum() - 1.0) < 1e-6);
    CHECK(r.map.rows() == 16);
    CHECK(r.map.cols() == 2);
    CHECK(r.map(5, 1) == r.class_relevance(1 + 16 + 5));
  }
  SUBCASE("empty stack") { CHECK_THROWS_AS(rollout(AttentionStack{}), std::invalid_argument); }
}

TEST_CASE("abmil forward") {
  std::mt19937_64 rng(23);
  const AbmilModel m = make_abmil(6, 5, 3, 2);
  SUBCASE("singleton bag") {
    const AbmilOutput o = abmil_forward(random_mat(1, 6, rng), m);
    CHECK(o.attention(0) == 1.0);
  }
  SUBCASE("identical instances") {
    const Mat row = random_mat(1, 6, rng);
    const AbmilOutput o = abmil_forward(row.replicate(7, 1), m);
    for (int k = 0; k < 7; ++k) CHECK(o.attention(k) == doctest::Approx(1.0 / 7).epsilon(1e-14));
  }
  SUBCASE("scalar loop oracle") {
    const Mat bag = random_mat(9, 6, rng);
    const AbmilOutput o = abmil_forward(bag, m);
    const auto ref = oracle::abmil(bag, m);
    for (int k = 0; k < 9; ++k) CHECK(std::abs(ref.attention[k] - o.attention(k)) < 1e-6);
    for (int c = 0; c < 3; ++c) CHECK(std::abs(ref.logits[c] - o.logits(c)) < 1e-6);
  }
  SUBCASE("permutation") {
    const Mat bag = random_mat(8, 6, rng);
    std::vector<int> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat shuffled(8, 6);
    for (int k = 0; k < 8; ++k) shuffled.row(k) = bag.row(perm[k]);
    const AbmilOutput a = abmil_forward(bag, m), b = abmil_forward(shuffled, m);
    CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() < 1e-12);
    for (int k = 0; k < 8; ++k) CHECK(std::abs(b.attention(k) - a.attention(perm[k])) < 1e-15);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(abmil_forward(Mat(0, 6), m), std::invalid_argument);
    CHECK_THROWS_AS(abmil_forward(Mat::Zero(3, 5), m), ShapeMismatch);
    CHECK_THROWS_AS(abmil_loss(Mat::Zero(3, 6), 3, m), std::invalid_argument);
  }
}

TEST_CASE("abmil gradients") {
  SUBCASE("zero model: classifier bias gradient is softmax(0) - onehot") {
    AbmilModel m = make_abmil(4, 3, 4, 1);
    m.W1.setZero();
    m.w2.setZero();
    m.Wc.setZero();
    std::mt19937_64 rng(1);
    const AbmilGradients g = abmil_backward(random_mat(5, 4, rng), 2, m);
    for (int c = 0; c < 4; ++c) CHECK(g.bc(c) == doctest::Approx(0.25 - (c == 2)));
    CHECK(g.loss == doctest::Approx(std::log(4.0)));
  }
  SUBCASE("central differences on random configurations") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed);
      AbmilModel m = make_abmil(5, 4, 3, seed);
      m.b1 = random_mat(4, 1, rng, 0.3).col(0);
      m.bc = random_mat(3, 1, rng, 0.3).col(0);
      const Mat bag = random_mat(6, 5, rng);
      const int label = static_cast<int>(seed % 3);
      const AbmilGradients g = abmil_backward(bag, label, m);
      auto loss = [&] { return abmil_loss(bag, label, m); };
      CHECK(oracle::relative_error(g.W1, oracle::central_difference(m.W1, loss)) < 1e-4);
      CHECK(oracle::relative_error(g.b1, oracle::central_difference(m.b1, loss)) < 1e-4);
      CHECK(oracle::relative_error(g.w2, oracle::central_difference(m.w2, loss)) < 1e-4);
      CHECK(oracle::relative_error(g.Wc, oracle::central_difference(m.Wc, loss)) < 1e-4);
      CHECK(oracle::relative_error(g.bc, oracle::central_difference(m.bc, loss)) < 1e-4);
    }
  }
  SUBCASE("bag order does not change parameter gradients") {
    std::mt19937_64 rng(7);
    const AbmilModel m = make_abmil(5, 4, 2, 7);
    const Mat bag = random_mat(6, 5, rng);
    const Mat rev = bag.colwise().reverse();
    const AbmilGradients a = abmil_backward(bag, 1, m), b = abmil_backward(rev, 1, m);
    CHECK((a.W1 - b.W1).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a.w2 - b.w2).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a.Wc - b.Wc).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("abmil training reduces loss") {
  std::mt19937_64 rng(31);
  AbmilModel m = make_abmil(4, 8, 2, 3);
  AbmilTrainer trainer(m, {.lr = 1e-2});
  std::vector<Mat> bags;
  std::vector<int> labels;
  for (int b = 0; b < 20; ++b) {
    Mat bag = random_mat(8, 4, rng);
    labels.push_back(b % 2);
    if (b % 2) bag(0, 0) += 4.0;
    bags.push_back(bag);
  }
  auto mean_loss = [&] {
    double s = 0;
    for (std::size_t b = 0; b < bags.size(); ++b) s += abmil_loss(bags[b], labels[b], m);
    return s / bags.size();
  };
  const double before = mean_loss();
  for (int epoch = 0; epoch < 30; ++epoch)
    for (std::size_t b = 0; b < bags.size(); ++b) trainer.step(bags[b], labels[b]);
  CHECK(trainer.steps() == 600);
  CHECK(mean_loss() < 0.5 * before);
}

TEST_CASE("ema update") {
  std::mt19937_64 rng(37);
  const ParameterSet student = parameters(make_abmil(4, 3, 2, 1));
  const ParameterSet start = parameters(make_abmil(4, 3, 2, 2));
  auto distance = [&](const ParameterSet& a) {
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k].value - student[k].value).squaredNorm();
    return std::sqrt(s);
  };
  SUBCASE("momentum one keeps the teacher") {
    ParameterSet t = start;
    ema_update(t, student, 1.0);
    for (std::size_t k = 0; k < t.size(); ++k) CHECK(t[k].value == start[k].value);
  }
  SUBCASE("momentum zero copies the student") {
    ParameterSet t = start;
    ema_update(t, student, 0.0);
    for (std::size_t k = 0; k < t.size(); ++k) CHECK(t[k].value == student[k].value);
  }
  SUBCASE("geometric convergence") {
    ParameterSet t = start;
    const double d0 = distance(start);
    for (int n = 1; n <= 25; ++n) {
      ema_update(t, student, 0.9);
      CHECK(distance(t) == doctest::Approx(std::pow(0.9, n) * d0).epsilon(1e-9));
    }
  }
  SUBCASE("errors") {
    ParameterSet t = start;
    CHECK_THROWS_AS(ema_update(t, parameters(make_abmil(5, 3, 2, 1)), 0.5), ShapeMismatch);
    CHECK_THROWS_AS(ema_update(t, student, 1.5), std::invalid_argument);
  }
}

TEST_CASE("dino loss") {
  std::mt19937_64 rng(41);
  SUBCASE("identical distributions give the entropy") {
    const Vec l = random_mat(6, 1, rng).col(0);
    const Vec p = (l.array() - l.maxCoeff()).exp() / (l.array() - l.maxCoeff()).exp().sum();
    const double entropy = -(p.array() * p.array().log()).sum();
    CHECK(dino_cross_entropy(l, l, Vec::Zero(6), 1.0, 1.0) == doctest::Approx(entropy).epsilon(1e-12));
  }
  SUBCASE("sharp teacher picks the student log-probability of its argmax") {
    const Vec t = random_mat(5, 1, rng).col(0), s = random_mat(5, 1, rng).col(0);
    Eigen::Index arg;
    t.maxCoeff(&arg);
    const double lse = std::log((s.array() - s.maxCoeff()).exp().sum()) + s.maxCoeff();
    CHECK(dino_cross_entropy(t, s, Vec::Zero(5), 1e-4, 1.0) == doctest::Approx(lse - s(arg)).epsilon(1e-9));
  }
  SUBCASE("scalar oracle") {
    for (int rep = 0; rep < 20; ++rep) {
      const Vec t = random_mat(8, 1, rng, 3).col(0), s = random_mat(8, 1, rng, 3).col(0),
                c = random_mat(8, 1, rng, 0.5).col(0);
      const auto v = [](const Vec& x) { return std::vector<double>(x.data(), x.data() + x.size()); };
      CHECK(std::abs(dino_cross_entropy(t, s, c, 0.04, 0.1) - oracle::dino_cross_entropy(v(t), v(s), v(c), 0.04, 0.1)) <
            1e-10);
    }
  }
  SUBCASE("view pairs skip matching indices") {
    const Mat T = random_mat(2, 4, rng), S = random_mat(4, 4, rng);
    const Vec c = Vec::Zero(4);
    double expect = 0;
    int n = 0;
    for (int g = 0; g < 2; ++g)
      for (int v = 0; v < 4; ++v)
        if (v != g) {
          expect += dino_cross_entropy(T.row(g).transpose(), S.row(v).transpose(), c, 0.04, 0.1);
          ++n;
        }
    CHECK(n == 6);
    CHECK(dino_loss(T, S, c, 0.04, 0.1) == doctest::Approx(expect / n).epsilon(1e-14));
    CHECK_THROWS_AS(dino_loss(T.topRows(1), S.topRows(1), c, 0.04, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(dino_cross_entropy(c, c, c, 0.0, 0.1), std::invalid_argument);
  }
}

TEST_CASE("checkpoint and feature files") {
  const auto dir = std::filesystem::temp_directory_path() / "vcore_test_ckpt";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(43);

  SUBCASE("encoder round trip") {
    const EncoderConfig cfg{.side = 8, .depth = 2, .patch = 4, .dim = 8, .heads = 2, .layers = 2};
    const VideoEncoder enc = random_encoder(cfg, 5);
    write_checkpoint(dir / "enc", parameters(enc));
    CHECK(std::filesystem::exists(dir / "enc.json"));
    CHECK(std::filesystem::file_size(dir / "enc.bin") % 4 == 0);
    const VideoEncoder back = encoder_from_parameters(cfg, read_checkpoint(dir / "enc"));
    const VolumetricPatch p = random_patch(2, 8, rng);
    const Vec a = encode_patch(p, enc).feature, b = encode_patch(p, back).feature;
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-4);
    CHECK_THROWS_AS(encoder_from_parameters({.side = 8, .depth = 2, .patch = 4, .dim = 8, .heads = 2, .layers = 3},
                                            read_checkpoint(dir / "enc")),
                    ShapeMismatch);
  }
  SUBCASE("abmil round trip") {
    const AbmilModel m = make_abmil(5, 4, 3, 6);
    write_checkpoint(dir / "abmil", parameters(m));
    const AbmilModel back = abmil_from_parameters(read_checkpoint(dir / "abmil"));
    CHECK((m.W1 - back.W1).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((m.Wc - back.Wc).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(back.classes() == 3);
  }
  SUBCASE("features") {
    const Mat f = random_mat(7, 5, rng);
    write_features(dir / "f.bin", f);
    CHECK(std::filesystem::file_size(dir / "f.bin") == 8 + 7 * 5 * 4);
    const Mat back = read_features(dir / "f.bin");
    CHECK(back.rows() == 7);
    CHECK((back - f).cwiseAbs().maxCoeff() < 1e-6);
  }
  std::filesystem::remove_all(dir);
}
