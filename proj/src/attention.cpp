#include "vcore/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"

namespace vcore {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeMismatch(what);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Softmax of q.k / sqrt(d) over the listed keys, accumulated into `out` and
// (scaled by `avg`) into row `row` of `weights`.
void attend_row(const Mat& q, const Mat& k, const Mat& v, int row, std::span<const int> keys, double avg,
                Eigen::Ref<Mat> out, Mat& weights) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  std::vector<double> logit(keys.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < keys.size(); ++n) {
    logit[n] = q.row(row).dot(k.row(keys[n])) * scale;
    mx = std::max(mx, logit[n]);
  }
  double sum = 0;
  for (double& l : logit) sum += (l = std::exp(l - mx));
  for (std::size_t n = 0; n < keys.size(); ++n) {
    const double a = logit[n] / sum;
    out.row(row) += a * v.row(keys[n]);
    weights(row, keys[n]) += avg * a;
  }
}

template <class KeySet>
SublayerOutput divided(const HeadProjections& h, int N, int F, const AttentionConfig& config, KeySet&& patch_keys) {
  const int M = N * F + 1;
  const int A = static_cast<int>(h.q.size());
  require(A > 0 && h.k.size() == h.q.size() && h.v.size() == h.q.size(), "attention: head count mismatch");
  const int dh = static_cast<int>(h.q[0].cols());
  SublayerOutput o;
  o.heads_out = Mat::Zero(M, A * dh);
  o.weights = Mat::Zero(M, M);
  std::vector<int> all(M);
  for (int n = 0; n < M; ++n) all[n] = n;
  std::vector<int> keys;
  for (int a = 0; a < A; ++a) {
    require(h.q[a].rows() == M && h.k[a].rows() == M && h.v[a].rows() == M, "attention: token count mismatch");
    auto out = o.heads_out.middleCols(a * dh, dh);
    attend_row(h.q[a], h.k[a], h.v[a], 0, all, 1.0 / A, out, o.weights);
    for (int t = 0; t < F; ++t) {
      for (int p = 0; p < N; ++p) {
        keys.clear();
        if (config.class_key) keys.push_back(0);
        patch_keys(p, t, keys);
        attend_row(h.q[a], h.k[a], h.v[a], 1 + t * N + p, keys, 1.0 / A, out, o.weights);
      }
    }
  }
  return o;
}

Mat gaussian(int rows, int cols, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, sd);
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = g(rng);
  return m;
}

Vec softmax(const Vec& x) {
  const Vec e = (x.array() - x.maxCoeff()).exp();
  return e / e.sum();
}

Vec log_softmax(const Vec& x) {
  const double mx = x.maxCoeff();
  return x.array() - (mx + std::log((x.array() - mx).exp().sum()));
}

}  // namespace

// ---------------------------------------------------------------------------

TokenGrid tokenize(const VolumetricPatch& patch, const Mat& E, const Mat& pos, int P) {
  require(P > 0 && patch.side > 0 && patch.side % P == 0, "tokenize: side not divisible by P");
  require(patch.depth > 0, "tokenize: empty patch");
  require(patch.voxels.size() == static_cast<std::size_t>(patch.depth) * patch.side * patch.side * 3,
          "tokenize: voxel count mismatch");
  const int g = patch.side / P;
  TokenGrid grid;
  grid.N = g * g;
  grid.F = patch.depth;
  grid.P = P;
  require(E.cols() == 3 * P * P, "tokenize: E must be D x 3P^2");
  require(pos.rows() == grid.tokens() && pos.cols() == E.rows(), "tokenize: positional table must be tokens x D");
  grid.z = pos;
  Vec x(3 * P * P);
  for (int t = 0; t < grid.F; ++t) {
    for (int by = 0; by < g; ++by) {
      for (int bx = 0; bx < g; ++bx) {
        int n = 0;
        for (int r = 0; r < P; ++r) {
          const std::size_t base = (static_cast<std::size_t>(t) * patch.side + by * P + r) * patch.side + bx * P;
          for (int c = 0; c < P; ++c)
            for (int ch = 0; ch < 3; ++ch) x[n++] = patch.voxels[(base + c) * 3 + ch] / 255.0;
        }
        grid.z.row(grid.index(by * g + bx, t)) += (E * x).transpose();
      }
    }
  }
  return grid;
}

Vec LayerNorm::apply(const Vec& x) const {
  require(x.size() == gain.size(), "layer norm: width mismatch");
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  return ((x.array() - mean) / std::sqrt(var + eps)).matrix().cwiseProduct(gain) + bias;
}

Mat LayerNorm::apply_rows(const Mat& x) const {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = apply(x.row(r).transpose()).transpose();
  return out;
}

HeadProjections qkv(const Mat& z, const BlockWeights& w, Sublayer sublayer) {
  const SublayerWeights& s = sublayer == Sublayer::Time ? w.time : w.space;
  require(w.heads > 0 && static_cast<int>(s.wq.size()) == w.heads && static_cast<int>(s.wk.size()) == w.heads &&
              static_cast<int>(s.wv.size()) == w.heads,
          "qkv: head count mismatch");
  const Mat n = s.norm.apply_rows(z);
  HeadProjections h;
  for (int a = 0; a < w.heads; ++a) {
    require(s.wq[a].cols() == z.cols(), "qkv: projection width mismatch");
    h.q.push_back(n * s.wq[a].transpose());
    h.k.push_back(n * s.wk[a].transpose());
    h.v.push_back(n * s.wv[a].transpose());
  }
  return h;
}

SublayerOutput time_attention(const HeadProjections& h, int N, int F, const AttentionConfig& config) {
  return divided(h, N, F, config, [&](int p, int, std::vector<int>& keys) {
    for (int t = 0; t < F; ++t) keys.push_back(1 + t * N + p);
  });
}

SublayerOutput space_attention(const HeadProjections& h, int N, int F, const AttentionConfig& config) {
  return divided(h, N, F, config, [&](int, int t, std::vector<int>& keys) {
    for (int p = 0; p < N; ++p) keys.push_back(1 + t * N + p);
  });
}

Mat block_forward(const Mat& z, int N, int F, const BlockWeights& w, const AttentionConfig& config,
                  BlockRecord* record) {
  require(z.rows() == N * F + 1 && z.cols() == w.D(), "block: token grid mismatch");
  SublayerOutput t = time_attention(qkv(z, w, Sublayer::Time), N, F, config);
  const Mat z_time = z + t.heads_out;
  SublayerOutput s = space_attention(qkv(z_time, w, Sublayer::Space), N, F, config);
  const Mat z_space = z_time + s.heads_out;
  Mat hidden = (w.mlp_norm.apply_rows(z_space) * w.w1.transpose()).rowwise() + w.b1.transpose();
  hidden = hidden.unaryExpr(&gelu);
  Mat out = z_space + ((hidden * w.w2.transpose()).rowwise() + w.b2.transpose());
  if (record) {
    record->time = std::move(t.weights);
    record->space = std::move(s.weights);
  }
  return out;
}

double AttentionStack::T(std::size_t layer, int p, int j, int q) const {
  return layers.at(layer).time(1 + j * N + p, 1 + q * N + p);
}

double AttentionStack::S(std::size_t layer, int i, int j, int p) const {
  return layers.at(layer).space(1 + j * N + i, 1 + j * N + p);
}

Mat combine_space_time(const BlockRecord& layer) {
  require(layer.space.rows() == layer.time.rows() && layer.space.cols() == layer.time.rows(),
          "combine: attention shape mismatch");
  return layer.space * layer.time;
}

Rollout rollout(const AttentionStack& stack) {
  if (stack.layers.empty()) throw std::invalid_argument("rollout: no layers recorded");
  const int M = stack.N * stack.F + 1;
  Mat joint = Mat::Identity(M, M);
  for (const BlockRecord& layer : stack.layers) {
    require(layer.time.rows() == M, "rollout: layer size mismatch");
    Mat w = 0.5 * (combine_space_time(layer) + Mat::Identity(M, M));
    for (Eigen::Index r = 0; r < M; ++r) w.row(r) /= w.row(r).sum();
    joint = w * joint;
  }
  Rollout out;
  out.class_relevance = joint.row(0).transpose();
  out.map.resize(stack.N, stack.F);
  for (int t = 0; t < stack.F; ++t)
    for (int p = 0; p < stack.N; ++p) out.map(p, t) = out.class_relevance(1 + t * stack.N + p);
  out.joint = std::move(joint);
  return out;
}

VideoEncoder random_encoder(const EncoderConfig& c, std::uint64_t seed) {
  if (c.dim % c.heads != 0) throw ShapeMismatch("encoder: dim not divisible by heads");
  if (c.side % c.patch != 0) throw ShapeMismatch("encoder: side not divisible by patch");
  std::mt19937_64 rng(seed);
  const int g = c.side / c.patch;
  const int tokens = g * g * c.depth + 1;
  const int dh = c.dim / c.heads;
  const int hidden = c.mlp_ratio * c.dim;
  VideoEncoder e;
  e.config = c;
  e.E = gaussian(c.dim, 3 * c.patch * c.patch, 1.0 / std::sqrt(3.0 * c.patch * c.patch), rng);
  e.pos = gaussian(tokens, c.dim, 0.5, rng);
  auto sublayer = [&] {
    SublayerWeights s;
    s.norm = LayerNorm(c.dim);
    for (int a = 0; a < c.heads; ++a) {
      s.wq.push_back(gaussian(dh, c.dim, 1.0 / std::sqrt(double(c.dim)), rng));
      s.wk.push_back(gaussian(dh, c.dim, 1.0 / std::sqrt(double(c.dim)), rng));
      s.wv.push_back(gaussian(dh, c.dim, 1.0 / std::sqrt(double(c.dim)), rng));
    }
    return s;
  };
  for (int l = 0; l < c.layers; ++l) {
    BlockWeights b;
    b.heads = c.heads;
    b.time = sublayer();
    b.space = sublayer();
    b.mlp_norm = LayerNorm(c.dim);
    b.w1 = gaussian(hidden, c.dim, 1.0 / std::sqrt(double(c.dim)), rng);
    b.b1 = Vec::Zero(hidden);
    b.w2 = gaussian(c.dim, hidden, 1.0 / std::sqrt(double(hidden)), rng);
    b.b2 = Vec::Zero(c.dim);
    e.blocks.push_back(std::move(b));
  }
  e.final_norm = LayerNorm(c.dim);
  return e;
}

EncoderOutput encode_patch(const VolumetricPatch& patch, const VideoEncoder& encoder, const AttentionConfig& config) {
  require(patch.side == encoder.config.side && patch.depth == encoder.config.depth,
          "encode_patch: patch does not match the encoder geometry");
  TokenGrid grid = tokenize(patch, encoder.E, encoder.pos, encoder.config.patch);
  EncoderOutput out;
  out.attention.N = grid.N;
  out.attention.F = grid.F;
  Mat z = std::move(grid.z);
  for (const BlockWeights& b : encoder.blocks) {
    BlockRecord rec;
    z = block_forward(z, out.attention.N, out.attention.F, b, config, &rec);
    out.attention.layers.push_back(std::move(rec));
  }
  out.feature = encoder.final_norm.apply(z.row(0).transpose());
  out.tokens = std::move(z);
  return out;
}

// ---------------------------------------------------------------------------
// ABMIL

AbmilModel make_abmil(int feature_dim, int hidden, int classes, std::uint64_t seed) {
  if (feature_dim < 1 || hidden < 1 || classes < 2) throw std::invalid_argument("make_abmil: bad dimensions");
  std::mt19937_64 rng(seed);
  auto glorot = [&](int rows, int cols) {
    const double r = std::sqrt(6.0 / (rows + cols));
    std::uniform_real_distribution<double> u(-r, r);
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    return m;
  };
  AbmilModel m;
  m.W1 = glorot(hidden, feature_dim);
  m.b1 = Vec::Zero(hidden);
  m.w2 = glorot(hidden, 1).col(0);
  m.Wc = glorot(classes, feature_dim);
  m.bc = Vec::Zero(classes);
  return m;
}

namespace {

struct AbmilCache {
  Mat h;  ///< K x hidden, tanh activations
  AbmilOutput out;
};

AbmilCache abmil_cache(const Mat& bag, const AbmilModel& model) {
  if (bag.rows() < 1) throw std::invalid_argument("abmil: empty bag");
  require(bag.cols() == model.feature_dim(), "abmil: feature width mismatch");
  AbmilCache c;
  c.h = ((bag * model.W1.transpose()).rowwise() + model.b1.transpose()).array().tanh();
  c.out.attention = softmax(c.h * model.w2);
  c.out.pooled = bag.transpose() * c.out.attention;
  c.out.logits = model.Wc * c.out.pooled + model.bc;
  return c;
}

void check_label(int label, const AbmilModel& model) {
  if (label < 0 || label >= model.classes()) throw std::invalid_argument("abmil: label out of range");
}

}  // namespace

AbmilOutput abmil_forward(const Mat& bag, const AbmilModel& model) { return abmil_cache(bag, model).out; }

double abmil_loss(const Mat& bag, int label, const AbmilModel& model) {
  check_label(label, model);
  return -log_softmax(abmil_forward(bag, model).logits)(label);
}

AbmilGradients abmil_backward(const Mat& bag, int label, const AbmilModel& model) {
  check_label(label, model);
  const AbmilCache c = abmil_cache(bag, model);
  const Vec& a = c.out.attention;
  AbmilGradients g;
  g.loss = -log_softmax(c.out.logits)(label);
  Vec delta = softmax(c.out.logits);
  delta(label) -= 1.0;
  g.Wc = delta * c.out.pooled.transpose();
  g.bc = delta;
  const Vec d_pooled = model.Wc.transpose() * delta;
  const Vec d_a = bag * d_pooled;
  const Vec d_s = a.cwiseProduct(d_a.array().matrix() - Vec::Constant(a.size(), a.dot(d_a)));
  g.w2 = c.h.transpose() * d_s;
  const Mat d_pre = (d_s * model.w2.transpose()).cwiseProduct((1.0 - c.h.array().square()).matrix());
  g.W1 = d_pre.transpose() * bag;
  g.b1 = d_pre.colwise().sum().transpose();
  return g;
}

AbmilTrainer::AbmilTrainer(AbmilModel& model, AdamOptions options) : model_(model), opt_(options) {
  for (AbmilGradients* s : {&m_, &v_}) {
    s->W1 = Mat::Zero(model.W1.rows(), model.W1.cols());
    s->b1 = Vec::Zero(model.b1.size());
    s->w2 = Vec::Zero(model.w2.size());
    s->Wc = Mat::Zero(model.Wc.rows(), model.Wc.cols());
    s->bc = Vec::Zero(model.bc.size());
  }
}

double AbmilTrainer::step(const Mat& bag, int label) { return apply(abmil_backward(bag, label, model_)); }

double AbmilTrainer::step(std::span<const Mat> bags, std::span<const int> labels) {
  if (bags.empty() || bags.size() != labels.size()) throw std::invalid_argument("trainer: bags and labels differ");
  AbmilGradients sum = abmil_backward(bags[0], labels[0], model_);
  for (std::size_t b = 1; b < bags.size(); ++b) {
    const AbmilGradients g = abmil_backward(bags[b], labels[b], model_);
    sum.W1 += g.W1;
    sum.b1 += g.b1;
    sum.w2 += g.w2;
    sum.Wc += g.Wc;
    sum.bc += g.bc;
    sum.loss += g.loss;
  }
  const double n = static_cast<double>(bags.size());
  sum.W1 /= n;
  sum.b1 /= n;
  sum.w2 /= n;
  sum.Wc /= n;
  sum.bc /= n;
  sum.loss /= n;
  return apply(sum);
}

double AbmilTrainer::apply(const AbmilGradients& g) {
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, t_);
  const double c2 = 1.0 - std::pow(opt_.beta2, t_);
  auto adam = [&](auto& param, const auto& grad, auto& m, auto& v, bool decay) {
    m = opt_.beta1 * m + (1 - opt_.beta1) * grad;
    v = opt_.beta2 * v + (1 - opt_.beta2) * grad.cwiseProduct(grad);
    if (decay && opt_.weight_decay > 0) param *= 1.0 - opt_.lr * opt_.weight_decay;
    param.array() -= opt_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + opt_.eps);
  };
  adam(model_.W1, g.W1, m_.W1, v_.W1, true);
  adam(model_.b1, g.b1, m_.b1, v_.b1, false);
  adam(model_.w2, g.w2, m_.w2, v_.w2, true);
  adam(model_.Wc, g.Wc, m_.Wc, v_.Wc, true);
  adam(model_.bc, g.bc, m_.bc, v_.bc, false);
  return g.loss;
}

// ---------------------------------------------------------------------------
// Parameters

ParameterSet parameters(const AbmilModel& m) {
  return {{"attention.W1", m.W1}, {"attention.b1", m.b1}, {"attention.w2", m.w2}, {"classifier.W", m.Wc},
          {"classifier.b", m.bc}};
}

namespace {

const Mat& lookup(const ParameterSet& params, const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  for (const NamedTensor& t : params) {
    if (t.name != name) continue;
    if (t.value.rows() != rows || t.value.cols() != cols) throw ShapeMismatch("parameter " + name + ": shape mismatch");
    return t.value;
  }
  throw ShapeMismatch("parameter " + name + " missing");
}

}  // namespace

AbmilModel abmil_from_parameters(const ParameterSet& params) {
  auto find = [&](const std::string& name) -> const Mat& {
    for (const NamedTensor& t : params)
      if (t.name == name) return t.value;
    throw ShapeMismatch("parameter " + name + " missing");
  };
  const Mat& W1 = find("attention.W1");
  const Mat& Wc = find("classifier.W");
  AbmilModel m;
  m.W1 = W1;
  m.b1 = lookup(params, "attention.b1", W1.rows(), 1).col(0);
  m.w2 = lookup(params, "attention.w2", W1.rows(), 1).col(0);
  m.Wc = lookup(params, "classifier.W", Wc.rows(), W1.cols());
  m.bc = lookup(params, "classifier.b", Wc.rows(), 1).col(0);
  return m;
}

ParameterSet parameters(const VideoEncoder& e) {
  ParameterSet out{{"embed.E", e.E}, {"embed.pos", e.pos}};
  for (std::size_t l = 0; l < e.blocks.size(); ++l) {
    const BlockWeights& b = e.blocks[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    for (const auto& [tag, s] : {std::pair<const char*, const SublayerWeights*>{"time", &b.time}, {"space", &b.space}}) {
      const std::string sp = pre + tag + ".";
      out.push_back({sp + "norm.gain", s->norm.gain});
      out.push_back({sp + "norm.bias", s->norm.bias});
      for (int a = 0; a < b.heads; ++a) {
        out.push_back({sp + "wq." + std::to_string(a), s->wq[a]});
        out.push_back({sp + "wk." + std::to_string(a), s->wk[a]});
        out.push_back({sp + "wv." + std::to_string(a), s->wv[a]});
      }
    }
    out.push_back({pre + "mlp.norm.gain", b.mlp_norm.gain});
    out.push_back({pre + "mlp.norm.bias", b.mlp_norm.bias});
    out.push_back({pre + "mlp.w1", b.w1});
    out.push_back({pre + "mlp.b1", b.b1});
    out.push_back({pre + "mlp.w2", b.w2});
    out.push_back({pre + "mlp.b2", b.b2});
  }
  out.push_back({"norm.gain", e.final_norm.gain});
  out.push_back({"norm.bias", e.final_norm.bias});
  return out;
}

VideoEncoder encoder_from_parameters(const EncoderConfig& c, const ParameterSet& params) {
  VideoEncoder e = random_encoder(c, 0);
  ParameterSet shapes = parameters(e);
  const std::size_t expected = shapes.size();
  std::map<std::string, const Mat*> by_name;
  for (NamedTensor& t : shapes) by_name[t.name] = &lookup(params, t.name, t.value.rows(), t.value.cols());
  if (params.size() != expected) throw ShapeMismatch("encoder checkpoint: unexpected tensor count");
  auto get = [&](const std::string& name) -> const Mat& { return *by_name.at(name); };
  e.E = get("embed.E");
  e.pos = get("embed.pos");
  for (std::size_t l = 0; l < e.blocks.size(); ++l) {
    BlockWeights& b = e.blocks[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    for (const auto& [tag, s] : {std::pair<const char*, SublayerWeights*>{"time", &b.time}, {"space", &b.space}}) {
      const std::string sp = pre + tag + ".";
      s->norm.gain = get(sp + "norm.gain").col(0);
      s->norm.bias = get(sp + "norm.bias").col(0);
      for (int a = 0; a < b.heads; ++a) {
        s->wq[a] = get(sp + "wq." + std::to_string(a));
        s->wk[a] = get(sp + "wk." + std::to_string(a));
        s->wv[a] = get(sp + "wv." + std::to_string(a));
      }
    }
    b.mlp_norm.gain = get(pre + "mlp.norm.gain").col(0);
    b.mlp_norm.bias = get(pre + "mlp.norm.bias").col(0);
    b.w1 = get(pre + "mlp.w1");
    b.b1 = get(pre + "mlp.b1").col(0);
    b.w2 = get(pre + "mlp.w2");
    b.b2 = get(pre + "mlp.b2").col(0);
  }
  e.final_norm.gain = get("norm.gain").col(0);
  e.final_norm.bias = get("norm.bias").col(0);
  return e;
}

void ema_update(ParameterSet& teacher, const ParameterSet& student, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw std::invalid_argument("ema_update: momentum must be in [0, 1]");
  require(teacher.size() == student.size(), "ema_update: tensor count mismatch");
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    require(teacher[k].name == student[k].name && teacher[k].value.rows() == student[k].value.rows() &&
                teacher[k].value.cols() == student[k].value.cols(),
            "ema_update: tensor " + teacher[k].name + " differs");
  }
  for (std::size_t k = 0; k < teacher.size(); ++k)
    teacher[k].value = momentum * teacher[k].value + (1.0 - momentum) * student[k].value;
}

double dino_cross_entropy(const Vec& teacher, const Vec& student, const Vec& center, double teacher_temp,
                          double student_temp) {
  if (!(teacher_temp > 0) || !(student_temp > 0)) throw std::invalid_argument("dino: temperatures must be > 0");
  require(teacher.size() == student.size() && center.size() == teacher.size(), "dino: logit width mismatch");
  const Vec target = softmax((teacher - center) / teacher_temp);
  return -target.dot(log_softmax(student / student_temp));
}

double dino_loss(const Mat& teacher, const Mat& student, const Vec& center, double teacher_temp,
                 double student_temp) {
  require(teacher.cols() == student.cols(), "dino: logit width mismatch");
  require(student.rows() >= teacher.rows(), "dino: fewer student views than teacher views");
  double total = 0;
  int pairs = 0;
  for (Eigen::Index g = 0; g < teacher.rows(); ++g) {
    for (Eigen::Index v = 0; v < student.rows(); ++v) {
      if (v == g) continue;
      total += dino_cross_entropy(teacher.row(g).transpose(), student.row(v).transpose(), center, teacher_temp,
                                  student_temp);
      ++pairs;
    }
  }
  if (pairs == 0) throw std::invalid_argument("dino_loss: no teacher/student view pairs");
  return total / pairs;
}

// ---------------------------------------------------------------------------
// Files

void write_checkpoint(const std::filesystem::path& stem, const ParameterSet& params) {
  std::filesystem::path bin = stem;
  bin += ".bin";
  std::filesystem::path manifest = stem;
  manifest += ".json";
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + bin.string());
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const NamedTensor& t : params) {
    for (Eigen::Index r = 0; r < t.value.rows(); ++r)
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) detail::put_f32(out, t.value(r, c));
    tensors.push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}, {"offset", offset}});
    offset += static_cast<std::size_t>(t.value.size());
  }
  if (!out) throw std::runtime_error("write failed: " + bin.string());
  std::ofstream js(manifest);
  js << nlohmann::json{{"dtype", "float32"}, {"byte_order", "little"}, {"data", bin.filename().string()},
                       {"tensors", tensors}}
            .dump(2)
     << "\n";
  if (!js) throw std::runtime_error("write failed: " + manifest.string());
}

ParameterSet read_checkpoint(const std::filesystem::path& stem) {
  std::filesystem::path manifest = stem;
  manifest += ".json";
  std::ifstream js(manifest);
  if (!js) throw std::runtime_error("cannot read " + manifest.string());
  const nlohmann::json j = nlohmann::json::parse(js);
  std::ifstream in(stem.parent_path() / j.at("data").get<std::string>(), std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint data for " + stem.string());
  ParameterSet out;
  std::size_t offset = 0;
  for (const auto& t : j.at("tensors")) {
    const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2 || t.at("offset").get<std::size_t>() != offset) {
      throw std::runtime_error("checkpoint manifest is not contiguous");
    }
    Mat m(shape[0], shape[1]);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = detail::get_f32(in);
    offset += static_cast<std::size_t>(m.size());
    out.push_back({t.at("name").get<std::string>(), std::move(m)});
  }
  return out;
}

void write_features(const std::filesystem::path& path, const Mat& features) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  detail::put_u32(out, static_cast<std::uint32_t>(features.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(features.cols()));
  for (Eigen::Index r = 0; r < features.rows(); ++r)
    for (Eigen::Index c = 0; c < features.cols(); ++c) detail::put_f32(out, features(r, c));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Mat read_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const std::uint32_t k = detail::get_u32(in);
  const std::uint32_t d = detail::get_u32(in);
  Mat m(k, d);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = detail::get_f32(in);
  return m;
}

}  // namespace vcore
