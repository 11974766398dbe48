#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vcore/volume.hpp"

namespace vcore {

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Tokens

/// Row 0 is the class token; patch p (0-based) of slice t sits at row
/// 1 + t*N + p.
struct TokenGrid {
  Mat z;  ///< (N*F + 1) x D
  int N = 0;
  int F = 0;
  int P = 0;

  int D() const { return static_cast<int>(z.cols()); }
  int tokens() const { return N * F + 1; }
  int index(int p, int t) const { return 1 + t * N + p; }
};

/// z_{p,t} = E x_{p,t} + pos_{p,t}, with x the (row, col, rgb) flattening of a
/// P x P block scaled to [0, 1]. The class token is pos row 0.
TokenGrid tokenize(const VolumetricPatch& patch, const Mat& E, const Mat& pos, int P);

// ---------------------------------------------------------------------------
// Blocks

struct LayerNorm {
  Vec gain;
  Vec bias;
  static constexpr double eps = 1e-6;

  explicit LayerNorm(int d = 0) : gain(Vec::Ones(d)), bias(Vec::Zero(d)) {}
  Vec apply(const Vec& x) const;
  Mat apply_rows(const Mat& x) const;
};

struct SublayerWeights {
  LayerNorm norm;
  std::vector<Mat> wq, wk, wv;  ///< per head, D_h x D
};

struct BlockWeights {
  int heads = 1;
  SublayerWeights time;
  SublayerWeights space;
  LayerNorm mlp_norm;
  Mat w1;  ///< hidden x D
  Vec b1;
  Mat w2;  ///< D x hidden
  Vec b2;

  int D() const { return static_cast<int>(w2.rows()); }
  int head_dim() const { return D() / heads; }
};

enum class Sublayer { Time, Space };

struct HeadProjections {
  std::vector<Mat> q, k, v;  ///< per head, tokens x D_h
};

HeadProjections qkv(const Mat& z, const BlockWeights& w, Sublayer sublayer);

struct AttentionConfig {
  /// Patch tokens include the class key in their key set. When false the class
  /// token is dropped from patch keys (it still attends to everything).
  bool class_key = true;
};

struct SublayerOutput {
  Mat heads_out;  ///< tokens x D, heads concatenated (no residual)
  Mat weights;    ///< tokens x tokens, head-averaged attention
};

/// Token (p, t) attends to the class token and to (p, t') for all t'.
SublayerOutput time_attention(const HeadProjections& h, int N, int F, const AttentionConfig& config = {});

/// Token (p, t) attends to the class token and to (p', t) for all p'.
SublayerOutput space_attention(const HeadProjections& h, int N, int F, const AttentionConfig& config = {});

struct BlockRecord {
  Mat time;   ///< head-averaged time attention, tokens x tokens
  Mat space;  ///< head-averaged space attention, tokens x tokens
};

/// Pre-norm block: time attention, space attention on re-projected tokens,
/// then a GELU MLP, each with a residual connection.
Mat block_forward(const Mat& z, int N, int F, const BlockWeights& w, const AttentionConfig& config = {},
                  BlockRecord* record = nullptr);

/// Per-layer head-averaged attention for one forward pass.
struct AttentionStack {
  int N = 0;
  int F = 0;
  std::vector<BlockRecord> layers;

  /// T[p, j, q]: attention of (p, j) to (p, q) in the time sub-layer.
  double T(std::size_t layer, int p, int j, int q) const;
  /// S[i, j, p]: attention of (i, j) to (p, j) in the space sub-layer.
  double S(std::size_t layer, int i, int j, int p) const;
};

/// Product of the space and time matrices: entry (a, b) sums S(a, k) T(k, b)
/// over every intermediate token k. For patch tokens the only patch path is
/// (i,j) -> (p,j) -> (p,q); the class token adds S(a, 0) T(0, b).
Mat combine_space_time(const BlockRecord& layer);

struct Rollout {
  Mat joint;                ///< tokens x tokens, rows sum to 1
  Vec class_relevance;      ///< class-token row of `joint`
  Mat map;                  ///< N x F patch relevance taken from class_relevance
};

/// Per layer W <- rownorm((W + I) / 2), multiplied from the input layer up.
Rollout rollout(const AttentionStack& stack);

struct EncoderConfig {
  int side = 32;
  int depth = 4;
  int patch = 8;
  int dim = 64;
  int heads = 4;
  int layers = 2;
  int mlp_ratio = 4;
};

struct VideoEncoder {
  EncoderConfig config;
  Mat E;    ///< D x 3P^2
  Mat pos;  ///< tokens x D
  std::vector<BlockWeights> blocks;
  LayerNorm final_norm;
};

VideoEncoder random_encoder(const EncoderConfig& config, std::uint64_t seed);

struct EncoderOutput {
  Vec feature;  ///< final-normalised class token
  Mat tokens;
  AttentionStack attention;
};

EncoderOutput encode_patch(const VolumetricPatch& patch, const VideoEncoder& encoder,
                           const AttentionConfig& config = {});

// ---------------------------------------------------------------------------
// ABMIL

struct AbmilModel {
  Mat W1;  ///< hidden x feature_dim
  Vec b1;
  Vec w2;  ///< hidden
  Mat Wc;  ///< classes x feature_dim
  Vec bc;

  int feature_dim() const { return static_cast<int>(W1.cols()); }
  int hidden() const { return static_cast<int>(W1.rows()); }
  int classes() const { return static_cast<int>(Wc.rows()); }
};

/// Glorot-uniform weights, zero biases.
AbmilModel make_abmil(int feature_dim, int hidden, int classes, std::uint64_t seed);

struct AbmilOutput {
  Vec logits;
  Vec attention;  ///< one weight per instance
  Vec pooled;
};

/// `bag` holds one instance per row.
AbmilOutput abmil_forward(const Mat& bag, const AbmilModel& model);

/// Cross-entropy of softmax(logits) against `label`.
double abmil_loss(const Mat& bag, int label, const AbmilModel& model);

struct AbmilGradients {
  Mat W1;
  Vec b1;
  Vec w2;
  Mat Wc;
  Vec bc;
  double loss = 0.0;
};

AbmilGradients abmil_backward(const Mat& bag, int label, const AbmilModel& model);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AbmilTrainer {
 public:
  AbmilTrainer(AbmilModel& model, AdamOptions options = {});
  /// One Adam step on a single bag; returns the loss before the step.
  double step(const Mat& bag, int label);
  /// One Adam step on the mean gradient over a mini-batch; returns the mean loss.
  double step(std::span<const Mat> bags, std::span<const int> labels);
  int steps() const { return t_; }

 private:
  double apply(const AbmilGradients& g);

  AbmilModel& model_;
  AdamOptions opt_;
  AbmilGradients m_, v_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// Parameters, EMA, DINO

struct NamedTensor {
  std::string name;
  Mat value;
};
using ParameterSet = std::vector<NamedTensor>;

ParameterSet parameters(const AbmilModel& model);
AbmilModel abmil_from_parameters(const ParameterSet& params);
ParameterSet parameters(const VideoEncoder& encoder);
VideoEncoder encoder_from_parameters(const EncoderConfig& config, const ParameterSet& params);

/// teacher <- momentum * teacher + (1 - momentum) * student, elementwise.
void ema_update(ParameterSet& teacher, const ParameterSet& student, double momentum);

/// H(softmax((teacher - center) / t_temp), softmax(student / s_temp)).
double dino_cross_entropy(const Vec& teacher, const Vec& student, const Vec& center, double teacher_temp,
                          double student_temp);

/// Global teacher views (rows of `teacher`) teach every student view with a
/// different index; student rows 0..G-1 are the same global views. Mean over
/// those pairs.
double dino_loss(const Mat& teacher, const Mat& student, const Vec& center, double teacher_temp,
                 double student_temp);

// ---------------------------------------------------------------------------
// Files

/// `<stem>.json` lists names, shapes and offsets; `<stem>.bin` holds the
/// little-endian f32 values, row-major, back to back.
void write_checkpoint(const std::filesystem::path& stem, const ParameterSet& params);
ParameterSet read_checkpoint(const std::filesystem::path& stem);

/// u32 K, u32 dim, then K*dim little-endian f32 values.
void write_features(const std::filesystem::path& path, const Mat& features);
Mat read_features(const std::filesystem::path& path);

}  // namespace vcore
