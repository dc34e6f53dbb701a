#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "rean/numerics.hpp"

namespace rean {

/// One template: an ordered set of N embeddings of dimension D. N == 0 marks a
/// failure-to-enroll template.
struct FrameEmbeddingSet {
  std::string template_id;
  std::string subject_id;
  Matrix frames;  // N x D

  std::size_t size() const noexcept { return frames.rows(); }
  std::size_t dim() const noexcept { return frames.cols(); }
};

enum class Method { Rean, Avg, Quality, NaiveLstm, ContextFilter };

std::string_view to_string(Method m);
Method parse_method(std::string_view name);

struct TemplateRepresentation {
  std::string template_id;
  std::string subject_id;
  Method method = Method::Avg;
  Vector vector;
};

/// Gate layout along the 4H axis is [input | forget | candidate | output].
struct LstmDirectionParams {
  Matrix input_weights;      // in x 4H
  Matrix recurrent_weights;  // H x 4H
  Matrix bias;               // 1 x 4H

  std::size_t input_size() const noexcept { return input_weights.rows(); }
  std::size_t hidden_size() const noexcept { return recurrent_weights.rows(); }
};

struct LstmLayerParams {
  LstmDirectionParams forward;
  LstmDirectionParams backward;
};

struct NamedBlock {
  std::string name;
  Matrix* matrix;
};
struct ConstNamedBlock {
  std::string name;
  const Matrix* matrix;
};

/// Two-layer bidirectional LSTM plus an affine head 2H -> D. Used both by the
/// attention aggregator and by the naive last-state baseline.
struct AggregatorParams {
  std::size_t dim = 0;
  std::size_t hidden = 0;
  std::array<LstmLayerParams, 2> layers;
  Matrix head_weights;  // 2H x D
  Matrix head_bias;     // 1 x D

  static AggregatorParams zeros(std::size_t dim, std::size_t hidden);
  /// Uniform in ±1/sqrt(fan_in); forget-gate bias 1, other biases 0.
  static AggregatorParams initialized(std::size_t dim, std::size_t hidden, std::mt19937_64& rng);

  std::vector<NamedBlock> blocks();
  std::vector<ConstNamedBlock> blocks() const;
};

/// Per-frame scalar quality network: D -> K (ReLU) -> 1.
struct QualityMlp {
  std::size_t dim = 0;
  std::size_t hidden = 0;
  Matrix w1;  // D x K
  Matrix b1;  // 1 x K
  Matrix w2;  // K x 1
  Matrix b2;  // 1 x 1

  static QualityMlp zeros(std::size_t dim, std::size_t hidden);
  static QualityMlp initialized(std::size_t dim, std::size_t hidden, std::mt19937_64& rng);

  std::vector<NamedBlock> blocks();
  std::vector<ConstNamedBlock> blocks() const;
};

enum class Architecture : std::uint32_t { Rean = 0, NaiveLstm = 1, QualityPool = 2 };

std::string_view to_string(Architecture a);
Architecture parse_architecture(std::string_view name);
Method method_for(Architecture a);

/// Learnable parameters of one trainable aggregator.
struct Model {
  Architecture arch = Architecture::Rean;
  std::variant<AggregatorParams, QualityMlp> params;

  static Model create(Architecture arch, std::size_t dim, std::size_t hidden, std::uint64_t seed);
  static Model zeros(Architecture arch, std::size_t dim, std::size_t hidden);
  Model zeros_like() const;

  std::size_t dim() const;
  std::size_t hidden() const;
  const AggregatorParams& recurrent() const;
  AggregatorParams& recurrent();
  const QualityMlp& mlp() const;
  QualityMlp& mlp();

  std::vector<NamedBlock> blocks();
  std::vector<ConstNamedBlock> blocks() const;
};

std::size_t parameter_count(const Model& model);
Vector flatten(const Model& model);
void unflatten(Model& model, std::span<const double> values);

// ---------------------------------------------------------------------------
// Recurrent core

struct LstmState {
  Vector hidden;
  Vector cell;
};

/// One standard LSTM step: gates i, f, o via sigmoid, candidate g via tanh,
/// c = f*c_prev + i*g, h = o*tanh(c).
LstmState lstm_cell_forward(std::span<const double> x, std::span<const double> h_prev,
                            std::span<const double> c_prev, const LstmDirectionParams& params);

/// Per-time-step activations of one direction, indexed by time (not by
/// processing order).
struct LstmDirectionTrace {
  Matrix gates;   // N x 4H, post-activation
  Matrix cells;   // N x H
  Matrix hidden;  // N x H
};

struct BiLstmTrace {
  std::array<Matrix, 2> outputs;  // per layer, N x 2H = [forward | backward]
  std::array<std::array<LstmDirectionTrace, 2>, 2> directions;
};

/// Runs one direction over all rows of `inputs`; `reverse` processes t = N-1..0.
LstmDirectionTrace run_lstm_direction(const Matrix& inputs, const LstmDirectionParams& params,
                                      bool reverse);

BiLstmTrace bilstm_forward_traced(const Matrix& frames, const AggregatorParams& params);

/// Final-layer hidden states, N x 2H. Throws on N == 0.
Matrix bilstm_forward(const Matrix& frames, const AggregatorParams& params);

/// Per-row affine map 2H -> D producing quality logits.
Matrix quality_head(const Matrix& hidden, const AggregatorParams& params);

/// N x D weights, each column a softmax over the template.
struct AttentionWeights {
  Matrix weights;
};

AttentionWeights normalize_attention(const Matrix& logits);

/// r_j = sum_i frames[i,j] * W[i,j]
Vector aggregate_weighted(const Matrix& frames, const AttentionWeights& weights);

TemplateRepresentation rean_aggregate(const FrameEmbeddingSet& set, const AggregatorParams& params);
TemplateRepresentation avg_pool(const FrameEmbeddingSet& set);

/// Scalar quality logit per frame.
Vector quality_logits(const Matrix& frames, const QualityMlp& mlp);
Vector softmax(std::span<const double> logits);

TemplateRepresentation quality_pool(const FrameEmbeddingSet& set, const QualityMlp& mlp);
TemplateRepresentation naive_lstm_pool(const FrameEmbeddingSet& set, const AggregatorParams& params);

/// Row-wise L2 normalization; zero rows stay zero.
void normalize_rows(Matrix& m);

}  // namespace rean
