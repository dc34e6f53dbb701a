#include "rean/aggregator.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rean/errors.hpp"

namespace rean {

namespace {

LstmDirectionParams direction_zeros(std::size_t in, std::size_t hidden) {
  return {Matrix(in, 4 * hidden), Matrix(hidden, 4 * hidden), Matrix(1, 4 * hidden)};
}

void fill_uniform(Matrix& m, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : m.values()) v = dist(rng);
}

LstmDirectionParams direction_init(std::size_t in, std::size_t hidden, std::mt19937_64& rng) {
  auto p = direction_zeros(in, hidden);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in + hidden));
  fill_uniform(p.input_weights, bound, rng);
  fill_uniform(p.recurrent_weights, bound, rng);
  for (std::size_t j = hidden; j < 2 * hidden; ++j) p.bias(0, j) = 1.0;
  return p;
}

template <class Block, class Params>
std::vector<Block> recurrent_blocks(Params& p) {
  std::vector<Block> out;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string layer = "l" + std::to_string(l);
    for (int d = 0; d < 2; ++d) {
      auto& dir = d == 0 ? p.layers[l].forward : p.layers[l].backward;
      const std::string prefix = layer + (d == 0 ? ".fwd." : ".bwd.");
      out.push_back({prefix + "wx", &dir.input_weights});
      out.push_back({prefix + "wh", &dir.recurrent_weights});
      out.push_back({prefix + "b", &dir.bias});
    }
  }
  out.push_back({"head.w", &p.head_weights});
  out.push_back({"head.b", &p.head_bias});
  return out;
}

template <class Block, class Mlp>
std::vector<Block> mlp_blocks(Mlp& m) {
  return {{"mlp.w1", &m.w1}, {"mlp.b1", &m.b1}, {"mlp.w2", &m.w2}, {"mlp.b2", &m.b2}};
}

void require_dim(const Matrix& frames, std::size_t dim, const char* op) {
  if (frames.cols() != dim) {
    throw ShapeError(std::string(op) + ": frames " + frames.shape_string() +
                     " do not match model dimension " + std::to_string(dim));
  }
}

TemplateRepresentation make_rep(const FrameEmbeddingSet& set, Method method, Vector v) {
  return {set.template_id, set.subject_id, method, std::move(v)};
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::Rean:
      return "rean";
    case Method::Avg:
      return "avg";
    case Method::Quality:
      return "quality";
    case Method::NaiveLstm:
      return "naive_lstm";
    case Method::ContextFilter:
      return "context_filter";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::Rean, Method::Avg, Method::Quality, Method::NaiveLstm,
                   Method::ContextFilter}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown aggregation method '" + std::string(name) + "'");
}

std::string_view to_string(Architecture a) {
  switch (a) {
    case Architecture::Rean:
      return "rean";
    case Architecture::NaiveLstm:
      return "naive_lstm";
    case Architecture::QualityPool:
      return "quality";
  }
  return "unknown";
}

Architecture parse_architecture(std::string_view name) {
  for (Architecture a : {Architecture::Rean, Architecture::NaiveLstm, Architecture::QualityPool}) {
    if (to_string(a) == name) return a;
  }
  throw std::invalid_argument("unknown architecture '" + std::string(name) + "'");
}

Method method_for(Architecture a) {
  switch (a) {
    case Architecture::Rean:
      return Method::Rean;
    case Architecture::NaiveLstm:
      return Method::NaiveLstm;
    case Architecture::QualityPool:
      return Method::Quality;
  }
  return Method::Rean;
}

AggregatorParams AggregatorParams::zeros(std::size_t dim, std::size_t hidden) {
  AggregatorParams p;
  p.dim = dim;
  p.hidden = hidden;
  p.layers[0] = {direction_zeros(dim, hidden), direction_zeros(dim, hidden)};
  p.layers[1] = {direction_zeros(2 * hidden, hidden), direction_zeros(2 * hidden, hidden)};
  p.head_weights = Matrix(2 * hidden, dim);
  p.head_bias = Matrix(1, dim);
  return p;
}

AggregatorParams AggregatorParams::initialized(std::size_t dim, std::size_t hidden,
                                               std::mt19937_64& rng) {
  AggregatorParams p;
  p.dim = dim;
  p.hidden = hidden;
  p.layers[0].forward = direction_init(dim, hidden, rng);
  p.layers[0].backward = direction_init(dim, hidden, rng);
  p.layers[1].forward = direction_init(2 * hidden, hidden, rng);
  p.layers[1].backward = direction_init(2 * hidden, hidden, rng);
  p.head_weights = Matrix(2 * hidden, dim);
  fill_uniform(p.head_weights, 1.0 / std::sqrt(static_cast<double>(2 * hidden)), rng);
  p.head_bias = Matrix(1, dim);
  return p;
}

std::vector<NamedBlock> AggregatorParams::blocks() {
  return recurrent_blocks<NamedBlock>(*this);
}
std::vector<ConstNamedBlock> AggregatorParams::blocks() const {
  return recurrent_blocks<ConstNamedBlock>(*this);
}

QualityMlp QualityMlp::zeros(std::size_t dim, std::size_t hidden) {
  return {dim, hidden, Matrix(dim, hidden), Matrix(1, hidden), Matrix(hidden, 1), Matrix(1, 1)};
}

QualityMlp QualityMlp::initialized(std::size_t dim, std::size_t hidden, std::mt19937_64& rng) {
  auto m = zeros(dim, hidden);
  fill_uniform(m.w1, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  fill_uniform(m.w2, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  return m;
}

std::vector<NamedBlock> QualityMlp::blocks() { return mlp_blocks<NamedBlock>(*this); }
std::vector<ConstNamedBlock> QualityMlp::blocks() const {
  return mlp_blocks<ConstNamedBlock>(*this);
}

Model Model::create(Architecture arch, std::size_t dim, std::size_t hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  if (arch == Architecture::QualityPool) return {arch, QualityMlp::initialized(dim, hidden, rng)};
  return {arch, AggregatorParams::initialized(dim, hidden, rng)};
}

Model Model::zeros(Architecture arch, std::size_t dim, std::size_t hidden) {
  if (arch == Architecture::QualityPool) return {arch, QualityMlp::zeros(dim, hidden)};
  return {arch, AggregatorParams::zeros(dim, hidden)};
}

Model Model::zeros_like() const { return zeros(arch, dim(), hidden()); }

std::size_t Model::dim() const {
  return std::visit([](const auto& p) { return p.dim; }, params);
}
std::size_t Model::hidden() const {
  return std::visit([](const auto& p) { return p.hidden; }, params);
}

const AggregatorParams& Model::recurrent() const { return std::get<AggregatorParams>(params); }
AggregatorParams& Model::recurrent() { return std::get<AggregatorParams>(params); }
const QualityMlp& Model::mlp() const { return std::get<QualityMlp>(params); }
QualityMlp& Model::mlp() { return std::get<QualityMlp>(params); }

std::vector<NamedBlock> Model::blocks() {
  return std::visit([](auto& p) { return p.blocks(); }, params);
}
std::vector<ConstNamedBlock> Model::blocks() const {
  return std::visit([](const auto& p) { return p.blocks(); }, params);
}

std::size_t parameter_count(const Model& model) {
  std::size_t n = 0;
  for (const auto& b : model.blocks()) n += b.matrix->size();
  return n;
}

Vector flatten(const Model& model) {
  Vector out;
  out.reserve(parameter_count(model));
  for (const auto& b : model.blocks()) {
    out.insert(out.end(), b.matrix->values().begin(), b.matrix->values().end());
  }
  return out;
}

void unflatten(Model& model, std::span<const double> values) {
  if (values.size() != parameter_count(model)) {
    throw ShapeError("unflatten: " + std::to_string(values.size()) + " values for " +
                     std::to_string(parameter_count(model)) + " parameters");
  }
  std::size_t offset = 0;
  for (auto& b : model.blocks()) {
    auto dst = b.matrix->values();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
    offset += dst.size();
  }
}

// ---------------------------------------------------------------------------

namespace {

// Writes post-activation gates, new cell and new hidden state.
void lstm_step(std::span<const double> x, std::span<const double> h_prev,
               std::span<const double> c_prev, const LstmDirectionParams& p,
               std::span<double> gates, std::span<double> c_out, std::span<double> h_out) {
  const std::size_t H = p.hidden_size();
  const std::size_t G = 4 * H;
  const auto bias = p.bias.row(0);
  std::copy(bias.begin(), bias.end(), gates.begin());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double xk = x[k];
    if (xk == 0.0) continue;
    const double* w = p.input_weights.row(k).data();
    for (std::size_t j = 0; j < G; ++j) gates[j] += xk * w[j];
  }
  for (std::size_t k = 0; k < H; ++k) {
    const double hk = h_prev[k];
    if (hk == 0.0) continue;
    const double* w = p.recurrent_weights.row(k).data();
    for (std::size_t j = 0; j < G; ++j) gates[j] += hk * w[j];
  }
  for (std::size_t j = 0; j < H; ++j) {
    const double i = sigmoid(gates[j]);
    const double f = sigmoid(gates[H + j]);
    const double g = std::tanh(gates[2 * H + j]);
    const double o = sigmoid(gates[3 * H + j]);
    gates[j] = i;
    gates[H + j] = f;
    gates[2 * H + j] = g;
    gates[3 * H + j] = o;
    c_out[j] = f * c_prev[j] + i * g;
    h_out[j] = o * std::tanh(c_out[j]);
  }
}

void check_direction(std::size_t in, std::size_t h, const LstmDirectionParams& p, const char* op) {
  const std::size_t H = p.hidden_size();
  if (in != p.input_size() || h != H || p.input_weights.cols() != 4 * H ||
      p.recurrent_weights.cols() != 4 * H || p.bias.rows() != 1 || p.bias.cols() != 4 * H) {
    throw ShapeError(std::string(op) + ": input of size " + std::to_string(in) +
                     ", state of size " + std::to_string(h) + " vs weights " +
                     p.input_weights.shape_string() + " / " + p.recurrent_weights.shape_string());
  }
}

}  // namespace

LstmState lstm_cell_forward(std::span<const double> x, std::span<const double> h_prev,
                            std::span<const double> c_prev, const LstmDirectionParams& params) {
  check_direction(x.size(), h_prev.size(), params, "lstm_cell_forward");
  if (c_prev.size() != h_prev.size()) throw ShapeError("lstm_cell_forward: cell/hidden mismatch");
  const std::size_t H = params.hidden_size();
  Vector gates(4 * H);
  LstmState out{Vector(H), Vector(H)};
  lstm_step(x, h_prev, c_prev, params, gates, out.cell, out.hidden);
  return out;
}

LstmDirectionTrace run_lstm_direction(const Matrix& inputs, const LstmDirectionParams& params,
                                      bool reverse) {
  const std::size_t N = inputs.rows();
  const std::size_t H = params.hidden_size();
  check_direction(inputs.cols(), H, params, "run_lstm_direction");
  LstmDirectionTrace trace{Matrix(N, 4 * H), Matrix(N, H), Matrix(N, H)};
  const Vector zeros(H, 0.0);
  std::span<const double> h_prev = zeros;
  std::span<const double> c_prev = zeros;
  for (std::size_t step = 0; step < N; ++step) {
    const std::size_t t = reverse ? N - 1 - step : step;
    lstm_step(inputs.row(t), h_prev, c_prev, params, trace.gates.row(t), trace.cells.row(t),
              trace.hidden.row(t));
    h_prev = trace.hidden.row(t);
    c_prev = trace.cells.row(t);
  }
  return trace;
}

BiLstmTrace bilstm_forward_traced(const Matrix& frames, const AggregatorParams& params) {
  if (frames.rows() == 0) throw std::invalid_argument("bilstm_forward: empty template");
  require_dim(frames, params.dim, "bilstm_forward");
  const std::size_t N = frames.rows();
  const std::size_t H = params.hidden;
  BiLstmTrace trace;
  const Matrix* input = &frames;
  for (std::size_t l = 0; l < 2; ++l) {
    trace.directions[l][0] = run_lstm_direction(*input, params.layers[l].forward, false);
    trace.directions[l][1] = run_lstm_direction(*input, params.layers[l].backward, true);
    Matrix out(N, 2 * H);
    for (std::size_t t = 0; t < N; ++t) {
      auto dst = out.row(t);
      const auto f = trace.directions[l][0].hidden.row(t);
      const auto b = trace.directions[l][1].hidden.row(t);
      std::copy(f.begin(), f.end(), dst.begin());
      std::copy(b.begin(), b.end(), dst.begin() + static_cast<std::ptrdiff_t>(H));
    }
    trace.outputs[l] = std::move(out);
    input = &trace.outputs[l];
  }
  return trace;
}

Matrix bilstm_forward(const Matrix& frames, const AggregatorParams& params) {
  return std::move(bilstm_forward_traced(frames, params).outputs[1]);
}

Matrix quality_head(const Matrix& hidden, const AggregatorParams& params) {
  if (hidden.cols() != 2 * params.hidden) {
    throw ShapeError("quality_head: hidden " + hidden.shape_string() + " expects " +
                     std::to_string(2 * params.hidden) + " columns");
  }
  return affine_transform(hidden, params.head_weights, params.head_bias.row(0));
}

AttentionWeights normalize_attention(const Matrix& logits) {
  const std::size_t N = logits.rows();
  const std::size_t D = logits.cols();
  if (N == 0) throw std::invalid_argument("normalize_attention: empty template");
  Matrix w(N, D);
  for (std::size_t j = 0; j < D; ++j) {
    double mx = logits(0, j);
    for (std::size_t i = 1; i < N; ++i) mx = std::max(mx, logits(i, j));
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      w(i, j) = std::exp(logits(i, j) - mx);
      total += w(i, j);
    }
    for (std::size_t i = 0; i < N; ++i) w(i, j) /= total;
  }
  return {std::move(w)};
}

Vector aggregate_weighted(const Matrix& frames, const AttentionWeights& weights) {
  if (!frames.same_shape(weights.weights)) {
    throw ShapeError("aggregate_weighted: frames " + frames.shape_string() + ", weights " +
                     weights.weights.shape_string());
  }
  Vector r(frames.cols(), 0.0);
  for (std::size_t i = 0; i < frames.rows(); ++i) {
    const auto f = frames.row(i);
    const auto w = weights.weights.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += f[j] * w[j];
  }
  return r;
}

TemplateRepresentation rean_aggregate(const FrameEmbeddingSet& set,
                                      const AggregatorParams& params) {
  if (set.size() == 0) return make_rep(set, Method::Rean, Vector(params.dim, 0.0));
  const Matrix logits = quality_head(bilstm_forward(set.frames, params), params);
  return make_rep(set, Method::Rean, aggregate_weighted(set.frames, normalize_attention(logits)));
}

TemplateRepresentation avg_pool(const FrameEmbeddingSet& set) {
  Vector r(set.dim(), 0.0);
  if (set.size() == 0) return make_rep(set, Method::Avg, std::move(r));
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto f = set.frames.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += f[j];
  }
  const double inv = 1.0 / static_cast<double>(set.size());
  for (double& v : r) v *= inv;
  return make_rep(set, Method::Avg, std::move(r));
}

Vector quality_logits(const Matrix& frames, const QualityMlp& mlp) {
  require_dim(frames, mlp.dim, "quality_logits");
  if (mlp.w2.cols() != 1 || mlp.w1.cols() != mlp.w2.rows()) {
    throw ShapeError("quality_logits: MLP must map " + std::to_string(mlp.dim) + " -> 1");
  }
  const Matrix hidden = activation(affine_transform(frames, mlp.w1, mlp.b1.row(0)), Activation::Relu);
  const Matrix out = affine_transform(hidden, mlp.w2, mlp.b2.row(0));
  return {out.values().begin(), out.values().end()};
}

Vector softmax(std::span<const double> logits) {
  Vector w(logits.size());
  if (logits.empty()) return w;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(logits[i] - mx);
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

TemplateRepresentation quality_pool(const FrameEmbeddingSet& set, const QualityMlp& mlp) {
  Vector r(mlp.dim, 0.0);
  if (set.size() == 0) return make_rep(set, Method::Quality, std::move(r));
  const Vector w = softmax(quality_logits(set.frames, mlp));
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto f = set.frames.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += w[i] * f[j];
  }
  return make_rep(set, Method::Quality, std::move(r));
}

TemplateRepresentation naive_lstm_pool(const FrameEmbeddingSet& set,
                                       const AggregatorParams& params) {
  if (set.size() == 0) return make_rep(set, Method::NaiveLstm, Vector(params.dim, 0.0));
  const Matrix hidden = bilstm_forward(set.frames, params);
  const std::size_t H = params.hidden;
  const std::size_t last = set.size() - 1;
  // forward direction ends at t = N-1, backward direction ends at t = 0
  Matrix final_state(1, 2 * H);
  for (std::size_t k = 0; k < H; ++k) {
    final_state(0, k) = hidden(last, k);
    final_state(0, H + k) = hidden(0, H + k);
  }
  const Matrix out = quality_head(final_state, params);
  return make_rep(set, Method::NaiveLstm, Vector(out.values().begin(), out.values().end()));
}

void normalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const double n = l2_norm(row);
    if (n > 0.0) {
      for (double& v : row) v /= n;
    }
  }
}

}  // namespace rean
