#include "rean/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <thread>

#include "rean/errors.hpp"

namespace rean {

// ---------------------------------------------------------------------------
// Triplet loss

TripletLossResult triplet_loss(std::span<const TemplateRepresentation> reps,
                               const TripletLossConfig& cfg) {
  if (!(cfg.margin > 0.0)) throw std::invalid_argument("triplet_loss: margin must be > 0");
  const std::size_t B = reps.size();
  std::map<std::string, std::size_t> per_subject;
  for (const auto& r : reps) ++per_subject[r.subject_id];
  const bool has_pair = std::any_of(per_subject.begin(), per_subject.end(),
                                    [](const auto& kv) { return kv.second >= 2; });
  if (per_subject.size() < 2 || !has_pair) {
    throw InsufficientDataError("triplet_loss: need >= 2 subjects and a subject with >= 2 "
                                "templates; got " + std::to_string(per_subject.size()) +
                                " subject(s) over " + std::to_string(B) + " template(s)");
  }
  const std::size_t D = reps.front().vector.size();
  for (const auto& r : reps) {
    if (r.vector.size() != D) throw ShapeError("triplet_loss: representation dimensions differ");
  }

  Matrix dist(B, B);
  for (std::size_t a = 0; a < B; ++a) {
    for (std::size_t b = a + 1; b < B; ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < D; ++j) {
        const double d = reps[a].vector[j] - reps[b].vector[j];
        s += d * d;
      }
      dist(a, b) = dist(b, a) = s;
    }
  }

  TripletLossResult result;
  result.gradients.assign(B, Vector(D, 0.0));
  double total = 0.0;
  double excess = 0.0;
  for (std::size_t a = 0; a < B; ++a) {
    for (std::size_t p = 0; p < B; ++p) {
      if (p == a || reps[p].subject_id != reps[a].subject_id) continue;
      for (std::size_t n = 0; n < B; ++n) {
        if (reps[n].subject_id == reps[a].subject_id) continue;
        ++result.triplet_count;
        const double term = dist(a, p) - dist(a, n) + cfg.margin;
        if (!(term > 0.0)) continue;
        ++result.hard_count;
        total += term;
        excess += dist(a, p) - dist(a, n);
        // d/da = 2(n - p), d/dp = 2(p - a), d/dn = 2(a - n)
        auto& ga = result.gradients[a];
        auto& gp = result.gradients[p];
        auto& gn = result.gradients[n];
        const auto& va = reps[a].vector;
        const auto& vp = reps[p].vector;
        const auto& vn = reps[n].vector;
        for (std::size_t j = 0; j < D; ++j) {
          ga[j] += 2.0 * (vn[j] - vp[j]);
          gp[j] += 2.0 * (vp[j] - va[j]);
          gn[j] += 2.0 * (va[j] - vn[j]);
        }
      }
    }
  }
  if (result.hard_count == 0) {
    for (auto& g : result.gradients) std::fill(g.begin(), g.end(), 0.0);
    return result;
  }
  const double inv = 1.0 / static_cast<double>(result.hard_count);
  result.loss = total * inv;
  result.excess = excess * inv;
  for (auto& g : result.gradients) {
    for (double& v : g) v *= inv;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Batch sampling

void BatchSpec::validate() const {
  if (subjects_per_batch < 1 || frames_per_template < 1) {
    throw std::invalid_argument("BatchSpec: subjects_per_batch and frames_per_template must be >= 1");
  }
  if (templates_per_subject < 2) {
    throw std::invalid_argument("BatchSpec: templates_per_subject must be >= 2");
  }
}

Matrix fit_frames(const Matrix& frames, std::size_t count, std::size_t offset) {
  const std::size_t N = frames.rows();
  if (N == 0) throw std::invalid_argument("fit_frames: empty template");
  Matrix out(count, frames.cols());
  if (N >= count) {
    if (offset + count > N) throw std::out_of_range("fit_frames: window past end of template");
    for (std::size_t t = 0; t < count; ++t) {
      std::copy_n(frames.row(offset + t).begin(), frames.cols(), out.row(t).begin());
    }
  } else {
    for (std::size_t t = 0; t < count; ++t) {
      std::copy_n(frames.row(t % N).begin(), frames.cols(), out.row(t).begin());
    }
  }
  return out;
}

namespace {

// Subjects in first-appearance order with the indices of their usable templates.
std::vector<std::pair<std::string, std::vector<std::size_t>>> group_by_subject(
    std::span<const FrameEmbeddingSet> templates) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> groups;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < templates.size(); ++i) {
    if (templates[i].size() == 0) continue;
    auto [it, inserted] = index.try_emplace(templates[i].subject_id, groups.size());
    if (inserted) groups.push_back({templates[i].subject_id, {}});
    groups[it->second].second.push_back(i);
  }
  return groups;
}

}  // namespace

std::vector<FrameEmbeddingSet> sample_batch(std::span<const FrameEmbeddingSet> templates,
                                            const BatchSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  auto groups = group_by_subject(templates);
  std::vector<std::size_t> eligible;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].second.size() >= spec.templates_per_subject) eligible.push_back(g);
  }
  if (eligible.size() < spec.subjects_per_batch) {
    throw InsufficientDataError(
        "sample_batch: need " + std::to_string(spec.subjects_per_batch) + " subjects with >= " +
        std::to_string(spec.templates_per_subject) + " non-empty templates, found " +
        std::to_string(eligible.size()) + " (short by " +
        std::to_string(spec.subjects_per_batch - eligible.size()) + ")");
  }
  // Partial Fisher-Yates keeps the draw independent of the pool tail.
  auto draw = [&rng](std::vector<std::size_t>& pool, std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(k);
  };
  draw(eligible, spec.subjects_per_batch);

  std::vector<FrameEmbeddingSet> batch;
  batch.reserve(spec.subjects_per_batch * spec.templates_per_subject);
  for (std::size_t g : eligible) {
    std::vector<std::size_t> pool = groups[g].second;
    draw(pool, spec.templates_per_subject);
    for (std::size_t idx : pool) {
      const auto& src = templates[idx];
      std::size_t offset = 0;
      if (src.size() > spec.frames_per_template) {
        std::uniform_int_distribution<std::size_t> start(0, src.size() - spec.frames_per_template);
        offset = start(rng);
      }
      batch.push_back({src.template_id, src.subject_id,
                       fit_frames(src.frames, spec.frames_per_template, offset)});
    }
  }
  return batch;
}

std::vector<FrameEmbeddingSet> sample_batch(std::span<const FrameEmbeddingSet> templates,
                                            const BatchSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  return sample_batch(templates, spec, rng);
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

void add_outer(Matrix& acc, std::span<const double> left, std::span<const double> right) {
  for (std::size_t k = 0; k < left.size(); ++k) {
    const double lk = left[k];
    if (lk == 0.0) continue;
    double* dst = acc.row(k).data();
    for (std::size_t j = 0; j < right.size(); ++j) dst[j] += lk * right[j];
  }
}

// Reverse pass of one LSTM direction. d_out holds dLoss/dh for every time step
// (columns [col, col+H) of a N x 2H matrix); d_inputs, when non-null, receives
// dLoss/dx added in.
void lstm_direction_backward(const Matrix& inputs, const LstmDirectionParams& p,
                             const LstmDirectionTrace& tr, const Matrix& d_out, std::size_t col,
                             bool reverse, LstmDirectionParams& g, Matrix* d_inputs) {
  const std::size_t N = inputs.rows();
  const std::size_t H = p.hidden_size();
  const std::size_t G = 4 * H;
  const std::size_t in = p.input_size();
  Vector dh_next(H, 0.0), dc_next(H, 0.0), da(G), dh(H);
  const Vector zeros(H, 0.0);
  for (std::size_t step = N; step-- > 0;) {
    const std::size_t t = reverse ? N - 1 - step : step;
    std::span<const double> h_prev = zeros;
    std::span<const double> c_prev = zeros;
    if (step > 0) {
      const std::size_t tp = reverse ? t + 1 : t - 1;
      h_prev = tr.hidden.row(tp);
      c_prev = tr.cells.row(tp);
    }
    const auto gates = tr.gates.row(t);
    const auto cell = tr.cells.row(t);
    const auto dext = d_out.row(t);
    for (std::size_t j = 0; j < H; ++j) {
      const double i = gates[j], f = gates[H + j], gg = gates[2 * H + j], o = gates[3 * H + j];
      const double tc = std::tanh(cell[j]);
      const double dhj = dext[col + j] + dh_next[j];
      const double d_o = dhj * tc;
      const double dc = dc_next[j] + dhj * o * (1.0 - tc * tc);
      da[j] = dc * gg * i * (1.0 - i);
      da[H + j] = dc * c_prev[j] * f * (1.0 - f);
      da[2 * H + j] = dc * i * (1.0 - gg * gg);
      da[3 * H + j] = d_o * o * (1.0 - o);
      dc_next[j] = dc * f;
    }
    auto gb = g.bias.row(0);
    for (std::size_t j = 0; j < G; ++j) gb[j] += da[j];
    add_outer(g.input_weights, inputs.row(t), da);
    add_outer(g.recurrent_weights, h_prev, da);
    if (d_inputs != nullptr) {
      auto dx = d_inputs->row(t);
      for (std::size_t k = 0; k < in; ++k) {
        const double* w = p.input_weights.row(k).data();
        double s = 0.0;
        for (std::size_t j = 0; j < G; ++j) s += w[j] * da[j];
        dx[k] += s;
      }
    }
    for (std::size_t k = 0; k < H; ++k) {
      const double* w = p.recurrent_weights.row(k).data();
      double s = 0.0;
      for (std::size_t j = 0; j < G; ++j) s += w[j] * da[j];
      dh_next[k] = s;
    }
  }
}

// Backpropagates dLoss/d(layer-2 output) through both layers.
void bilstm_backward(const Matrix& frames, const AggregatorParams& p, const BiLstmTrace& tr,
                     const Matrix& d_top, AggregatorParams& g) {
  const std::size_t H = p.hidden;
  Matrix d_mid(frames.rows(), 2 * H);
  lstm_direction_backward(tr.outputs[0], p.layers[1].forward, tr.directions[1][0], d_top, 0, false,
                          g.layers[1].forward, &d_mid);
  lstm_direction_backward(tr.outputs[0], p.layers[1].backward, tr.directions[1][1], d_top, H, true,
                          g.layers[1].backward, &d_mid);
  lstm_direction_backward(frames, p.layers[0].forward, tr.directions[0][0], d_mid, 0, false,
                          g.layers[0].forward, nullptr);
  lstm_direction_backward(frames, p.layers[0].backward, tr.directions[0][1], d_mid, H, true,
                          g.layers[0].backward, nullptr);
}

void backward_rean(const AggregatorParams& p, const Matrix& frames, const ReanTrace& tr,
                   std::span<const double> d_rep, AggregatorParams& g) {
  const std::size_t N = frames.rows();
  const std::size_t D = frames.cols();
  const std::size_t H2 = 2 * p.hidden;
  const Matrix& w = tr.attention.weights;
  // dLoss/dw_ij = d_rep_j f_ij, then the per-column softmax Jacobian.
  Matrix d_logits(N, D);
  for (std::size_t j = 0; j < D; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i) s += w(i, j) * frames(i, j);
    for (std::size_t i = 0; i < N; ++i) d_logits(i, j) = w(i, j) * d_rep[j] * (frames(i, j) - s);
  }
  const Matrix& top = tr.lstm.outputs[1];
  Matrix d_top(N, H2);
  auto gb = g.head_bias.row(0);
  for (std::size_t t = 0; t < N; ++t) {
    const auto dq = d_logits.row(t);
    for (std::size_t j = 0; j < D; ++j) gb[j] += dq[j];
    add_outer(g.head_weights, top.row(t), dq);
    auto dh = d_top.row(t);
    for (std::size_t k = 0; k < H2; ++k) dh[k] = dot(p.head_weights.row(k), dq);
  }
  bilstm_backward(frames, p, tr.lstm, d_top, g);
}

void backward_naive(const AggregatorParams& p, const Matrix& frames, const NaiveLstmTrace& tr,
                    std::span<const double> d_rep, AggregatorParams& g) {
  const std::size_t N = frames.rows();
  const std::size_t H = p.hidden;
  auto gb = g.head_bias.row(0);
  for (std::size_t j = 0; j < d_rep.size(); ++j) gb[j] += d_rep[j];
  add_outer(g.head_weights, tr.final_state.row(0), d_rep);
  Matrix d_top(N, 2 * H);
  for (std::size_t k = 0; k < H; ++k) {
    d_top(N - 1, k) += dot(p.head_weights.row(k), d_rep);
    d_top(0, H + k) += dot(p.head_weights.row(H + k), d_rep);
  }
  bilstm_backward(frames, p, tr.lstm, d_top, g);
}

void backward_quality(const QualityMlp& m, const Matrix& frames, const QualityTrace& tr,
                      std::span<const double> d_rep, QualityMlp& g) {
  const std::size_t N = frames.rows();
  const std::size_t K = m.hidden;
  Vector dw(N);
  for (std::size_t i = 0; i < N; ++i) dw[i] = dot(d_rep, frames.row(i));
  const double mean = dot(tr.weights, dw);
  Vector dz(K);
  for (std::size_t i = 0; i < N; ++i) {
    const double ds = tr.weights[i] * (dw[i] - mean);
    g.b2(0, 0) += ds;
    const auto a = tr.hidden.row(i);
    const auto z = tr.pre_activation.row(i);
    for (std::size_t k = 0; k < K; ++k) {
      g.w2(k, 0) += a[k] * ds;
      dz[k] = z[k] > 0.0 ? ds * m.w2(k, 0) : 0.0;
    }
    auto gb1 = g.b1.row(0);
    for (std::size_t k = 0; k < K; ++k) gb1[k] += dz[k];
    add_outer(g.w1, frames.row(i), dz);
  }
}

}  // namespace

Vector forward_traced(const Model& model, const Matrix& frames, ForwardTrace& trace) {
  if (frames.rows() == 0) {
    trace = std::monostate{};
    return Vector(model.dim(), 0.0);
  }
  switch (model.arch) {
    case Architecture::Rean: {
      const auto& p = model.recurrent();
      ReanTrace tr;
      tr.lstm = bilstm_forward_traced(frames, p);
      tr.attention = normalize_attention(quality_head(tr.lstm.outputs[1], p));
      Vector rep = aggregate_weighted(frames, tr.attention);
      trace = std::move(tr);
      return rep;
    }
    case Architecture::NaiveLstm: {
      const auto& p = model.recurrent();
      const std::size_t H = p.hidden;
      const std::size_t N = frames.rows();
      NaiveLstmTrace tr;
      tr.lstm = bilstm_forward_traced(frames, p);
      tr.final_state = Matrix(1, 2 * H);
      for (std::size_t k = 0; k < H; ++k) {
        tr.final_state(0, k) = tr.lstm.outputs[1](N - 1, k);
        tr.final_state(0, H + k) = tr.lstm.outputs[1](0, H + k);
      }
      const Matrix out = quality_head(tr.final_state, p);
      trace = std::move(tr);
      return {out.values().begin(), out.values().end()};
    }
    case Architecture::QualityPool: {
      const auto& m = model.mlp();
      if (frames.cols() != m.dim) throw ShapeError("forward_traced: frame dimension mismatch");
      QualityTrace tr;
      tr.pre_activation = affine_transform(frames, m.w1, m.b1.row(0));
      tr.hidden = activation(tr.pre_activation, Activation::Relu);
      const Matrix logits = affine_transform(tr.hidden, m.w2, m.b2.row(0));
      tr.weights = softmax(logits.values());
      Vector rep(m.dim, 0.0);
      for (std::size_t i = 0; i < frames.rows(); ++i) {
        const auto f = frames.row(i);
        for (std::size_t j = 0; j < rep.size(); ++j) rep[j] += tr.weights[i] * f[j];
      }
      trace = std::move(tr);
      return rep;
    }
  }
  throw std::logic_error("forward_traced: unknown architecture");
}

void backward_template(const Model& model, const Matrix& frames, const ForwardTrace& trace,
                       std::span<const double> d_rep, Model& grads) {
  if (std::holds_alternative<std::monostate>(trace)) return;
  switch (model.arch) {
    case Architecture::Rean:
      backward_rean(model.recurrent(), frames, std::get<ReanTrace>(trace), d_rep,
                    grads.recurrent());
      return;
    case Architecture::NaiveLstm:
      backward_naive(model.recurrent(), frames, std::get<NaiveLstmTrace>(trace), d_rep,
                     grads.recurrent());
      return;
    case Architecture::QualityPool:
      backward_quality(model.mlp(), frames, std::get<QualityTrace>(trace), d_rep, grads.mlp());
      return;
  }
}

namespace {

template <class Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += threads) fn(i);
    });
  }
}

void add_into(Model& acc, const Model& g) {
  auto dst = acc.blocks();
  const auto src = g.blocks();
  for (std::size_t b = 0; b < dst.size(); ++b) {
    auto d = dst[b].matrix->values();
    const auto s = src[b].matrix->values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }
}

std::vector<TemplateRepresentation> forward_batch(const Model& model,
                                                  std::span<const FrameEmbeddingSet> batch,
                                                  std::vector<ForwardTrace>* traces,
                                                  std::size_t threads) {
  std::vector<TemplateRepresentation> reps(batch.size());
  if (traces != nullptr) traces->assign(batch.size(), ForwardTrace{});
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    ForwardTrace local;
    ForwardTrace& tr = traces != nullptr ? (*traces)[i] : local;
    reps[i] = {batch[i].template_id, batch[i].subject_id, method_for(model.arch),
               forward_traced(model, batch[i].frames, tr)};
  });
  return reps;
}

}  // namespace

BatchGradient compute_batch_gradient(const Model& model, std::span<const FrameEmbeddingSet> batch,
                                     const TripletLossConfig& cfg, std::size_t threads) {
  std::vector<ForwardTrace> traces;
  const auto reps = forward_batch(model, batch, &traces, threads);
  const auto loss = triplet_loss(reps, cfg);

  BatchGradient out{loss.loss, loss.hard_count, model.zeros_like()};
  if (loss.hard_count == 0) return out;

  // Templates are processed in waves; each wave's gradients are added in index
  // order, which reproduces the serial summation exactly.
  const std::size_t wave = std::max<std::size_t>(1, threads);
  std::vector<Model> slots(std::min(wave, batch.size()), model.zeros_like());
  for (std::size_t start = 0; start < batch.size(); start += wave) {
    const std::size_t count = std::min(wave, batch.size() - start);
    parallel_for(count, threads, [&](std::size_t k) {
      for (auto& b : slots[k].blocks()) b.matrix->fill(0.0);
      backward_template(model, batch[start + k].frames, traces[start + k],
                        loss.gradients[start + k], slots[k]);
    });
    for (std::size_t k = 0; k < count; ++k) add_into(out.gradients, slots[k]);
  }
  return out;
}

double batch_loss(const Model& model, std::span<const FrameEmbeddingSet> batch,
                  const TripletLossConfig& cfg) {
  return triplet_loss(forward_batch(model, batch, nullptr, 1), cfg).loss;
}

namespace {

using Wide = long double;

// Representation with the pooling step accumulated in extended precision. The
// networks producing the logits still run in double.
std::vector<Wide> wide_representation(const Model& model, const Matrix& frames) {
  const std::size_t N = frames.rows();
  const std::size_t D = model.dim();
  std::vector<Wide> r(D, 0.0L);
  if (N == 0) return r;
  switch (model.arch) {
    case Architecture::NaiveLstm: {
      const Vector v = naive_lstm_pool({"", "", frames}, model.recurrent()).vector;
      return {v.begin(), v.end()};
    }
    case Architecture::Rean: {
      const Matrix q = quality_head(bilstm_forward(frames, model.recurrent()), model.recurrent());
      for (std::size_t j = 0; j < D; ++j) {
        double mx = q(0, j);
        for (std::size_t i = 1; i < N; ++i) mx = std::max(mx, q(i, j));
        Wide total = 0.0L, acc = 0.0L;
        for (std::size_t i = 0; i < N; ++i) {
          const Wide e = std::exp(static_cast<Wide>(q(i, j)) - mx);
          total += e;
          acc += e * frames(i, j);
        }
        r[j] = acc / total;
      }
      return r;
    }
    case Architecture::QualityPool: {
      const Vector s = quality_logits(frames, model.mlp());
      const double mx = *std::max_element(s.begin(), s.end());
      Wide total = 0.0L;
      std::vector<Wide> e(N);
      for (std::size_t i = 0; i < N; ++i) total += e[i] = std::exp(static_cast<Wide>(s[i]) - mx);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < D; ++j) r[j] += e[i] / total * frames(i, j);
      return r;
    }
  }
  return r;
}

// Mean over hard triplets of |a-p|^2 - |a-n|^2, in extended precision.
Wide wide_excess(const Model& model, std::span<const FrameEmbeddingSet> batch,
                 const TripletLossConfig& cfg) {
  std::vector<std::vector<Wide>> reps;
  for (const auto& t : batch) reps.push_back(wide_representation(model, t.frames));
  auto dist = [&](std::size_t a, std::size_t b) {
    Wide s = 0.0L;
    for (std::size_t j = 0; j < reps[a].size(); ++j) s += (reps[a][j] - reps[b][j]) * (reps[a][j] - reps[b][j]);
    return s;
  };
  Wide total = 0.0L;
  std::size_t hard = 0;
  for (std::size_t a = 0; a < batch.size(); ++a)
    for (std::size_t p = 0; p < batch.size(); ++p) {
      if (p == a || batch[p].subject_id != batch[a].subject_id) continue;
      for (std::size_t n = 0; n < batch.size(); ++n) {
        if (batch[n].subject_id == batch[a].subject_id) continue;
        const Wide diff = dist(a, p) - dist(a, n);
        if (diff + cfg.margin > 0.0L) {
          total += diff;
          ++hard;
        }
      }
    }
  return hard == 0 ? 0.0L : total / static_cast<Wide>(hard);
}

}  // namespace

GradientCheckReport gradient_check(const Model& model, std::span<const FrameEmbeddingSet> batch,
                                   const TripletLossConfig& cfg, double eps,
                                   std::size_t max_coords, std::uint64_t seed) {
  const BatchGradient analytic = compute_batch_gradient(model, batch, cfg);
  const Vector grad = flatten(analytic.gradients);
  const Vector theta = flatten(model);

  std::vector<std::size_t> coords(theta.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (max_coords != 0 && max_coords < coords.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }

  // Differentiate the loss minus its value at theta: the margin constant and
  // the base value cancel in extended precision before rounding to double,
  // which keeps central differences accurate on gradients near 1e-8.
  Model probe = model;
  const Wide base = wide_excess(model, batch, cfg);
  const ScalarFunction f = [&](std::span<const double> values) {
    unflatten(probe, values);
    return static_cast<double>(wide_excess(probe, batch, cfg) - base);
  };
  const Vector numeric = finite_difference_gradient(f, theta, eps, coords);
  return compare_gradients(grad, numeric, coords, eps);
}

void require_finite(const Model& grads) {
  for (const auto& b : grads.blocks()) {
    if (!all_finite(b.matrix->values())) {
      throw NonFiniteError("non-finite gradient in parameter block '" + b.name + "'", b.name);
    }
  }
}

double clip_global_norm(Model& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& b : std::as_const(grads).blocks()) sq += dot(b.matrix->values(), b.matrix->values());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& b : grads.blocks()) {
      for (double& v : b.matrix->values()) v *= scale;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Adam

AdamState AdamState::for_model(const Model& model, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto& b : model.blocks()) {
    s.first_moment.emplace_back(b.matrix->rows(), b.matrix->cols());
    s.second_moment.emplace_back(b.matrix->rows(), b.matrix->cols());
  }
  return s;
}

void adam_step(Model& params, const Model& grads, AdamState& state) {
  auto p = params.blocks();
  const auto g = grads.blocks();
  if (p.size() != g.size() || p.size() != state.first_moment.size() ||
      p.size() != state.second_moment.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment block counts differ");
  }
  for (std::size_t b = 0; b < p.size(); ++b) {
    if (!p[b].matrix->same_shape(*g[b].matrix) || !p[b].matrix->same_shape(state.first_moment[b]) ||
        !p[b].matrix->same_shape(state.second_moment[b])) {
      throw ShapeError("adam_step: shape mismatch in block '" + p[b].name + "': params " +
                       p[b].matrix->shape_string() + ", grads " + g[b].matrix->shape_string());
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t b = 0; b < p.size(); ++b) {
    auto theta = p[b].matrix->values();
    const auto grad = g[b].matrix->values();
    auto m = state.first_moment[b].values();
    auto v = state.second_moment[b].values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      theta[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

GradientCheckFailure::GradientCheckFailure(GradientCheckReport report)
    : std::runtime_error("gradient check failed: max relative error " +
                         std::to_string(report.max_relative_error) + " at parameter " +
                         std::to_string(report.worst_parameter_index)),
      report_(report) {}

std::size_t default_batches_per_epoch(std::span<const FrameEmbeddingSet> train,
                                      const BatchSpec& spec) {
  const std::size_t per_batch = spec.subjects_per_batch * spec.templates_per_subject;
  const std::size_t usable = static_cast<std::size_t>(std::count_if(
      train.begin(), train.end(), [](const FrameEmbeddingSet& s) { return s.size() > 0; }));
  return std::max<std::size_t>(1, (usable + per_batch - 1) / per_batch);
}

namespace {

std::vector<FrameEmbeddingSet> validation_batch(std::span<const FrameEmbeddingSet> val,
                                                std::size_t frames) {
  std::vector<FrameEmbeddingSet> out;
  for (const auto& s : val) {
    if (s.size() == 0) continue;
    out.push_back({s.template_id, s.subject_id, fit_frames(s.frames, frames, 0)});
  }
  return out;
}

bool usable_for_triplets(std::span<const FrameEmbeddingSet> batch) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : batch) ++counts[s.subject_id];
  return counts.size() >= 2 &&
         std::any_of(counts.begin(), counts.end(), [](const auto& kv) { return kv.second >= 2; });
}

// First two subjects of the batch, two templates each, at most four frames.
std::vector<FrameEmbeddingSet> gradient_check_slice(std::span<const FrameEmbeddingSet> batch,
                                                    std::size_t templates_per_subject) {
  std::vector<FrameEmbeddingSet> out;
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t k = 0; k < 2; ++k) {
      const auto& src = batch[s * templates_per_subject + k];
      const std::size_t n = std::min<std::size_t>(src.size(), 4);
      out.push_back({src.template_id, src.subject_id, fit_frames(src.frames, n, 0)});
    }
  }
  return out;
}

}  // namespace

TrainReport fit(std::span<const FrameEmbeddingSet> train, std::span<const FrameEmbeddingSet> val,
                Model initial, const FitConfig& cfg,
                const std::function<void(const EpochStats&)>& on_epoch,
                const AdamState* optimizer) {
  cfg.batch.validate();
  if (cfg.batch.subjects_per_batch < 2) {
    throw std::invalid_argument("fit: triplets need subjects_per_batch >= 2");
  }
  TrainReport report{{}, {}, std::move(initial), {}};
  report.optimizer = optimizer != nullptr ? *optimizer
                                          : AdamState::for_model(report.final_model, cfg.lr);
  report.optimizer.lr = cfg.lr;
  if (cfg.epochs == 0) return report;

  std::mt19937_64 rng(cfg.seed);
  const std::size_t per_epoch = cfg.batches_per_epoch != 0
                                    ? cfg.batches_per_epoch
                                    : default_batches_per_epoch(train, cfg.batch);
  const auto val_batch = validation_batch(val, cfg.batch.frames_per_template);
  const bool has_val = usable_for_triplets(val_batch);
  Model& model = report.final_model;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    double hard_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const auto batch = sample_batch(train, cfg.batch, rng);
      if (epoch == 0 && b == 0) {
        const auto slice = gradient_check_slice(batch, cfg.batch.templates_per_subject);
        report.gradient_check = gradient_check(model, slice, cfg.loss, cfg.gradcheck_eps,
                                               cfg.gradcheck_coords, cfg.seed);
        if (!(report.gradient_check.max_relative_error <= cfg.gradcheck_tolerance)) {
          throw GradientCheckFailure(report.gradient_check);
        }
      }
      BatchGradient bg = compute_batch_gradient(model, batch, cfg.loss, cfg.threads);
      require_finite(bg.gradients);
      clip_global_norm(bg.gradients, cfg.clip_norm);
      adam_step(model, bg.gradients, report.optimizer);
      loss_sum += bg.loss;
      hard_sum += static_cast<double>(bg.hard_count);
    }
    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.mean_loss = loss_sum / static_cast<double>(per_epoch);
    stats.mean_hard_triplets = hard_sum / static_cast<double>(per_epoch);
    stats.val_loss = has_val ? batch_loss(model, val_batch, cfg.loss)
                             : std::numeric_limits<double>::quiet_NaN();
    report.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return report;
}

}  // namespace rean
