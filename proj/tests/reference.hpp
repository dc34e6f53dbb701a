#pragma once
// Straight-line reference implementations used as test oracles. They share no
// code with the library: every loop is written out from the model definition,
// and the scalar type is a template parameter so the same graph can be
// evaluated in extended precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "rean/aggregator.hpp"

namespace ref {

template <class T>
using Mat = std::vector<std::vector<T>>;  // row-major, [row][col]

template <class T>
Mat<T> to_mat(const rean::Matrix& m) {
  Mat<T> out(m.rows(), std::vector<T>(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out[r][c] = static_cast<T>(m(r, c));
  return out;
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
struct Direction {
  Mat<T> wx, wh;
  std::vector<T> b;
};

template <class T>
Direction<T> to_direction(const rean::LstmDirectionParams& p) {
  return {to_mat<T>(p.input_weights), to_mat<T>(p.recurrent_weights), to_mat<T>(p.bias)[0]};
}

// One unidirectional pass; result[t] is the hidden state produced at time t.
template <class T>
Mat<T> run_direction(const Mat<T>& x, const Direction<T>& p, bool reverse) {
  const std::size_t N = x.size();
  const std::size_t H = p.wh.size();
  std::vector<T> h(H, T(0)), c(H, T(0));
  Mat<T> out(N, std::vector<T>(H));
  for (std::size_t s = 0; s < N; ++s) {
    const std::size_t t = reverse ? N - 1 - s : s;
    std::vector<T> z = p.b;
    for (std::size_t k = 0; k < 4 * H; ++k) {
      for (std::size_t d = 0; d < x[t].size(); ++d) z[k] += x[t][d] * p.wx[d][k];
      for (std::size_t d = 0; d < H; ++d) z[k] += h[d] * p.wh[d][k];
    }
    for (std::size_t k = 0; k < H; ++k) {
      const T i = sigmoid(z[k]);
      const T f = sigmoid(z[H + k]);
      const T g = std::tanh(z[2 * H + k]);
      const T o = sigmoid(z[3 * H + k]);
      c[k] = f * c[k] + i * g;
      h[k] = o * std::tanh(c[k]);
    }
    out[t] = h;
  }
  return out;
}

template <class T>
Mat<T> bilstm(const Mat<T>& frames, const rean::AggregatorParams& params) {
  Mat<T> input = frames;
  for (const auto& layer : params.layers) {
    const Mat<T> f = run_direction(input, to_direction<T>(layer.forward), false);
    const Mat<T> b = run_direction(input, to_direction<T>(layer.backward), true);
    Mat<T> out(input.size());
    for (std::size_t t = 0; t < input.size(); ++t) {
      out[t] = f[t];
      out[t].insert(out[t].end(), b[t].begin(), b[t].end());
    }
    input = std::move(out);
  }
  return input;
}

template <class T>
std::vector<T> head(const std::vector<T>& h, const rean::AggregatorParams& params) {
  const auto w = to_mat<T>(params.head_weights);
  std::vector<T> out = to_mat<T>(params.head_bias)[0];
  for (std::size_t j = 0; j < out.size(); ++j)
    for (std::size_t k = 0; k < h.size(); ++k) out[j] += h[k] * w[k][j];
  return out;
}

template <class T>
std::vector<T> rean(const Mat<T>& frames, const rean::AggregatorParams& params) {
  const std::size_t D = params.dim;
  if (frames.empty()) return std::vector<T>(D, T(0));
  const Mat<T> hidden = bilstm(frames, params);
  Mat<T> q;
  for (const auto& h : hidden) q.push_back(head(h, params));
  std::vector<T> r(D, T(0));
  for (std::size_t j = 0; j < D; ++j) {
    T mx = q[0][j];
    for (const auto& row : q) mx = std::max(mx, row[j]);
    T total = 0;
    for (const auto& row : q) total += std::exp(row[j] - mx);
    for (std::size_t i = 0; i < frames.size(); ++i)
      r[j] += frames[i][j] * std::exp(q[i][j] - mx) / total;
  }
  return r;
}

template <class T>
std::vector<T> naive(const Mat<T>& frames, const rean::AggregatorParams& params) {
  if (frames.empty()) return std::vector<T>(params.dim, T(0));
  const Mat<T> hidden = bilstm(frames, params);
  const std::size_t H = params.hidden;
  std::vector<T> last(hidden.back().begin(), hidden.back().begin() + static_cast<long>(H));
  last.insert(last.end(), hidden.front().begin() + static_cast<long>(H), hidden.front().end());
  return head(last, params);
}

template <class T>
std::vector<T> quality_scores(const Mat<T>& frames, const rean::QualityMlp& mlp) {
  const auto w1 = to_mat<T>(mlp.w1);
  const auto b1 = to_mat<T>(mlp.b1)[0];
  const auto w2 = to_mat<T>(mlp.w2);
  const T b2 = static_cast<T>(mlp.b2(0, 0));
  std::vector<T> s;
  for (const auto& f : frames) {
    T out = b2;
    for (std::size_t k = 0; k < b1.size(); ++k) {
      T a = b1[k];
      for (std::size_t d = 0; d < f.size(); ++d) a += f[d] * w1[d][k];
      out += std::max(a, T(0)) * w2[k][0];
    }
    s.push_back(out);
  }
  return s;
}

template <class T>
std::vector<T> quality(const Mat<T>& frames, const rean::QualityMlp& mlp) {
  std::vector<T> r(mlp.dim, T(0));
  if (frames.empty()) return r;
  const auto s = quality_scores(frames, mlp);
  const T mx = *std::max_element(s.begin(), s.end());
  T total = 0;
  for (T v : s) total += std::exp(v - mx);
  for (std::size_t i = 0; i < frames.size(); ++i)
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += frames[i][j] * std::exp(s[i] - mx) / total;
  return r;
}

// Enumerates every (anchor, positive, negative) and averages the positive
// hinge terms. Returns {loss, hard count}. With `drop_margin`, each hard
// term contributes only its distance difference.
template <class T>
std::pair<T, std::size_t> triplet(const std::vector<std::vector<T>>& reps,
                                  const std::vector<std::string>& labels, T margin,
                                  bool drop_margin = false) {
  auto sq = [&](std::size_t a, std::size_t b) {
    T s = 0;
    for (std::size_t j = 0; j < reps[a].size(); ++j) s += (reps[a][j] - reps[b][j]) * (reps[a][j] - reps[b][j]);
    return s;
  };
  T total = 0;
  std::size_t hard = 0;
  for (std::size_t a = 0; a < reps.size(); ++a)
    for (std::size_t p = 0; p < reps.size(); ++p)
      for (std::size_t n = 0; n < reps.size(); ++n) {
        if (a == p || labels[a] != labels[p] || labels[a] == labels[n]) continue;
        const T diff = sq(a, p) - sq(a, n);
        if (diff + margin > T(0)) {
          total += drop_margin ? diff : diff + margin;
          ++hard;
        }
      }
  return {hard ? total / static_cast<T>(hard) : T(0), hard};
}

// Full model + triplet loss on a batch, evaluated in type T.
template <class T>
T batch_objective(const rean::Model& model, const std::vector<rean::FrameEmbeddingSet>& batch,
                  double margin, bool drop_margin) {
  std::vector<std::vector<T>> reps;
  std::vector<std::string> labels;
  for (const auto& set : batch) {
    const auto frames = to_mat<T>(set.frames);
    switch (model.arch) {
      case rean::Architecture::Rean: reps.push_back(rean(frames, model.recurrent())); break;
      case rean::Architecture::NaiveLstm: reps.push_back(naive(frames, model.recurrent())); break;
      case rean::Architecture::QualityPool: reps.push_back(quality(frames, model.mlp())); break;
    }
    labels.push_back(set.subject_id);
  }
  return triplet<T>(reps, labels, static_cast<T>(margin), drop_margin).first;
}

}  // namespace ref
