#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rean/aggregator.hpp"

namespace testutil {

inline rean::Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                                  double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  rean::Matrix m(rows, cols);
  for (double& v : m.values()) v = u(rng);
  return m;
}

inline rean::Matrix unit_frames(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> n;
  rean::Matrix m(rows, cols);
  for (double& v : m.values()) v = n(rng);
  rean::normalize_rows(m);
  return m;
}

inline rean::FrameEmbeddingSet make_set(std::string tid, std::string sid, rean::Matrix frames) {
  return {std::move(tid), std::move(sid), std::move(frames)};
}

// subjects x templates sets of `frames` unit frames each.
inline std::vector<rean::FrameEmbeddingSet> toy_batch(std::mt19937_64& rng, std::size_t subjects,
                                                      std::size_t templates, std::size_t frames,
                                                      std::size_t dim) {
  std::vector<rean::FrameEmbeddingSet> out;
  for (std::size_t s = 0; s < subjects; ++s) {
    for (std::size_t t = 0; t < templates; ++t) {
      out.push_back(make_set("s" + std::to_string(s) + "_t" + std::to_string(t),
                             "s" + std::to_string(s), unit_frames(rng, frames, dim)));
    }
  }
  return out;
}

inline rean::TemplateRepresentation rep(std::string sid, rean::Vector v, std::string tid = {}) {
  return {tid.empty() ? sid : std::move(tid), std::move(sid), rean::Method::Avg, std::move(v)};
}

}  // namespace testutil
