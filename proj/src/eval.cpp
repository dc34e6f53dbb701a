#include "rean/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "rean/errors.hpp"

namespace rean {

double similarity_score(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("similarity_score: dimensions " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return -1.0;
  return dot(a, b) / (na * nb);
}

double similarity_score(const TemplateRepresentation& a, const TemplateRepresentation& b) {
  return similarity_score(a.vector, b.vector);
}

double IdentificationResult::rate_at(std::size_t rank) const {
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (ranks[i] == rank) return rates[i];
  }
  throw std::out_of_range("IdentificationResult: rank " + std::to_string(rank) + " not evaluated");
}

namespace {

std::vector<double> score_row(const TemplateRepresentation& probe,
                              std::span<const TemplateRepresentation> gallery) {
  std::vector<double> scores(gallery.size());
  for (std::size_t g = 0; g < gallery.size(); ++g) scores[g] = similarity_score(probe, gallery[g]);
  return scores;
}

std::vector<std::size_t> rank_gallery(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

IdentificationResult closed_set_identification(std::span<const TemplateRepresentation> probes,
                                               std::span<const TemplateRepresentation> gallery,
                                               std::span<const std::size_t> ranks) {
  std::set<std::string> enrolled;
  for (const auto& g : gallery) enrolled.insert(g.subject_id);
  for (const auto& p : probes) {
    if (!enrolled.contains(p.subject_id)) {
      throw std::invalid_argument("closed_set_identification: probe '" + p.template_id +
                                  "' subject '" + p.subject_id + "' has no gallery entry");
    }
  }
  IdentificationResult result;
  result.ranks.assign(ranks.begin(), ranks.end());
  std::vector<std::size_t> hits(ranks.size(), 0);
  for (const auto& p : probes) {
    auto order = rank_gallery(score_row(p, gallery));
    // position of the first correct gallery entry
    std::size_t first = order.size();
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (gallery[order[i]].subject_id == p.subject_id) {
        first = i;
        break;
      }
    }
    for (std::size_t k = 0; k < ranks.size(); ++k) {
      if (first < ranks[k]) ++hits[k];
    }
    result.rankings.push_back(std::move(order));
  }
  for (std::size_t k = 0; k < ranks.size(); ++k) {
    result.rates.push_back(probes.empty() ? 0.0
                                          : static_cast<double>(hits[k]) /
                                                static_cast<double>(probes.size()));
  }
  return result;
}

OpenSetResult open_set_identification(std::span<const TemplateRepresentation> probes,
                                      std::span<const TemplateRepresentation> gallery,
                                      std::span<const double> fpir_targets) {
  std::set<std::string> enrolled;
  for (const auto& g : gallery) enrolled.insert(g.subject_id);

  std::vector<double> nonmated;
  struct Mated {
    double score;
    bool correct;
  };
  std::vector<Mated> mated;
  for (const auto& p : probes) {
    const auto scores = score_row(p, gallery);
    std::size_t best = 0;
    for (std::size_t g = 1; g < scores.size(); ++g) {
      if (scores[g] > scores[best]) best = g;
    }
    const double top = scores.empty() ? -1.0 : scores[best];
    if (enrolled.contains(p.subject_id)) {
      mated.push_back({top, !scores.empty() && gallery[best].subject_id == p.subject_id});
    } else {
      nonmated.push_back(top);
    }
  }
  if (nonmated.empty()) {
    throw std::invalid_argument("open_set_identification: no non-mated probes, FPIR undefined");
  }
  std::sort(nonmated.begin(), nonmated.end(), std::greater<>());
  const auto n = static_cast<double>(nonmated.size());

  OpenSetResult result;
  for (double target : fpir_targets) {
    OpenSetPoint pt;
    pt.fpir_target = target;
    const auto allowed = static_cast<std::size_t>(std::floor(target * n * (1.0 + 1e-12)));
    if (allowed >= nonmated.size()) {
      pt.threshold = -std::numeric_limits<double>::infinity();
    } else {
      pt.threshold = std::nextafter(nonmated[allowed], std::numeric_limits<double>::infinity());
    }
    std::size_t alarms = 0;
    for (double s : nonmated) alarms += s >= pt.threshold ? 1 : 0;
    std::size_t hits = 0;
    for (const auto& m : mated) hits += (m.correct && m.score >= pt.threshold) ? 1 : 0;
    pt.achieved_fpir = static_cast<double>(alarms) / n;
    pt.tpir = mated.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(mated.size());
    result.points.push_back(pt);
  }
  return result;
}

namespace {

double accuracy_at(std::span<const ScoredPair> pairs, double threshold) {
  std::size_t correct = 0;
  for (const auto& p : pairs) correct += ((p.score > threshold) == p.same) ? 1 : 0;
  return pairs.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(pairs.size());
}

}  // namespace

double best_threshold(std::span<const ScoredPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("best_threshold: no pairs");
  std::vector<double> scores;
  for (const auto& p : pairs) scores.push_back(p.score);
  std::sort(scores.begin(), scores.end());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  std::vector<double> candidates;
  candidates.push_back(scores.front() - 1.0);
  for (std::size_t i = 0; i + 1 < scores.size(); ++i) {
    candidates.push_back(0.5 * (scores[i] + scores[i + 1]));
  }
  candidates.push_back(scores.back() + 1.0);
  double best = candidates.front();
  double best_acc = -1.0;
  for (double c : candidates) {
    const double acc = accuracy_at(pairs, c);
    if (acc > best_acc) {
      best_acc = acc;
      best = c;
    }
  }
  return best;
}

VerificationResult verification_kfold(std::span<const ScoredPair> pairs, std::size_t folds) {
  if (folds < 2) throw std::invalid_argument("verification_kfold: need at least 2 folds");
  if (pairs.size() < folds) throw std::invalid_argument("verification_kfold: fewer pairs than folds");
  VerificationResult result;
  const std::size_t n = pairs.size();
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t begin = f * n / folds;
    const std::size_t end = (f + 1) * n / folds;
    const auto held_out = pairs.subspan(begin, end - begin);
    const bool has_same = std::any_of(held_out.begin(), held_out.end(), [](auto& p) { return p.same; });
    const bool has_diff = std::any_of(held_out.begin(), held_out.end(), [](auto& p) { return !p.same; });
    if (!has_same || !has_diff) {
      throw std::invalid_argument("verification_kfold: fold " + std::to_string(f) +
                                  " contains a single class");
    }
    std::vector<ScoredPair> training;
    training.insert(training.end(), pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(begin));
    training.insert(training.end(), pairs.begin() + static_cast<std::ptrdiff_t>(end), pairs.end());
    const double threshold = best_threshold(training);
    result.thresholds.push_back(threshold);
    result.fold_accuracy.push_back(accuracy_at(held_out, threshold));
  }
  const double k = static_cast<double>(folds);
  result.mean = std::accumulate(result.fold_accuracy.begin(), result.fold_accuracy.end(), 0.0) / k;
  double var = 0.0;
  for (double a : result.fold_accuracy) var += (a - result.mean) * (a - result.mean);
  result.stddev = std::sqrt(var / k);
  return result;
}

TwoMeans two_means_1d(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("two_means_1d: no values");
  const std::size_t n = values.size();
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  TwoMeans km;
  km.high.assign(n, false);
  if (sorted.front() == sorted.back()) {
    km.low_centroid = km.high_centroid = sorted.front();
    return km;
  }
  // The optimal 1-D partition is a split of the sorted values. Scan every cut
  // between distinct neighbours with prefix sums; shifting by the median keeps
  // the sums well conditioned.
  const double shift = sorted[n / 2];
  std::vector<double> s1(n + 1, 0.0), s2(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = sorted[i] - shift;
    s1[i + 1] = s1[i] + x;
    s2[i + 1] = s2[i] + x * x;
  }
  auto sse = [&](std::size_t a, std::size_t b) {
    const double m = static_cast<double>(b - a);
    const double sum = s1[b] - s1[a];
    return (s2[b] - s2[a]) - sum * sum / m;
  };
  std::size_t best_cut = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t cut = 1; cut < n; ++cut) {
    if (sorted[cut - 1] == sorted[cut]) continue;
    const double cost = sse(0, cut) + sse(cut, n);
    if (cost < best) {
      best = cost;
      best_cut = cut;
    }
  }
  const double boundary = sorted[best_cut];
  km.low_centroid = (s1[best_cut] / static_cast<double>(best_cut)) + shift;
  km.high_centroid = ((s1[n] - s1[best_cut]) / static_cast<double>(n - best_cut)) + shift;
  for (std::size_t i = 0; i < n; ++i) km.high[i] = values[i] >= boundary;
  return km;
}

TemplateRepresentation context_filtered_aggregate(const FrameEmbeddingSet& set,
                                                  const QualityMlp& mlp) {
  if (set.size() == 0) {
    return {set.template_id, set.subject_id, Method::ContextFilter, Vector(mlp.dim, 0.0)};
  }
  const Vector scores = quality_logits(set.frames, mlp);
  const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
  if (*mn == *mx) {
    auto rep = quality_pool(set, mlp);
    rep.method = Method::ContextFilter;
    return rep;
  }
  const TwoMeans km = two_means_1d(scores);
  Vector kept;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (km.high[i]) {
      kept.push_back(scores[i]);
      rows.push_back(i);
    }
  }
  const Vector w = softmax(kept);
  Vector r(set.dim(), 0.0);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto f = set.frames.row(rows[k]);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += w[k] * f[j];
  }
  return {set.template_id, set.subject_id, Method::ContextFilter, std::move(r)};
}

}  // namespace rean
