#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rean/aggregator.hpp"

namespace rean {

/// Cosine similarity; -1 when either side is the zero vector.
double similarity_score(std::span<const double> a, std::span<const double> b);
double similarity_score(const TemplateRepresentation& a, const TemplateRepresentation& b);

struct IdentificationResult {
  std::vector<std::size_t> ranks;
  std::vector<double> rates;                      // parallel to ranks
  std::vector<std::vector<std::size_t>> rankings;  // per probe, gallery indices best-first

  double rate_at(std::size_t rank) const;
};

/// Closed-set rank-k identification. Gallery order breaks score ties (earlier
/// entry ranks first). Throws if a probe's subject has no gallery entry.
IdentificationResult closed_set_identification(std::span<const TemplateRepresentation> probes,
                                               std::span<const TemplateRepresentation> gallery,
                                               std::span<const std::size_t> ranks);

struct OpenSetPoint {
  double fpir_target = 0.0;
  double threshold = 0.0;  // accept when top-1 score >= threshold
  double tpir = 0.0;
  double achieved_fpir = 0.0;
};

struct OpenSetResult {
  std::vector<OpenSetPoint> points;
};

/// Probes whose subject is absent from the gallery are non-mated. For each
/// target FPIR the threshold is the smallest value whose non-mated false-alarm
/// fraction does not exceed the target.
OpenSetResult open_set_identification(std::span<const TemplateRepresentation> probes,
                                      std::span<const TemplateRepresentation> gallery,
                                      std::span<const double> fpir_targets);

struct ScoredPair {
  double score = 0.0;
  bool same = false;
};

struct VerificationResult {
  std::vector<double> fold_accuracy;
  std::vector<double> thresholds;  // pairs with score > threshold are accepted
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation over folds
};

/// Accuracy-maximizing threshold over midpoints between distinct sorted scores
/// (plus one below and one above all scores). Ties go to the smallest.
double best_threshold(std::span<const ScoredPair> pairs);

/// Pairs are split into `folds` contiguous folds whose sizes differ by at most
/// one. Each fold is scored with the threshold chosen on the other folds.
VerificationResult verification_kfold(std::span<const ScoredPair> pairs, std::size_t folds = 10);

struct TwoMeans {
  std::vector<bool> high;  // membership in the higher-centroid cluster
  double low_centroid = 0.0;
  double high_centroid = 0.0;
};

/// Two-cluster k-means on scalars, solved exactly: the minimum within-cluster
/// sum of squares over all cuts of the sorted values. Equal values always
/// share a cluster; among equal-cost cuts the lowest wins, which keeps the
/// high cluster as large as possible. All-equal input puts everything low.
TwoMeans two_means_1d(std::span<const double> values);

/// Scores frames with the quality MLP, keeps the higher-quality k-means
/// cluster and pools it with softmax weights. Equal scores fall back to
/// quality_pool over every frame.
TemplateRepresentation context_filtered_aggregate(const FrameEmbeddingSet& set,
                                                  const QualityMlp& mlp);

}  // namespace rean
