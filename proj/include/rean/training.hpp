#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "rean/aggregator.hpp"
#include "rean/numerics.hpp"

namespace rean {

struct TripletLossConfig {
  double margin = 3.0;  // on squared Euclidean distances
};

struct TripletLossResult {
  double loss = 0.0;
  double excess = 0.0;  // mean of |a-p|^2 - |a-n|^2 over hard triplets (loss - margin)
  std::size_t hard_count = 0;     // triplets with a strictly positive hinge term
  std::size_t triplet_count = 0;  // all valid (anchor, positive, negative) triples
  std::vector<Vector> gradients;  // dLoss/dRep, one per representation
};

/// Averages [|a-p|^2 - |a-n|^2 + margin]_+ over the hard triplets of a batch.
/// Labels are the representations' subject ids. Throws InsufficientDataError
/// unless there are at least two subjects and one subject with two templates.
TripletLossResult triplet_loss(std::span<const TemplateRepresentation> reps,
                               const TripletLossConfig& cfg);

struct BatchSpec {
  std::size_t subjects_per_batch = 16;
  std::size_t templates_per_subject = 3;
  std::size_t frames_per_template = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Brings a template to exactly `count` frames: shorter templates repeat
/// cyclically in order, longer ones keep the contiguous window at `offset`.
Matrix fit_frames(const Matrix& frames, std::size_t count, std::size_t offset = 0);

/// Draws subjects_per_batch subjects and templates_per_subject templates of
/// each (without replacement). Templates with no frames are never drawn.
std::vector<FrameEmbeddingSet> sample_batch(std::span<const FrameEmbeddingSet> templates,
                                            const BatchSpec& spec, std::mt19937_64& rng);
std::vector<FrameEmbeddingSet> sample_batch(std::span<const FrameEmbeddingSet> templates,
                                            const BatchSpec& spec);

// ---------------------------------------------------------------------------
// Forward with saved activations, and reverse-mode derivatives

struct ReanTrace {
  BiLstmTrace lstm;
  AttentionWeights attention;
};

struct NaiveLstmTrace {
  BiLstmTrace lstm;
  Matrix final_state;  // 1 x 2H
};

struct QualityTrace {
  Matrix pre_activation;  // N x K
  Matrix hidden;          // N x K
  Vector weights;         // N
};

using ForwardTrace = std::variant<std::monostate, ReanTrace, NaiveLstmTrace, QualityTrace>;

/// Representation of one template plus whatever the backward pass needs.
Vector forward_traced(const Model& model, const Matrix& frames, ForwardTrace& trace);

/// Accumulates dLoss/dParams into `grads` given dLoss/dRep.
void backward_template(const Model& model, const Matrix& frames, const ForwardTrace& trace,
                       std::span<const double> d_rep, Model& grads);

struct BatchGradient {
  double loss = 0.0;
  std::size_t hard_count = 0;
  Model gradients;
};

/// Full forward + triplet loss + backward over a batch. Per-template work may
/// run on `threads` workers; gradients are summed in template order so the
/// result does not depend on the thread count.
BatchGradient compute_batch_gradient(const Model& model, std::span<const FrameEmbeddingSet> batch,
                                     const TripletLossConfig& cfg, std::size_t threads = 1);

double batch_loss(const Model& model, std::span<const FrameEmbeddingSet> batch,
                  const TripletLossConfig& cfg);

/// Analytic batch gradient against central differences. `max_coords == 0`
/// checks every parameter; otherwise a seeded random subset.
GradientCheckReport gradient_check(const Model& model, std::span<const FrameEmbeddingSet> batch,
                                   const TripletLossConfig& cfg, double eps,
                                   std::size_t max_coords = 0, std::uint64_t seed = 0);

/// Throws NonFiniteError naming the first block holding NaN/Inf.
void require_finite(const Model& grads);

/// Scales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
double clip_global_norm(Model& grads, double max_norm);

// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_model(const Model& model, double lr);
};

/// Bias-corrected Adam update, in place.
void adam_step(Model& params, const Model& grads, AdamState& state);

struct FitConfig {
  BatchSpec batch;
  TripletLossConfig loss;
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t batches_per_epoch = 0;  // 0: one pass over the training templates
  std::size_t threads = 1;
  double clip_norm = 5.0;
  std::size_t gradcheck_coords = 64;
  double gradcheck_eps = 1e-4;
  double gradcheck_tolerance = 1e-3;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double mean_hard_triplets = 0.0;
  double val_loss = 0.0;  // NaN when there is no usable validation split
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  GradientCheckReport gradient_check;
  Model final_model;
  AdamState optimizer;
};

class GradientCheckFailure : public std::runtime_error {
 public:
  explicit GradientCheckFailure(GradientCheckReport report);
  const GradientCheckReport& report() const noexcept { return report_; }

 private:
  GradientCheckReport report_;
};

std::size_t default_batches_per_epoch(std::span<const FrameEmbeddingSet> train, const BatchSpec& spec);

/// Trains `initial` with hard-triplet loss and Adam. Runs a gradient check on a
/// small slice of the first batch before any update. `optimizer`, when given,
/// resumes from a saved state.
TrainReport fit(std::span<const FrameEmbeddingSet> train, std::span<const FrameEmbeddingSet> val,
                Model initial, const FitConfig& cfg,
                const std::function<void(const EpochStats&)>& on_epoch = {},
                const AdamState* optimizer = nullptr);

}  // namespace rean
