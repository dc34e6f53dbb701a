#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

#include "rean/data.hpp"

namespace rean {

namespace {

Vector gaussian(std::size_t dim, double norm_scale, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, norm_scale / std::sqrt(static_cast<double>(dim)));
  Vector v(dim);
  for (double& x : v) x = n(rng);
  return v;
}

Vector unit(Vector v) {
  const double n = l2_norm(v);
  if (n > 0.0) {
    for (double& x : v) x /= n;
  }
  return v;
}

Vector unit_random(std::size_t dim, std::mt19937_64& rng) {
  for (;;) {
    Vector v = gaussian(dim, 1.0, rng);
    if (l2_norm(v) > 1e-12) return unit(std::move(v));
  }
}

// mu + noise + pull * distractor, then unit length.
Vector perturbed(const Vector& mu, double sigma, const Vector& distractor, double pull,
                 std::mt19937_64& rng) {
  Vector v = gaussian(mu.size(), sigma, rng);
  for (std::size_t j = 0; j < v.size(); ++j) v[j] += mu[j] + pull * distractor[j];
  return unit(std::move(v));
}

void set_row(Matrix& m, std::size_t r, const Vector& v) {
  for (std::size_t j = 0; j < v.size(); ++j) m(r, j) = static_cast<double>(static_cast<float>(v[j]));
}

}  // namespace

std::string subject_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%04zu", index);
  return buf;
}

void SyntheticDatasetSpec::validate() const {
  if (dim < 2) throw std::invalid_argument("synthetic: dim must be >= 2");
  if (!(redundancy >= 0.0 && redundancy < 1.0)) {
    throw std::invalid_argument("synthetic: redundancy must lie in [0, 1)");
  }
  if (clean_sigma < 0.0 || corrupt_sigma < 0.0 || duplicate_jitter < 0.0 || distractor_pull < 0.0) {
    throw std::invalid_argument("synthetic: sigmas and distractor pull must be >= 0");
  }
  if (num_subjects == 0 || templates_per_subject == 0 || frames_per_template == 0) {
    throw std::invalid_argument("synthetic: subjects, templates and frames must be >= 1");
  }
  if (val_subjects + heldout_subjects > num_subjects) {
    throw std::invalid_argument("synthetic: val + held-out subjects exceed num_subjects");
  }
}

std::size_t SyntheticDatasetSpec::redundant_frames() const {
  const auto n = static_cast<std::size_t>(std::llround(redundancy * static_cast<double>(frames_per_template)));
  return std::min(n, frames_per_template - 1);
}

SyntheticDataset generate_synthetic(const SyntheticDatasetSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t D = spec.dim;
  const std::size_t N = spec.frames_per_template;
  const std::size_t n_red = spec.redundant_frames();
  const std::size_t n_clean = N - n_red;

  SyntheticDataset out;
  out.distractor = unit_random(D, rng);
  out.prototypes = Matrix(spec.num_subjects, D);
  std::vector<Vector> protos;
  for (std::size_t s = 0; s < spec.num_subjects; ++s) {
    protos.push_back(unit_random(D, rng));
    std::copy(protos.back().begin(), protos.back().end(), out.prototypes.row(s).begin());
  }

  const std::size_t first_val = spec.num_subjects - spec.heldout_subjects - spec.val_subjects;
  const std::size_t first_heldout = spec.num_subjects - spec.heldout_subjects;
  const Vector no_pull(D, 0.0);
  std::uniform_int_distribution<std::size_t> run_start(0, n_clean);

  for (std::size_t s = 0; s < spec.num_subjects; ++s) {
    const std::string subject = subject_name(s);
    const Vector& mu = protos[s];
    const Split split = s >= first_heldout ? Split::Probe : s >= first_val ? Split::Val : Split::Train;
    for (std::size_t t = 0; t < spec.templates_per_subject; ++t) {
      Matrix frames(N, D);
      const std::size_t start = n_red > 0 ? run_start(rng) : 0;
      Vector seed_frame;
      if (n_red > 0) seed_frame = perturbed(mu, spec.corrupt_sigma, out.distractor, spec.distractor_pull, rng);
      for (std::size_t i = 0; i < N; ++i) {
        if (i >= start && i < start + n_red) {
          Vector dup = gaussian(D, spec.duplicate_jitter, rng);
          for (std::size_t j = 0; j < D; ++j) dup[j] += seed_frame[j];
          set_row(frames, i, unit(std::move(dup)));
        } else {
          set_row(frames, i, perturbed(mu, spec.clean_sigma, no_pull, 0.0, rng));
        }
      }
      char id[48];
      std::snprintf(id, sizeof(id), "%s_t%03zu", subject.c_str(), t);
      out.dataset.templates.push_back({id, subject, std::move(frames)});
      out.dataset.splits.push_back(split);
    }
    if (split == Split::Probe) {
      Matrix still(1, D);
      set_row(still, 0, perturbed(mu, spec.clean_sigma, no_pull, 0.0, rng));
      out.dataset.templates.push_back({subject + "_still", subject, std::move(still)});
      out.dataset.splits.push_back(Split::Gallery);
    }
  }
  return out;
}

}  // namespace rean
