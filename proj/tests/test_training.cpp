#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "helpers.hpp"
#include "reference.hpp"
#include "rean/data.hpp"
#include "rean/errors.hpp"
#include "rean/training.hpp"

using namespace rean;
using testutil::rep;

namespace {

std::vector<TemplateRepresentation> random_reps(std::mt19937_64& rng, std::size_t subjects,
                                                std::size_t templates, std::size_t dim,
                                                double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<TemplateRepresentation> reps;
  for (std::size_t s = 0; s < subjects; ++s)
    for (std::size_t t = 0; t < templates; ++t) {
      Vector v(dim);
      for (double& x : v) x = u(rng);
      reps.push_back(rep("s" + std::to_string(s), v, "s" + std::to_string(s) + "t" + std::to_string(t)));
    }
  return reps;
}

}  // namespace

TEST_CASE("triplet loss hand cases") {
  std::vector<TemplateRepresentation> easy{rep("a", {0, 0}, "a0"), rep("a", {1, 0}, "a1"), rep("b", {0, 3}, "b0")};
  // anchors a0 and a1 both see b0; a0: 1 - 9 + 3 < 0, a1: 1 - 10 + 3 < 0
  const auto r0 = triplet_loss(easy, {3.0});
  CHECK(r0.hard_count == 0);
  CHECK(r0.loss == 0.0);
  CHECK(r0.triplet_count == 2);
  for (const auto& g : r0.gradients)
    for (double v : g) CHECK(v == 0.0);

  // the single triplet (a0, a1, b0): 4 - 1 + 3 = 6; the mirrored anchor gives 4 - 1 + 3 too
  std::vector<TemplateRepresentation> hard{rep("a", {0, 0}, "a0"), rep("a", {2, 0}, "a1"), rep("b", {1, 0}, "b0")};
  const auto r1 = triplet_loss(hard, {3.0});
  CHECK(r1.hard_count == 2);
  CHECK(r1.loss == doctest::Approx(6.0));
  CHECK(r1.excess == doctest::Approx(3.0));
}

TEST_CASE("triplet loss with a single hard triplet") {
  // only a0 may anchor: a1 is the sole positive and subject c has one template
  std::vector<TemplateRepresentation> reps{rep("a", {0, 0}, "a0"), rep("a", {2, 0}, "a1"), rep("b", {1, 0}, "b0")};
  reps[1].vector = {2, 0};
  // move a1 so that from a1's perspective the triplet is easy: |a1-a0|^2=4, |a1-b0|^2 must exceed 7
  reps[2].vector = {-1.5, 0};  // a0: 4 - 2.25 + 3 > 0 ; a1: 4 - 12.25 + 3 < 0
  const auto r = triplet_loss(reps, {3.0});
  CHECK(r.hard_count == 1);
  CHECK(r.loss == doctest::Approx(4.75));
}

TEST_CASE("triplet loss errors on insufficient labels") {
  CHECK_THROWS_AS((void)triplet_loss(std::vector{rep("a", {0.0}), rep("a", {1.0})}, {}), InsufficientDataError);
  CHECK_THROWS_AS((void)triplet_loss(std::vector{rep("a", {0.0}), rep("b", {1.0})}, {}), InsufficientDataError);
  CHECK_THROWS_AS((void)triplet_loss(std::vector{rep("a", {0.0}), rep("a", {1.0}), rep("b", {1.0})}, {0.0}),
                  std::invalid_argument);
}

TEST_CASE("triplet loss matches enumeration and finite differences") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    auto reps = random_reps(rng, 3, 2, 4);
    const auto r = triplet_loss(reps, {3.0});
    std::vector<std::vector<double>> vs;
    std::vector<std::string> labels;
    for (const auto& x : reps) {
      vs.push_back(x.vector);
      labels.push_back(x.subject_id);
    }
    const auto [loss, hard] = ref::triplet<double>(vs, labels, 3.0);
    CHECK(std::abs(r.loss - loss) <= 1e-12);
    CHECK(r.hard_count == hard);
    CHECK(r.loss >= 0.0);

    for (std::size_t i = 0; i < reps.size(); ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        auto probe = reps;
        const ScalarFunction f = [&](std::span<const double> t) {
          probe[i].vector[j] = t[0];
          return triplet_loss(probe, {3.0}).loss;
        };
        const double numeric = finite_difference_gradient(f, Vector{reps[i].vector[j]}, 1e-6)[0];
        CHECK(std::abs(numeric - r.gradients[i][j]) <= 1e-6);
      }
    }
  }
}

TEST_CASE("triplet loss is translation invariant and zero iff every triplet is satisfied") {
  std::mt19937_64 rng(22);
  auto reps = random_reps(rng, 4, 3, 5);
  const double before = triplet_loss(reps, {3.0}).loss;
  for (auto& r : reps)
    for (std::size_t j = 0; j < 5; ++j) r.vector[j] += 10.0 + static_cast<double>(j);
  CHECK(std::abs(triplet_loss(reps, {3.0}).loss - before) <= 1e-9);

  // well separated clusters: zero loss
  std::vector<TemplateRepresentation> sep;
  for (int s = 0; s < 3; ++s)
    for (int t = 0; t < 2; ++t) sep.push_back(rep("s" + std::to_string(s), {10.0 * s + 0.1 * t, 0.0}));
  CHECK(triplet_loss(sep, {3.0}).loss == 0.0);
}

TEST_CASE("fit_frames pads cyclically and windows long templates") {
  const Matrix two = Matrix::from_rows({{1, 1}, {2, 2}});
  CHECK(fit_frames(two, 4) == Matrix::from_rows({{1, 1}, {2, 2}, {1, 1}, {2, 2}}));
  const Matrix five = Matrix::from_rows({{0}, {1}, {2}, {3}, {4}});
  CHECK(fit_frames(five, 3, 1) == Matrix::from_rows({{1}, {2}, {3}}));
  CHECK_THROWS((void)fit_frames(five, 3, 3));
  CHECK_THROWS((void)fit_frames(Matrix(0, 2), 3));
}

TEST_CASE("sample_batch cardinality, padding and determinism") {
  std::mt19937_64 rng(23);
  auto sets = testutil::toy_batch(rng, 3, 2, 2, 5);
  const BatchSpec spec{2, 2, 4, 99};
  const auto batch = sample_batch(sets, spec);
  REQUIRE(batch.size() == 4);
  std::set<std::string> subjects;
  for (const auto& t : batch) {
    CHECK(t.frames.rows() == 4);
    CHECK(t.frames.cols() == 5);
    subjects.insert(t.subject_id);
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(t.frames(0, c) == t.frames(2, c));
      CHECK(t.frames(1, c) == t.frames(3, c));
    }
  }
  CHECK(subjects.size() == 2);
  const auto again = sample_batch(sets, spec);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(again[i].template_id == batch[i].template_id);
    CHECK(again[i].frames == batch[i].frames);
  }
}

TEST_CASE("sample_batch shortfalls and empty templates") {
  std::mt19937_64 rng(24);
  auto sets = testutil::toy_batch(rng, 3, 2, 3, 4);
  sets[0].frames = Matrix(0, 4);  // subject s0 now has one usable template
  try {
    (void)sample_batch(sets, BatchSpec{3, 2, 3, 0});
    FAIL("expected InsufficientDataError");
  } catch (const InsufficientDataError& e) {
    CHECK(std::string(e.what()).find("short by 1") != std::string::npos);
  }
  for (int seed = 0; seed < 20; ++seed) {
    for (const auto& t : sample_batch(sets, BatchSpec{2, 2, 3, static_cast<std::uint64_t>(seed)})) {
      CHECK(t.subject_id != "s0");
    }
  }
  CHECK_THROWS_AS(BatchSpec({2, 1, 3, 0}).validate(), std::invalid_argument);
}

TEST_CASE("analytic gradients match finite differences for every architecture") {
  for (auto arch : {Architecture::Rean, Architecture::NaiveLstm, Architecture::QualityPool}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::mt19937_64 rng(100 + seed);
      const auto batch = testutil::toy_batch(rng, 2, 2, 3, 4);
      const Model model = Model::create(arch, 4, 3, seed);
      const auto report = gradient_check(model, batch, {3.0}, 1e-4, 0, 0);
      INFO("arch " << to_string(arch) << " seed " << seed);
      CHECK(report.max_relative_error < 1e-4);
      CHECK(report.checked == parameter_count(model));
    }
  }
}

TEST_CASE("analytic gradients match an extended-precision reference per block") {
  // 64-bit central differences bottom out near 1e-12 absolute; the long double
  // reference removes that floor so the comparison isolates the derivation.
  std::mt19937_64 rng(31);
  const auto batch = testutil::toy_batch(rng, 2, 2, 4, 8);
  for (auto arch : {Architecture::Rean, Architecture::NaiveLstm, Architecture::QualityPool}) {
    const Model model = Model::create(arch, 8, 4, 5);
    const auto analytic = compute_batch_gradient(model, batch, {3.0}, 1);
    Model probe = model;
    auto blocks = probe.blocks();
    const auto grads = analytic.gradients.blocks();
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      double worst = 0.0;
      auto values = blocks[b].matrix->values();
      const auto g = grads[b].matrix->values();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double keep = values[i];
        values[i] = keep + 1e-4;
        const long double up = ref::batch_objective<long double>(probe, batch, 3.0, true);
        values[i] = keep - 1e-4;
        const long double down = ref::batch_objective<long double>(probe, batch, 3.0, true);
        values[i] = keep;
        const double numeric = static_cast<double>((up - down) / 2e-4L);
        worst = std::max(worst, relative_error(g[i], numeric));
      }
      INFO(to_string(arch) << " block " << blocks[b].name);
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("gradients vanish without hard triplets and are reproducible on zero models") {
  // subjects far apart: no hard triplet, zero gradient
  std::vector<FrameEmbeddingSet> batch;
  for (int s = 0; s < 2; ++s)
    for (int t = 0; t < 2; ++t) {
      Matrix f(2, 2, 0.0);
      f(0, 0) = f(1, 0) = 10.0 * s;
      batch.push_back({"t" + std::to_string(s) + std::to_string(t), "s" + std::to_string(s), f});
    }
  const Model model = Model::create(Architecture::Rean, 2, 2, 1);
  const auto g = compute_batch_gradient(model, batch, {3.0}, 1);
  CHECK(g.hard_count == 0);
  for (double v : flatten(g.gradients)) CHECK(v == 0.0);

  std::mt19937_64 rng(5);
  auto sym = testutil::toy_batch(rng, 2, 2, 3, 4);
  const Model zero = Model::zeros(Architecture::Rean, 4, 3);
  const auto a = compute_batch_gradient(zero, sym, {3.0}, 1);
  const auto b = compute_batch_gradient(zero, sym, {3.0}, 1);
  CHECK(all_finite(flatten(a.gradients)));
  CHECK(flatten(a.gradients) == flatten(b.gradients));
}

TEST_CASE("batch gradient does not depend on the thread count") {
  std::mt19937_64 rng(41);
  const auto batch = testutil::toy_batch(rng, 4, 3, 5, 6);
  const Model model = Model::create(Architecture::Rean, 6, 4, 2);
  const auto one = compute_batch_gradient(model, batch, {3.0}, 1);
  for (std::size_t threads : {2u, 3u, 8u}) {
    const auto many = compute_batch_gradient(model, batch, {3.0}, threads);
    CHECK(many.loss == one.loss);
    CHECK(flatten(many.gradients) == flatten(one.gradients));
  }
}

TEST_CASE("non-finite gradients name their block") {
  Model g = Model::zeros(Architecture::Rean, 2, 2);
  g.recurrent().head_bias(0, 1) = std::nan("");
  try {
    require_finite(g);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.where()) == "head.b");
  }
}

TEST_CASE("clip_global_norm") {
  Model g = Model::zeros(Architecture::QualityPool, 2, 1);
  g.mlp().w1(0, 0) = 3.0;
  g.mlp().b2(0, 0) = 4.0;
  CHECK(clip_global_norm(g, 10.0) == doctest::Approx(5.0));
  CHECK(g.mlp().w1(0, 0) == 3.0);
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g.mlp().w1(0, 0) == doctest::Approx(0.6));
  CHECK(g.mlp().b2(0, 0) == doctest::Approx(0.8));
}

TEST_CASE("adam") {
  Model params = Model::create(Architecture::QualityPool, 3, 2, 7);
  const Vector before = flatten(params);
  AdamState state = AdamState::for_model(params, 0.01);
  adam_step(params, params.zeros_like(), state);
  CHECK(flatten(params) == before);
  CHECK(state.step == 1);

  Model grads = params.zeros_like();
  Vector gv(before.size());
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = (i % 2 ? -1.0 : 1.0) * (0.5 + static_cast<double>(i));
  unflatten(grads, gv);
  AdamState fresh = AdamState::for_model(params, 0.01);
  const Vector start = flatten(params);
  adam_step(params, grads, fresh);
  const Vector after = flatten(params);
  for (std::size_t i = 0; i < gv.size(); ++i) {
    CHECK(after[i] - start[i] == doctest::Approx(-0.01 * (gv[i] > 0 ? 1.0 : -1.0)).epsilon(1e-6));
  }

  Model wrong = Model::zeros(Architecture::QualityPool, 4, 2);
  CHECK_THROWS_AS(adam_step(params, wrong, fresh), ShapeError);
}

TEST_CASE("adam minimizes a scalar quadratic") {
  // theta lives in b2 of a 1x1 quality MLP; f = theta^2, gradient 2 theta
  Model m = Model::zeros(Architecture::QualityPool, 1, 1);
  m.mlp().b2(0, 0) = 1.0;
  AdamState state = AdamState::for_model(m, 0.1);
  for (int step = 0; step < 100; ++step) {
    Model g = m.zeros_like();
    g.mlp().b2(0, 0) = 2.0 * m.mlp().b2(0, 0);
    adam_step(m, g, state);
  }
  CHECK(std::abs(m.mlp().b2(0, 0)) < 0.1);
}

TEST_CASE("fit: zero epochs, learning, determinism and resume state") {
  SyntheticDatasetSpec spec;
  spec.num_subjects = 20;
  spec.templates_per_subject = 4;
  spec.frames_per_template = 8;
  spec.dim = 8;
  spec.val_subjects = 4;
  spec.seed = 3;
  const auto ds = generate_synthetic(spec).dataset;
  const auto train = ds.select(Split::Train);
  const auto val = ds.select(Split::Val);

  FitConfig cfg;
  cfg.batch = {8, 3, 8, 0};
  cfg.epochs = 0;
  cfg.lr = 1e-2;
  cfg.batches_per_epoch = 10;
  cfg.seed = 11;
  const Model init = Model::create(Architecture::Rean, 8, 4, 1);
  const auto none = fit(train, val, init, cfg);
  CHECK(none.epochs.empty());
  CHECK(flatten(none.final_model) == flatten(init));

  cfg.epochs = 5;
  std::vector<EpochStats> seen;
  const auto a = fit(train, val, init, cfg, [&](const EpochStats& s) { seen.push_back(s); });
  REQUIRE(a.epochs.size() == 5);
  CHECK(seen.size() == 5);
  CHECK(a.epochs.back().mean_loss < a.epochs.front().mean_loss);
  CHECK(a.gradient_check.max_relative_error < 1e-3);
  for (const auto& e : a.epochs) {
    CHECK(e.mean_loss >= 0.0);
    CHECK(std::isfinite(e.val_loss));
  }
  cfg.threads = 3;
  const auto b = fit(train, val, init, cfg);
  for (std::size_t e = 0; e < 5; ++e) CHECK(a.epochs[e].mean_loss == b.epochs[e].mean_loss);
  CHECK(flatten(a.final_model) == flatten(b.final_model));
  CHECK(a.optimizer.step == 50);
  CHECK(default_batches_per_epoch(train, cfg.batch) == 3);  // 64 templates / 24 per batch, rounded up

  cfg.batch.subjects_per_batch = 1;
  CHECK_THROWS((void)fit(train, val, init, cfg));
}
