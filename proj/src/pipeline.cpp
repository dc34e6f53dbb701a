#include "rean/pipeline.hpp"

#include <algorithm>
#include <exception>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <random>
#include <set>
#include <stdexcept>
#include <thread>

#include "rean/errors.hpp"

namespace rean {

namespace {

const Model& require_model(const Model* model, Method method) {
  if (model == nullptr) {
    throw std::invalid_argument("aggregate: method '" + std::string(to_string(method)) +
                                "' needs a model");
  }
  return *model;
}

void require_arch(const Model& model, Method method, std::initializer_list<Architecture> allowed) {
  if (std::find(allowed.begin(), allowed.end(), model.arch) == allowed.end()) {
    throw std::invalid_argument("aggregate: method '" + std::string(to_string(method)) +
                                "' cannot use a '" + std::string(to_string(model.arch)) +
                                "' model");
  }
}

}  // namespace

TemplateRepresentation aggregate(const FrameEmbeddingSet& set, Method method, const Model* model) {
  if (model != nullptr && set.size() > 0 && set.dim() != model->dim()) {
    throw ShapeError("aggregate: template '" + set.template_id + "' has dimension " +
                     std::to_string(set.dim()) + ", model expects " +
                     std::to_string(model->dim()));
  }
  switch (method) {
    case Method::Avg:
      return avg_pool(set);
    case Method::Rean: {
      const Model& m = require_model(model, method);
      require_arch(m, method, {Architecture::Rean});
      return rean_aggregate(set, m.recurrent());
    }
    case Method::NaiveLstm: {
      const Model& m = require_model(model, method);
      require_arch(m, method, {Architecture::NaiveLstm, Architecture::Rean});
      return naive_lstm_pool(set, m.recurrent());
    }
    case Method::Quality: {
      const Model& m = require_model(model, method);
      require_arch(m, method, {Architecture::QualityPool});
      return quality_pool(set, m.mlp());
    }
    case Method::ContextFilter: {
      const Model& m = require_model(model, method);
      require_arch(m, method, {Architecture::QualityPool});
      return context_filtered_aggregate(set, m.mlp());
    }
  }
  throw std::logic_error("aggregate: unknown method");
}

std::vector<TemplateRepresentation> aggregate_all(std::span<const FrameEmbeddingSet> sets,
                                                  Method method, const Model* model,
                                                  std::size_t threads) {
  std::vector<TemplateRepresentation> out(sets.size());
  threads = std::max<std::size_t>(1, std::min(threads, sets.size()));
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < sets.size(); i += threads) {
      try {
        out[i] = aggregate(sets[i], method, model);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < threads; ++w) workers.emplace_back(work, w);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::string_view to_string(Protocol p) {
  return p == Protocol::SurveillanceToStill ? "sv2still" : "sv2sv";
}

Protocol parse_protocol(std::string_view name) {
  if (name == "sv2still") return Protocol::SurveillanceToStill;
  if (name == "sv2sv") return Protocol::SurveillanceToSurveillance;
  throw std::invalid_argument("unknown protocol '" + std::string(name) +
                              "' (expected sv2still or sv2sv)");
}

ProtocolSets build_protocol(const Dataset& dataset, Protocol protocol) {
  ProtocolSets sets;
  if (protocol == Protocol::SurveillanceToStill) {
    sets.gallery = dataset.select(Split::Gallery);
    sets.probes = dataset.select(Split::Probe);
  } else {
    std::set<std::string> enrolled;
    for (auto& t : dataset.select(Split::Probe)) {
      if (enrolled.insert(t.subject_id).second) {
        sets.gallery.push_back(std::move(t));
      } else {
        sets.probes.push_back(std::move(t));
      }
    }
  }
  if (sets.gallery.empty() || sets.probes.empty()) {
    throw InsufficientDataError("protocol " + std::string(to_string(protocol)) + ": " +
                                std::to_string(sets.gallery.size()) + " gallery and " +
                                std::to_string(sets.probes.size()) + " probe templates");
  }
  return sets;
}

IdentificationReport evaluate_identification(std::span<const TemplateRepresentation> probes,
                                             std::span<const TemplateRepresentation> gallery,
                                             std::span<const std::size_t> ranks,
                                             std::span<const double> fpirs) {
  IdentificationReport report;
  report.closed = closed_set_identification(probes, gallery, ranks);

  std::map<std::string, std::size_t> half;
  for (const auto& g : gallery) {
    if (!half.contains(g.subject_id)) half.emplace(g.subject_id, half.size() % 2);
  }
  if (half.size() < 2 || fpirs.empty()) return report;

  std::vector<OpenSetResult> runs;
  for (std::size_t withheld = 0; withheld < 2; ++withheld) {
    std::vector<TemplateRepresentation> kept;
    for (const auto& g : gallery) {
      if (half.at(g.subject_id) != withheld) kept.push_back(g);
    }
    runs.push_back(open_set_identification(probes, kept, fpirs));
  }
  for (std::size_t i = 0; i < fpirs.size(); ++i) {
    OpenSetPoint pt;
    pt.fpir_target = fpirs[i];
    for (const auto& run : runs) {
      pt.threshold += run.points[i].threshold / 2.0;
      pt.tpir += run.points[i].tpir / 2.0;
      pt.achieved_fpir += run.points[i].achieved_fpir / 2.0;
    }
    report.open.points.push_back(pt);
  }
  return report;
}

std::vector<LabeledPair> verification_pairs(std::span<const TemplateRepresentation> reps,
                                            std::uint64_t seed) {
  std::vector<LabeledPair> same;
  std::vector<LabeledPair> diff;
  for (std::size_t i = 0; i < reps.size(); ++i) {
    for (std::size_t j = i + 1; j < reps.size(); ++j) {
      (reps[i].subject_id == reps[j].subject_id ? same : diff).push_back({i, j, false});
    }
  }
  for (auto& p : same) p.same = true;
  std::mt19937_64 rng(seed);
  std::shuffle(diff.begin(), diff.end(), rng);
  diff.resize(std::min(diff.size(), same.size()));
  std::vector<LabeledPair> pairs = std::move(same);
  pairs.insert(pairs.end(), diff.begin(), diff.end());
  std::shuffle(pairs.begin(), pairs.end(), rng);
  return pairs;
}

std::vector<ScoredPair> score_pairs(std::span<const TemplateRepresentation> reps,
                                    std::span<const LabeledPair> pairs) {
  std::vector<ScoredPair> scored;
  scored.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.first >= reps.size() || p.second >= reps.size()) {
      throw std::out_of_range("score_pairs: pair index beyond " + std::to_string(reps.size()) +
                              " representations");
    }
    scored.push_back({similarity_score(reps[p.first], reps[p.second]), p.same});
  }
  return scored;
}

void write_metrics(std::ostream& out, const IdentificationReport& report) {
  out << std::setprecision(17);
  for (std::size_t i = 0; i < report.closed.ranks.size(); ++i) {
    out << "closed_set_ir\trank" << report.closed.ranks[i] << '\t' << report.closed.rates[i] << '\n';
  }
  for (const auto& p : report.open.points) {
    out << "open_set_tpir\tfpir" << p.fpir_target << '\t' << p.tpir << '\n';
    out << "open_set_threshold\tfpir" << p.fpir_target << '\t' << p.threshold << '\n';
    out << "open_set_achieved_fpir\tfpir" << p.fpir_target << '\t' << p.achieved_fpir << '\n';
  }
}

void write_metrics(std::ostream& out, const VerificationResult& result) {
  out << std::setprecision(17);
  for (std::size_t f = 0; f < result.fold_accuracy.size(); ++f) {
    out << "verification_accuracy\tfold" << f << '\t' << result.fold_accuracy[f] << '\n';
    out << "verification_threshold\tfold" << f << '\t' << result.thresholds[f] << '\n';
  }
  out << "verification_accuracy\tmean\t" << result.mean << '\n';
  out << "verification_accuracy\tstd\t" << result.stddev << '\n';
}

void print_table(std::ostream& out, const IdentificationReport& report) {
  out << std::fixed << std::setprecision(2);
  out << "Closed-set identification\n";
  for (std::size_t i = 0; i < report.closed.ranks.size(); ++i) {
    out << "  rank-" << std::left << std::setw(4) << report.closed.ranks[i] << std::right
        << std::setw(7) << 100.0 * report.closed.rates[i] << " %\n";
  }
  if (!report.open.points.empty()) {
    out << "Open-set identification\n";
    for (const auto& p : report.open.points) {
      out << "  TPIR @ " << std::setw(6) << 100.0 * p.fpir_target << " % FPIR  " << std::setw(7)
          << 100.0 * p.tpir << " %\n";
    }
  }
  out << std::defaultfloat;
}

void print_table(std::ostream& out, const VerificationResult& result) {
  out << std::fixed << std::setprecision(2) << "Verification (" << result.fold_accuracy.size()
      << " folds)\n";
  for (std::size_t f = 0; f < result.fold_accuracy.size(); ++f) {
    out << "  fold " << std::setw(2) << f << "  " << std::setw(7) << 100.0 * result.fold_accuracy[f]
        << " %\n";
  }
  out << "  mean " << 100.0 * result.mean << " +/- " << 100.0 * result.stddev << " %\n"
      << std::defaultfloat;
}

}  // namespace rean
