#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "rean/aggregator.hpp"
#include "rean/data.hpp"
#include "rean/eval.hpp"

namespace rean {

/// Aggregates one template. `model` may be null only for Method::Avg.
/// Rean needs a Rean model, NaiveLstm any recurrent model, Quality and
/// ContextFilter a QualityPool model.
TemplateRepresentation aggregate(const FrameEmbeddingSet& set, Method method, const Model* model);

/// Order-preserving; templates are processed on up to `threads` workers.
std::vector<TemplateRepresentation> aggregate_all(std::span<const FrameEmbeddingSet> sets,
                                                  Method method, const Model* model,
                                                  std::size_t threads = 1);

enum class Protocol {
  SurveillanceToStill,         // probe split against the gallery split
  SurveillanceToSurveillance,  // within the probe split: first template per subject enrolls
};

std::string_view to_string(Protocol p);
Protocol parse_protocol(std::string_view name);

struct ProtocolSets {
  std::vector<FrameEmbeddingSet> gallery;
  std::vector<FrameEmbeddingSet> probes;
};

ProtocolSets build_protocol(const Dataset& dataset, Protocol protocol);

struct IdentificationReport {
  IdentificationResult closed;
  OpenSetResult open;  // empty when the gallery holds fewer than two subjects
};

/// Closed-set ranks plus open-set operating points. The open-set numbers
/// average two runs: gallery subjects are split by alternating first
/// appearance and each half in turn is withheld, making its probes non-mated.
IdentificationReport evaluate_identification(std::span<const TemplateRepresentation> probes,
                                             std::span<const TemplateRepresentation> gallery,
                                             std::span<const std::size_t> ranks,
                                             std::span<const double> fpirs);

struct LabeledPair {
  std::size_t first = 0;
  std::size_t second = 0;
  bool same = false;
};

/// Every same-subject pair plus as many distinct different-subject pairs
/// (or all of them, if fewer exist), shuffled with `seed`.
std::vector<LabeledPair> verification_pairs(std::span<const TemplateRepresentation> reps,
                                            std::uint64_t seed);

std::vector<ScoredPair> score_pairs(std::span<const TemplateRepresentation> reps,
                                    std::span<const LabeledPair> pairs);

/// `metric<TAB>operating_point<TAB>value` lines.
void write_metrics(std::ostream& out, const IdentificationReport& report);
void write_metrics(std::ostream& out, const VerificationResult& result);

/// Human-readable tables.
void print_table(std::ostream& out, const IdentificationReport& report);
void print_table(std::ostream& out, const VerificationResult& result);

}  // namespace rean
