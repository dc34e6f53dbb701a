#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rean/aggregator.hpp"

namespace rean {

inline constexpr std::uint32_t kTemplateFormatVersion = 1;

/// Template file layout, little-endian:
///   "REAT" | version u32 | D u32 | N u32
///   subject_id (u32 length + bytes) | template_id (u32 length + bytes)
///   N*D f32 values, row-major
std::vector<std::uint8_t> encode_template(const FrameEmbeddingSet& set);
FrameEmbeddingSet decode_template(std::span<const std::uint8_t> bytes);

void save_template(const FrameEmbeddingSet& set, const std::filesystem::path& path);
FrameEmbeddingSet load_template(const std::filesystem::path& path);

/// Reads an externally extracted embedding matrix: one frame per line, values
/// separated by whitespace or commas. Blank lines and lines starting with '#'
/// are skipped.
FrameEmbeddingSet template_from_text(std::istream& in, std::string template_id,
                                     std::string subject_id);

enum class Split { Train, Val, Gallery, Probe };

std::string_view to_string(Split s);
Split parse_split(std::string_view name);

/// One line of a manifest: `path<TAB>subject_id<TAB>split`.
struct ManifestEntry {
  std::string path;
  std::string subject_id;
  Split split = Split::Train;
};

std::vector<ManifestEntry> parse_manifest(std::istream& in);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(std::ostream& out, std::span<const ManifestEntry> entries);

struct Dataset {
  std::vector<FrameEmbeddingSet> templates;
  std::vector<Split> splits;  // parallel to templates

  std::vector<FrameEmbeddingSet> select(Split split) const;
  std::size_t dim() const;
};

/// Loads every template named by the manifest; paths resolve relative to the
/// manifest's directory. Frames are L2-normalized row by row when `normalize`.
Dataset load_dataset(const std::filesystem::path& manifest, bool normalize = true);

/// Writes `dir/templates/<template_id>.reat` per template and `dir/manifest.tsv`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

void normalize_frames(Dataset& dataset);

struct SyntheticDatasetSpec {
  std::size_t num_subjects = 20;
  std::size_t templates_per_subject = 4;
  std::size_t frames_per_template = 16;
  std::size_t dim = 32;
  double clean_sigma = 0.2;       // noise norm on clean frames
  double corrupt_sigma = 4.0;     // noise norm on the redundant seed frame
  double distractor_pull = 0.25;  // weight of the shared distractor direction
  double duplicate_jitter = 1e-3;
  double redundancy = 0.75;       // fraction of frames in the redundant run
  std::size_t val_subjects = 0;
  std::size_t heldout_subjects = 0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t redundant_frames() const;
};

struct SyntheticDataset {
  Dataset dataset;
  Matrix prototypes;  // num_subjects x D, unit rows
  Vector distractor;  // unit
};

/// Per subject a unit prototype; per template (1-rho) clean frames around the
/// prototype and one contiguous run of near-duplicates of a corrupted seed
/// frame. Held-out subjects additionally get a single clean still frame in the
/// gallery split; their video templates are probes. Values are rounded to f32.
SyntheticDataset generate_synthetic(const SyntheticDatasetSpec& spec);

std::string subject_name(std::size_t index);

}  // namespace rean
