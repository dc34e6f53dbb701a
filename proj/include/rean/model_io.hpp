#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rean/aggregator.hpp"
#include "rean/training.hpp"

namespace rean {

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr std::uint32_t kOptimizerFormatVersion = 1;

/// Model file layout (all integers u32 little-endian unless noted):
///
///   "REAN" | version | D | H | layer count | architecture
///   block count | per block: name length, name bytes, rows, cols
///   data: every block in manifest order, row-major, f32 little-endian
///
/// Block order for recurrent models is l0.fwd.{wx,wh,b}, l0.bwd.{...},
/// l1.fwd.{...}, l1.bwd.{...}, head.w, head.b; for the quality MLP it is
/// mlp.w1, mlp.b1, mlp.w2, mlp.b2. H is the MLP hidden width for the latter.
std::vector<std::uint8_t> encode_model(const Model& model);
Model decode_model(std::span<const std::uint8_t> bytes);

/// Checkpoint = model bytes followed by
///   "ADAM" | version | step (u64) | lr, beta1, beta2, epsilon (f64)
///   first moments then second moments, same block order, f32
std::vector<std::uint8_t> encode_checkpoint(const Model& model, const AdamState& state);
std::pair<Model, AdamState> decode_checkpoint(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace rean
