#include "rean/model_io.hpp"

#include <fstream>
#include <iterator>

#include "rean/binary_io.hpp"
#include "rean/errors.hpp"

namespace rean {

namespace {

void write_blocks(binary::Writer& w, const std::vector<ConstNamedBlock>& blocks) {
  for (const auto& b : blocks) {
    for (double v : b.matrix->values()) w.f32(static_cast<float>(v));
  }
}

void write_moments(binary::Writer& w, const std::vector<Matrix>& moments) {
  for (const auto& m : moments) {
    for (double v : m.values()) w.f32(static_cast<float>(v));
  }
}

void read_into(binary::Reader& r, Matrix& m, const char* what) {
  r.need(m.size() * 4, what);
  for (double& v : m.values()) v = r.f32(what);
}

Model read_model(binary::Reader& r) {
  if (!r.magic_matches("REAN")) throw FormatError(FormatErrorKind::BadMagic, "model: bad magic");
  const std::uint32_t version = r.u32("version");
  if (version != kModelFormatVersion) {
    throw FormatError(FormatErrorKind::UnsupportedVersion,
                      "model: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t dim = r.u32("dim");
  const std::uint32_t hidden = r.u32("hidden");
  const std::uint32_t layers = r.u32("layer count");
  const std::uint32_t arch_raw = r.u32("architecture");
  if (arch_raw > static_cast<std::uint32_t>(Architecture::QualityPool)) {
    throw FormatError(FormatErrorKind::Malformed, "model: unknown architecture " + std::to_string(arch_raw));
  }
  if (layers != 2 || dim == 0 || hidden == 0) {
    throw FormatError(FormatErrorKind::Malformed, "model: unsupported layout D=" +
                                                      std::to_string(dim) + " H=" +
                                                      std::to_string(hidden) + " layers=" +
                                                      std::to_string(layers));
  }
  Model model = Model::zeros(static_cast<Architecture>(arch_raw), dim, hidden);
  auto blocks = model.blocks();
  const std::uint32_t count = r.u32("block count");
  if (count != blocks.size()) {
    throw FormatError(FormatErrorKind::Malformed, "model: expected " + std::to_string(blocks.size()) +
                                                      " blocks, manifest lists " + std::to_string(count));
  }
  for (const auto& b : blocks) {
    const std::string name = r.str("block name");
    const std::uint32_t rows = r.u32("block rows");
    const std::uint32_t cols = r.u32("block cols");
    if (name != b.name || rows != b.matrix->rows() || cols != b.matrix->cols()) {
      throw FormatError(FormatErrorKind::Malformed,
                        "model: manifest entry " + name + " " + std::to_string(rows) + "x" +
                            std::to_string(cols) + " does not match expected " + b.name + " " +
                            b.matrix->shape_string());
    }
  }
  for (auto& b : blocks) read_into(r, *b.matrix, "parameter data");
  return model;
}

void write_model(binary::Writer& w, const Model& model) {
  w.magic("REAN");
  w.u32(kModelFormatVersion);
  w.u32(static_cast<std::uint32_t>(model.dim()));
  w.u32(static_cast<std::uint32_t>(model.hidden()));
  w.u32(2);
  w.u32(static_cast<std::uint32_t>(model.arch));
  const auto blocks = model.blocks();
  w.u32(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    w.str(b.name);
    w.u32(static_cast<std::uint32_t>(b.matrix->rows()));
    w.u32(static_cast<std::uint32_t>(b.matrix->cols()));
  }
  write_blocks(w, blocks);
}

}  // namespace

std::vector<std::uint8_t> encode_model(const Model& model) {
  binary::Writer w;
  write_model(w, model);
  return w.take();
}

Model decode_model(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes, "model");
  Model m = read_model(r);
  if (r.remaining() != 0) {
    throw FormatError(FormatErrorKind::Malformed, "model: trailing bytes after parameter data");
  }
  return m;
}

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const AdamState& state) {
  binary::Writer w;
  write_model(w, model);
  w.magic("ADAM");
  w.u32(kOptimizerFormatVersion);
  w.u64(state.step);
  w.f64(state.lr);
  w.f64(state.beta1);
  w.f64(state.beta2);
  w.f64(state.epsilon);
  write_moments(w, state.first_moment);
  write_moments(w, state.second_moment);
  return w.take();
}

std::pair<Model, AdamState> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes, "checkpoint");
  Model model = read_model(r);
  if (!r.magic_matches("ADAM")) {
    throw FormatError(FormatErrorKind::BadMagic, "checkpoint: bad optimizer block magic");
  }
  const std::uint32_t version = r.u32("optimizer version");
  if (version != kOptimizerFormatVersion) {
    throw FormatError(FormatErrorKind::UnsupportedVersion,
                      "checkpoint: unsupported optimizer version " + std::to_string(version));
  }
  AdamState state = AdamState::for_model(model, 0.0);
  state.step = r.u64("step");
  state.lr = r.f64("lr");
  state.beta1 = r.f64("beta1");
  state.beta2 = r.f64("beta2");
  state.epsilon = r.f64("epsilon");
  for (auto& m : state.first_moment) read_into(r, m, "first moment");
  for (auto& m : state.second_moment) read_into(r, m, "second moment");
  if (r.remaining() != 0) {
    throw FormatError(FormatErrorKind::Malformed, "checkpoint: trailing bytes");
  }
  return {std::move(model), std::move(state)};
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

void save_model(const Model& model, const std::filesystem::path& path) {
  write_file(path, encode_model(model));
}

Model load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }

}  // namespace rean
