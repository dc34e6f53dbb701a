#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "rean/data.hpp"
#include "rean/errors.hpp"
#include "rean/model_io.hpp"

using namespace rean;
namespace fs = std::filesystem;

namespace {

Matrix f32_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  Matrix m = testutil::random_matrix(rng, rows, cols, -2.0, 2.0);
  for (double& v : m.values()) v = static_cast<float>(v);
  return m;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rean_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

FormatErrorKind kind_of(std::span<const std::uint8_t> bytes) {
  try {
    (void)decode_template(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  FAIL("decode succeeded");
  return FormatErrorKind::Malformed;
}

}  // namespace

TEST_CASE("template round trip") {
  const FrameEmbeddingSet empty{"t0", "s0", Matrix(0, 3)};
  const auto bytes = encode_template(empty);
  CHECK(bytes.size() == 4 + 12 + 4 + 2 + 4 + 2);
  const auto back = decode_template(bytes);
  CHECK(back.size() == 0);
  CHECK(back.dim() == 3);
  CHECK(back.template_id == "t0");

  const FrameEmbeddingSet small{"tid", "sid", Matrix::from_rows({{1.5, -2, 0.25}, {3, 4, -0.125}})};
  const auto round = decode_template(encode_template(small));
  CHECK(round.frames == small.frames);
  CHECK(round.subject_id == "sid");
  CHECK(encode_template(round) == encode_template(small));
}

TEST_CASE("template encoding is little-endian") {
  const auto bytes = encode_template({"", "", Matrix::from_rows({{1.0}})});
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "REAT");
  CHECK(bytes[4] == 1);  // version, low byte first
  CHECK(bytes[5] == 0);
  // 1.0f = 0x3f800000
  const std::size_t payload = bytes.size() - 4;
  CHECK(bytes[payload] == 0x00);
  CHECK(bytes[payload + 3] == 0x3f);
}

TEST_CASE("template decoding errors have distinct kinds") {
  auto bytes = encode_template({"t", "s", Matrix::from_rows({{1, 2}, {3, 4}})});
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(kind_of(bad_magic) == FormatErrorKind::BadMagic);
  for (std::size_t cut : {std::size_t{0}, std::size_t{2}, std::size_t{6}, bytes.size() - 1}) {
    const std::span<const std::uint8_t> part(bytes.data(), cut);
    CHECK(kind_of(part) == FormatErrorKind::Truncated);
  }
  auto version = bytes;
  version[4] = 9;
  CHECK(kind_of(version) == FormatErrorKind::UnsupportedVersion);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK(kind_of(trailing) == FormatErrorKind::Malformed);
  CHECK_THROWS_AS((void)encode_template({"t", "s", Matrix::from_rows({{std::nan("")}})}), std::invalid_argument);
}

TEST_CASE("random templates round trip bit-exactly") {
  std::mt19937_64 rng(51);
  for (int i = 0; i < 200; ++i) {
    const FrameEmbeddingSet set{"t" + std::to_string(i), "s", f32_matrix(rng, i % 6, 1 + i % 9)};
    const auto bytes = encode_template(set);
    const auto back = decode_template(bytes);
    CHECK(back.frames == set.frames);
    CHECK(encode_template(back) == bytes);
  }
}

TEST_CASE("text adapter") {
  std::istringstream in("# exported\n1, 2, 3\n\n4 5 6\n");
  const auto set = template_from_text(in, "t", "s");
  CHECK(set.frames == Matrix::from_rows({{1, 2, 3}, {4, 5, 6}}));
  std::istringstream ragged("1 2\n3\n");
  CHECK_THROWS((void)template_from_text(ragged, "t", "s"));
  std::istringstream junk("1 x\n");
  CHECK_THROWS((void)template_from_text(junk, "t", "s"));
}

TEST_CASE("manifest parsing") {
  std::istringstream in("# comment\na.reat\ts1\ttrain\nb.reat\ts2\tprobe\n");
  const auto entries = parse_manifest(in);
  REQUIRE(entries.size() == 2);
  CHECK(entries[1].split == Split::Probe);
  std::ostringstream out;
  write_manifest(out, entries);
  CHECK(out.str() == "a.reat\ts1\ttrain\nb.reat\ts2\tprobe\n");

  std::istringstream dup("a.reat\ts1\ttrain\na.reat\ts1\tval\n");
  CHECK_THROWS((void)parse_manifest(dup));
  std::istringstream bad_split("a.reat\ts1\ttest\n");
  CHECK_THROWS((void)parse_manifest(bad_split));
  std::istringstream fields("a.reat\ts1\n");
  CHECK_THROWS((void)parse_manifest(fields));
  std::istringstream empty_subject("a.reat\t\ttrain\n");
  CHECK_THROWS((void)parse_manifest(empty_subject));
}

TEST_CASE("dataset save and load") {
  const fs::path dir = scratch_dir("dataset");
  SyntheticDatasetSpec spec;
  spec.num_subjects = 4;
  spec.templates_per_subject = 2;
  spec.frames_per_template = 5;
  spec.dim = 6;
  spec.heldout_subjects = 1;
  spec.seed = 2;
  const auto synth = generate_synthetic(spec);
  save_dataset(synth.dataset, dir);
  const Dataset loaded = load_dataset(dir / "manifest.tsv");
  REQUIRE(loaded.templates.size() == synth.dataset.templates.size());
  for (std::size_t i = 0; i < loaded.templates.size(); ++i) {
    CHECK(loaded.splits[i] == synth.dataset.splits[i]);
    CHECK(loaded.templates[i].template_id == synth.dataset.templates[i].template_id);
    for (std::size_t r = 0; r < loaded.templates[i].size(); ++r)
      CHECK(std::abs(l2_norm(loaded.templates[i].frames.row(r)) - 1.0) <= 1e-12);
  }
  CHECK(loaded.select(Split::Gallery).size() == 1);
  CHECK(loaded.select(Split::Probe).size() == 2);
  CHECK(loaded.dim() == 6);

  // subject mismatch between manifest and file
  {
    std::ofstream m(dir / "bad.tsv");
    m << "templates/s0000_t000.reat\ts9999\ttrain\n";
  }
  CHECK_THROWS((void)load_dataset(dir / "bad.tsv"));
  {
    std::ofstream m(dir / "missing.tsv");
    m << "templates/nope.reat\ts0000\ttrain\n";
  }
  try {
    (void)load_dataset(dir / "missing.tsv");
    FAIL("expected a missing-file error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("nope.reat") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("synthetic generator regimes") {
  SyntheticDatasetSpec clean;
  clean.num_subjects = 3;
  clean.templates_per_subject = 2;
  clean.frames_per_template = 6;
  clean.dim = 8;
  clean.redundancy = 0.0;
  clean.clean_sigma = 0.0;
  clean.seed = 4;
  const auto a = generate_synthetic(clean);
  for (std::size_t i = 0; i < a.dataset.templates.size(); ++i) {
    const auto& t = a.dataset.templates[i];
    const std::size_t s = i / 2;
    for (std::size_t r = 0; r < t.size(); ++r)
      for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(t.frames(r, j) - a.prototypes(s, j)) <= 1e-6);
    const auto mean = avg_pool(t).vector;
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(mean[j] - a.prototypes(s, j)) <= 1e-6);
  }

  SyntheticDatasetSpec red = clean;
  red.redundancy = 0.75;
  red.frames_per_template = 16;
  red.clean_sigma = 0.2;
  const auto b = generate_synthetic(red);
  for (const auto& t : b.dataset.templates) {
    // find the longest run of consecutive frames that are pairwise near-identical
    std::size_t best = 0;
    for (std::size_t start = 0; start < t.size(); ++start) {
      std::size_t len = 1;
      while (start + len < t.size()) {
        bool all = true;
        for (std::size_t k = start; k < start + len && all; ++k) {
          const auto x = t.frames.row(k);
          const auto y = t.frames.row(start + len);
          all = dot(x, y) / (l2_norm(x) * l2_norm(y)) > 0.99;
        }
        if (!all) break;
        ++len;
      }
      best = std::max(best, len);
    }
    CHECK(best == 12);
  }

  // clean frames have unit norm after normalization
  Dataset copy = b.dataset;
  normalize_frames(copy);
  for (const auto& t : copy.templates)
    for (std::size_t r = 0; r < t.size(); ++r) CHECK(std::abs(l2_norm(t.frames.row(r)) - 1.0) <= 1e-9);
}

TEST_CASE("synthetic generation is deterministic and splits partition templates") {
  SyntheticDatasetSpec spec;
  spec.num_subjects = 6;
  spec.val_subjects = 1;
  spec.heldout_subjects = 2;
  spec.seed = 9;
  const auto a = generate_synthetic(spec).dataset;
  const auto b = generate_synthetic(spec).dataset;
  REQUIRE(a.templates.size() == b.templates.size());
  std::set<std::string> ids;
  for (std::size_t i = 0; i < a.templates.size(); ++i) {
    CHECK(encode_template(a.templates[i]) == encode_template(b.templates[i]));
    CHECK(ids.insert(a.templates[i].template_id).second);
  }
  spec.seed = 10;
  CHECK(encode_template(generate_synthetic(spec).dataset.templates[0]) != encode_template(a.templates[0]));

  CHECK_THROWS(SyntheticDatasetSpec{.redundancy = 1.0}.validate());
  CHECK_THROWS(SyntheticDatasetSpec{.dim = 1}.validate());
  CHECK_THROWS(SyntheticDatasetSpec{.clean_sigma = -1.0}.validate());
}

TEST_CASE("model files round trip and reject corruption") {
  for (auto arch : {Architecture::Rean, Architecture::NaiveLstm, Architecture::QualityPool}) {
    Model m = Model::create(arch, 5, 3, 8);
    for (auto& b : m.blocks())
      for (double& v : b.matrix->values()) v = static_cast<float>(v);
    const auto bytes = encode_model(m);
    const Model back = decode_model(bytes);
    CHECK(back.arch == arch);
    CHECK(flatten(back) == flatten(m));
    CHECK(encode_model(back) == bytes);

    auto bad = bytes;
    bad[1] = 'X';
    CHECK_THROWS_AS((void)decode_model(bad), FormatError);
    CHECK_THROWS_AS((void)decode_model(std::span(bytes).first(bytes.size() - 3)), FormatError);
  }
  Model m = Model::create(Architecture::Rean, 4, 2, 1);
  AdamState st = AdamState::for_model(m, 2e-3);
  st.step = 17;
  st.first_moment[0](0, 0) = 0.5;
  const auto [m2, st2] = decode_checkpoint(encode_checkpoint(m, st));
  CHECK(st2.step == 17);
  CHECK(st2.lr == 2e-3);
  CHECK(st2.first_moment[0](0, 0) == 0.5);
  CHECK(m2.dim() == 4);
}
