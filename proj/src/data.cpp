#include "rean/data.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "rean/binary_io.hpp"
#include "rean/errors.hpp"
#include "rean/model_io.hpp"

namespace rean {

std::vector<std::uint8_t> encode_template(const FrameEmbeddingSet& set) {
  if (!all_finite(set.frames.values())) {
    throw std::invalid_argument("encode_template: non-finite value in template '" +
                                set.template_id + "'");
  }
  binary::Writer w;
  w.magic("REAT");
  w.u32(kTemplateFormatVersion);
  w.u32(static_cast<std::uint32_t>(set.dim()));
  w.u32(static_cast<std::uint32_t>(set.size()));
  w.str(set.subject_id);
  w.str(set.template_id);
  for (double v : set.frames.values()) w.f32(static_cast<float>(v));
  return w.take();
}

FrameEmbeddingSet decode_template(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes, "template");
  if (!r.magic_matches("REAT")) throw FormatError(FormatErrorKind::BadMagic, "template: bad magic");
  const std::uint32_t version = r.u32("version");
  if (version != kTemplateFormatVersion) {
    throw FormatError(FormatErrorKind::UnsupportedVersion,
                      "template: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t dim = r.u32("D");
  const std::uint32_t n = r.u32("N");
  FrameEmbeddingSet set;
  set.subject_id = r.str("subject id");
  set.template_id = r.str("template id");
  const std::uint64_t count = std::uint64_t{n} * dim;
  r.need(static_cast<std::size_t>(count * 4), "frame payload");
  set.frames = Matrix(n, dim);
  for (double& v : set.frames.values()) v = r.f32("frame payload");
  if (r.remaining() != 0) {
    throw FormatError(FormatErrorKind::Malformed, "template: trailing bytes after payload");
  }
  return set;
}

void save_template(const FrameEmbeddingSet& set, const std::filesystem::path& path) {
  write_file(path, encode_template(set));
}

FrameEmbeddingSet load_template(const std::filesystem::path& path) {
  return decode_template(read_file(path));
}

FrameEmbeddingSet template_from_text(std::istream& in, std::string template_id,
                                     std::string subject_id) {
  std::vector<double> values;
  std::size_t cols = 0;
  std::size_t rows = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    for (char& c : line) {
      if (c == ',' || c == '\t' || c == '\r') c = ' ';
    }
    std::istringstream ls(line);
    std::string tok;
    std::vector<double> row;
    while (ls >> tok) {
      if (row.empty() && tok.front() == '#') break;
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || ptr != tok.data() + tok.size()) {
        throw std::invalid_argument("embedding text line " + std::to_string(line_no) +
                                    ": not a number '" + tok + "'");
      }
      row.push_back(v);
    }
    if (row.empty()) continue;
    if (rows == 0) cols = row.size();
    if (row.size() != cols) {
      throw ShapeError("embedding text line " + std::to_string(line_no) + ": " +
                       std::to_string(row.size()) + " values, expected " + std::to_string(cols));
    }
    values.insert(values.end(), row.begin(), row.end());
    ++rows;
  }
  return {std::move(template_id), std::move(subject_id), Matrix(rows, cols, std::move(values))};
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Gallery:
      return "gallery";
    case Split::Probe:
      return "probe";
  }
  return "unknown";
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::Train, Split::Val, Split::Gallery, Split::Probe}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown split tag '" + std::string(name) + "'");
}

std::vector<ManifestEntry> parse_manifest(std::istream& in) {
  std::vector<ManifestEntry> entries;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos) {
      throw std::invalid_argument("manifest line " + std::to_string(line_no) +
                                  ": expected path<TAB>subject_id<TAB>split");
    }
    ManifestEntry e{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1),
                    parse_split(line.substr(t2 + 1))};
    if (e.path.empty() || e.subject_id.empty()) {
      throw std::invalid_argument("manifest line " + std::to_string(line_no) +
                                  ": empty path or subject id");
    }
    if (!seen.insert(e.path).second) {
      throw std::invalid_argument("manifest line " + std::to_string(line_no) + ": template '" +
                                  e.path + "' listed more than once");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest '" + path.string() + "'");
  return parse_manifest(in);
}

void write_manifest(std::ostream& out, std::span<const ManifestEntry> entries) {
  for (const auto& e : entries) out << e.path << '\t' << e.subject_id << '\t' << to_string(e.split) << '\n';
}

std::vector<FrameEmbeddingSet> Dataset::select(Split split) const {
  std::vector<FrameEmbeddingSet> out;
  for (std::size_t i = 0; i < templates.size(); ++i) {
    if (splits[i] == split) out.push_back(templates[i]);
  }
  return out;
}

std::size_t Dataset::dim() const { return templates.empty() ? 0 : templates.front().dim(); }

void normalize_frames(Dataset& dataset) {
  for (auto& t : dataset.templates) normalize_rows(t.frames);
}

Dataset load_dataset(const std::filesystem::path& manifest, bool normalize) {
  const auto entries = read_manifest(manifest);
  const auto base = manifest.parent_path();
  Dataset ds;
  std::set<std::string> ids;
  for (const auto& e : entries) {
    const std::filesystem::path p = std::filesystem::path(e.path).is_absolute() ? std::filesystem::path(e.path) : base / e.path;
    if (!std::filesystem::exists(p)) throw std::runtime_error("template file not found: " + p.string());
    FrameEmbeddingSet set = load_template(p);
    if (set.subject_id != e.subject_id) {
      throw std::runtime_error("template '" + p.string() + "' has subject '" + set.subject_id +
                               "' but manifest says '" + e.subject_id + "'");
    }
    if (!ds.templates.empty() && set.dim() != ds.dim()) {
      throw ShapeError("template '" + p.string() + "' has D=" + std::to_string(set.dim()) +
                       ", dataset has D=" + std::to_string(ds.dim()));
    }
    if (!ids.insert(set.template_id).second) {
      throw std::runtime_error("duplicate template id '" + set.template_id + "'");
    }
    ds.templates.push_back(std::move(set));
    ds.splits.push_back(e.split);
  }
  if (normalize) normalize_frames(ds);
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "templates");
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < dataset.templates.size(); ++i) {
    const auto& t = dataset.templates[i];
    const std::string rel = "templates/" + t.template_id + ".reat";
    save_template(t, dir / rel);
    entries.push_back({rel, t.subject_id, dataset.splits[i]});
  }
  std::ofstream out(dir / "manifest.tsv", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest in '" + dir.string() + "'");
  write_manifest(out, entries);
}

}  // namespace rean
