// Command-line front end: dataset generation, training, aggregation and
// evaluation. Every run echoes its effective configuration.

#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rean/aggregator.hpp"
#include "rean/data.hpp"
#include "rean/errors.hpp"
#include "rean/eval.hpp"
#include "rean/model_io.hpp"
#include "rean/pipeline.hpp"
#include "rean/training.hpp"

namespace fs = std::filesystem;
using namespace rean;

namespace {

enum class LogLevel { Quiet = 0, Info = 1, Debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("REAN_LOG");
  if (env == nullptr) return LogLevel::Info;
  const std::string v = env;
  if (v == "quiet" || v == "0") return LogLevel::Quiet;
  if (v == "debug" || v == "2") return LogLevel::Debug;
  return LogLevel::Info;
}

std::ostream& log(LogLevel level) {
  static std::ostringstream sink;
  if (level > log_level()) {
    sink.str({});
    return sink;
  }
  return std::clog;
}

// Writes the effective configuration of `app` (defaults included) next to the
// outputs and, at debug verbosity, to the log.
void echo_config(const CLI::App& app, const fs::path& path) {
  std::string text = "# rean " + app.get_name() + "\n" + app.config_to_str(true, false);
  if (!path.empty()) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
  }
  log(LogLevel::Debug) << text;
}

std::vector<double> parse_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::optional<Model> load_optional_model(const std::string& path) {
  if (path.empty() || path == "none") return std::nullopt;
  return load_model(path);
}

std::vector<TemplateRepresentation> represent(std::span<const FrameEmbeddingSet> sets,
                                              const std::string& method,
                                              const std::optional<Model>& model,
                                              std::size_t threads) {
  return aggregate_all(sets, parse_method(method), model ? &*model : nullptr, threads);
}

// ---------------------------------------------------------------------------

struct GenOptions {
  SyntheticDatasetSpec spec;
  std::string out;
};

void run_gen(const CLI::App& app, const GenOptions& o) {
  o.spec.validate();
  const SyntheticDataset synth = generate_synthetic(o.spec);
  save_dataset(synth.dataset, o.out);
  echo_config(app, fs::path(o.out) / "config.txt");
  log(LogLevel::Info) << "wrote " << synth.dataset.templates.size() << " templates to "
                      << (fs::path(o.out) / "manifest.tsv").string() << '\n';
}

struct ImportOptions {
  std::string in;
  std::string out;
  std::string subject;
  std::string template_id;
  std::size_t dim = 0;
};

void run_import(const CLI::App& app, const ImportOptions& o) {
  std::ifstream in(o.in);
  if (!in) throw std::runtime_error("cannot open " + o.in);
  const std::string tid = o.template_id.empty() ? fs::path(o.in).stem().string() : o.template_id;
  FrameEmbeddingSet set = template_from_text(in, tid, o.subject);
  if (o.dim != 0) {
    // an empty file becomes a failure-to-enroll template of the given width
    if (set.size() == 0) set.frames = Matrix(0, o.dim);
    if (set.dim() != o.dim) {
      throw ShapeError(o.in + ": frames have D=" + std::to_string(set.dim()) + ", --dim is " +
                       std::to_string(o.dim));
    }
  }
  save_template(set, o.out);
  echo_config(app, o.out + ".config.txt");
  log(LogLevel::Info) << "imported " << set.size() << " x " << set.dim() << " frames into "
                      << o.out << '\n';
}

struct TrainOptions {
  std::string manifest;
  std::string arch = "rean";
  std::string out;
  std::string resume;
  std::size_t hidden = 128;
  FitConfig fit;
  std::uint64_t init_seed = 0;
};

void run_train(const CLI::App& app, TrainOptions o) {
  const Dataset ds = load_dataset(o.manifest);
  const auto train = ds.select(Split::Train);
  const auto val = ds.select(Split::Val);
  o.fit.batch.seed = o.fit.seed;
  const fs::path out = o.out;
  fs::create_directories(out);
  echo_config(app, out / "config.txt");

  Model initial;
  std::optional<AdamState> resume;
  if (!o.resume.empty()) {
    auto [model, state] = decode_checkpoint(read_file(o.resume));
    initial = std::move(model);
    resume = std::move(state);
    if (initial.dim() != ds.dim()) {
      throw ShapeError("checkpoint dimension " + std::to_string(initial.dim()) +
                       " does not match dataset dimension " + std::to_string(ds.dim()));
    }
  } else {
    initial = Model::create(parse_architecture(o.arch), ds.dim(), o.hidden, o.init_seed);
  }

  std::ofstream log_file(out / "train.log");
  log_file << "# epoch\tmean_loss\tmean_hard_triplets\tval_loss\n" << std::setprecision(17);
  auto on_epoch = [&](const EpochStats& s) {
    log_file << s.epoch << '\t' << s.mean_loss << '\t' << s.mean_hard_triplets << '\t' << s.val_loss
             << '\n';
    log_file.flush();
    log(LogLevel::Info) << "epoch " << s.epoch << "  loss " << s.mean_loss << "  M "
                        << s.mean_hard_triplets << "  val " << s.val_loss << '\n';
  };
  const TrainReport report = fit(train, val, initial, o.fit, on_epoch, resume ? &*resume : nullptr);
  log(LogLevel::Info) << "gradient check: max relative error "
                      << report.gradient_check.max_relative_error << " over "
                      << report.gradient_check.checked << " coordinates\n";
  save_model(report.final_model, out / "model.bin");
  write_file(out / "checkpoint.bin", encode_checkpoint(report.final_model, report.optimizer));
}

struct AggregateOptions {
  std::string method = "rean";
  std::string model;
  std::vector<std::string> inputs;
  std::string out;
};

void run_aggregate(const CLI::App& app, const AggregateOptions& o) {
  const auto model = load_optional_model(o.model);
  std::vector<FrameEmbeddingSet> sets;
  for (const auto& path : o.inputs) sets.push_back(load_template(path));
  for (auto& s : sets) normalize_rows(s.frames);
  const auto reps = represent(sets, o.method, model, 1);
  if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
  std::ofstream out(o.out);
  if (!out) throw std::runtime_error("cannot write " + o.out);
  out << std::setprecision(17);
  for (const auto& r : reps) {
    out << r.template_id << '\t' << r.subject_id << '\t' << to_string(r.method) << '\t';
    for (std::size_t j = 0; j < r.vector.size(); ++j) out << (j ? " " : "") << r.vector[j];
    out << '\n';
  }
  echo_config(app, o.out + ".config.txt");
}

struct IdentifyOptions {
  std::string manifest;
  std::string protocol = "sv2still";
  std::string method = "rean";
  std::string model;
  std::string gallery_method;
  std::string gallery_model;
  std::string ranks = "1,5,10";
  std::string fpirs = "0.01,0.1";
  std::size_t threads = 1;
  std::string out;
};

void write_outputs(const fs::path& dir, const CLI::App& app, const auto& result) {
  fs::create_directories(dir);
  echo_config(app, dir / "config.txt");
  std::ofstream metrics(dir / "metrics.tsv");
  write_metrics(metrics, result);
  std::ofstream table(dir / "report.txt");
  print_table(table, result);
}

void run_identify(const CLI::App& app, const IdentifyOptions& o) {
  const Dataset ds = load_dataset(o.manifest);
  const auto sets = build_protocol(ds, parse_protocol(o.protocol));
  const auto model = load_optional_model(o.model);
  const std::string gmethod = o.gallery_method.empty() ? o.method : o.gallery_method;
  const auto gmodel = o.gallery_model.empty() ? model : load_optional_model(o.gallery_model);
  const auto probes = represent(sets.probes, o.method, model, o.threads);
  const auto gallery = represent(sets.gallery, gmethod, gmodel, o.threads);

  std::vector<std::size_t> ranks;
  for (double r : parse_list(o.ranks)) {
    if (r < 1 || r != std::floor(r)) throw std::invalid_argument("ranks must be positive integers");
    ranks.push_back(static_cast<std::size_t>(r));
  }
  const auto fpirs = parse_list(o.fpirs);
  const auto report = evaluate_identification(probes, gallery, ranks, fpirs);
  print_table(std::cout, report);
  write_outputs(o.out, app, report);
}

struct VerifyOptions {
  std::string manifest;
  std::string split = "probe";
  std::string method = "rean";
  std::string model;
  std::string pairs;
  std::size_t folds = 10;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string out;
};

// Pair list: `template_a<TAB>template_b<TAB>same(0|1)` per line.
std::vector<LabeledPair> read_pairs(const std::string& path,
                                    std::span<const TemplateRepresentation> reps) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < reps.size(); ++i) index.emplace(reps[i].template_id, i);
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<LabeledPair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string a, b;
    int same = -1;
    if (!(ls >> a >> b >> same) || (same != 0 && same != 1)) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed pair line");
    }
    for (const auto* id : {&a, &b}) {
      if (!index.contains(*id)) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": unknown template '" +
                                 *id + "'");
      }
    }
    pairs.push_back({index.at(a), index.at(b), same == 1});
  }
  return pairs;
}

void run_verify(const CLI::App& app, const VerifyOptions& o) {
  const Dataset ds = load_dataset(o.manifest);
  const auto sets = ds.select(parse_split(o.split));
  const auto model = load_optional_model(o.model);
  const auto reps = represent(sets, o.method, model, o.threads);
  const auto pairs = o.pairs.empty() ? verification_pairs(reps, o.seed) : read_pairs(o.pairs, reps);
  const auto scored = score_pairs(reps, pairs);
  const auto result = verification_kfold(scored, o.folds);
  print_table(std::cout, result);
  write_outputs(o.out, app, result);
}

struct GradcheckOptions {
  std::string arch = "rean";
  std::size_t dim = 4;
  std::size_t hidden = 3;
  std::size_t frames = 3;
  std::size_t subjects = 2;
  std::size_t templates = 2;
  double eps = 1e-4;
  double margin = 3.0;
  double tolerance = 1e-3;
  std::size_t coords = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int run_gradcheck(const CLI::App& app, const GradcheckOptions& o) {
  if (!o.out.empty()) echo_config(app, o.out);
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> normal;
  std::vector<FrameEmbeddingSet> batch;
  for (std::size_t s = 0; s < o.subjects; ++s) {
    for (std::size_t t = 0; t < o.templates; ++t) {
      FrameEmbeddingSet set{"s" + std::to_string(s) + "_t" + std::to_string(t),
                            "s" + std::to_string(s), Matrix(o.frames, o.dim)};
      for (double& v : set.frames.values()) v = normal(rng);
      normalize_rows(set.frames);
      batch.push_back(std::move(set));
    }
  }
  const Model model = Model::create(parse_architecture(o.arch), o.dim, o.hidden, o.seed + 1);
  const auto report = gradient_check(model, batch, TripletLossConfig{o.margin}, o.eps, o.coords, o.seed);
  std::cout << std::setprecision(6) << "max relative error " << report.max_relative_error
            << " at parameter " << report.worst_parameter_index << " (" << report.checked
            << " coordinates, eps " << report.eps << ")\n";
  return report.max_relative_error < o.tolerance ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent attention aggregation of embedding sets"};
  app.name("rean");
  app.require_subcommand(1, 1);

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset and manifest");
  gen_cmd->add_option("--subjects", gen.spec.num_subjects, "Number of subjects")->capture_default_str();
  gen_cmd->add_option("--templates", gen.spec.templates_per_subject, "Templates per subject")->capture_default_str();
  gen_cmd->add_option("--frames", gen.spec.frames_per_template, "Frames per template")->capture_default_str();
  gen_cmd->add_option("--dim", gen.spec.dim, "Embedding dimension")->capture_default_str();
  gen_cmd->add_option("--redundancy", gen.spec.redundancy, "Fraction of near-duplicate frames")->capture_default_str();
  gen_cmd->add_option("--clean-sigma", gen.spec.clean_sigma)->capture_default_str();
  gen_cmd->add_option("--corrupt-sigma", gen.spec.corrupt_sigma)->capture_default_str();
  gen_cmd->add_option("--distractor-pull", gen.spec.distractor_pull)->capture_default_str();
  gen_cmd->add_option("--jitter", gen.spec.duplicate_jitter, "Noise on duplicated frames")->capture_default_str();
  gen_cmd->add_option("--val-subjects", gen.spec.val_subjects)->capture_default_str();
  gen_cmd->add_option("--heldout-subjects", gen.spec.heldout_subjects,
                      "Subjects reserved for probe/gallery evaluation")->capture_default_str();
  gen_cmd->add_option("--seed", gen.spec.seed)->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  ImportOptions imp;
  auto* imp_cmd = app.add_subcommand("import", "Convert a text embedding matrix into a template file");
  imp_cmd->add_option("--in", imp.in, "Text file, one frame per line")->required()->check(CLI::ExistingFile);
  imp_cmd->add_option("--subject", imp.subject, "Subject id")->required();
  imp_cmd->add_option("--template-id", imp.template_id, "Template id (default: file stem)");
  imp_cmd->add_option("--dim", imp.dim, "Expected D; required to import an empty template")
      ->capture_default_str();
  imp_cmd->add_option("--out", imp.out, "Output template file")->required();

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Train an aggregator with hard-triplet loss");
  train_cmd->add_option("--manifest", tr.manifest)->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--arch", tr.arch, "rean, naive_lstm or quality")->capture_default_str();
  train_cmd->add_option("--hidden", tr.hidden, "LSTM (or quality MLP) hidden width")->capture_default_str();
  train_cmd->add_option("--epochs", tr.fit.epochs)->capture_default_str();
  train_cmd->add_option("--lr", tr.fit.lr)->capture_default_str();
  train_cmd->add_option("--margin", tr.fit.loss.margin)->capture_default_str();
  train_cmd->add_option("--batch-subjects", tr.fit.batch.subjects_per_batch)->capture_default_str();
  train_cmd->add_option("--batch-templates", tr.fit.batch.templates_per_subject)->capture_default_str();
  train_cmd->add_option("--frames", tr.fit.batch.frames_per_template)->capture_default_str();
  train_cmd->add_option("--batches-per-epoch", tr.fit.batches_per_epoch, "0 means one pass over the data")
      ->capture_default_str();
  train_cmd->add_option("--clip-norm", tr.fit.clip_norm)->capture_default_str();
  train_cmd->add_option("--gradcheck-coords", tr.fit.gradcheck_coords)->capture_default_str();
  train_cmd->add_option("--threads", tr.fit.threads)->capture_default_str();
  train_cmd->add_option("--seed", tr.fit.seed, "Batch sampling seed")->capture_default_str();
  train_cmd->add_option("--init-seed", tr.init_seed, "Parameter initialization seed")->capture_default_str();
  train_cmd->add_option("--resume", tr.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Output directory")->required();

  AggregateOptions ag;
  auto* ag_cmd = app.add_subcommand("aggregate", "Aggregate template files into representations");
  ag_cmd->add_option("--method", ag.method, "rean, avg, quality, naive_lstm, context_filter")
      ->capture_default_str();
  ag_cmd->add_option("--model", ag.model, "Model file, or 'none'")->required();
  ag_cmd->add_option("--in", ag.inputs, "Template files")->required();
  ag_cmd->add_option("--out", ag.out, "Output text file")->required();

  IdentifyOptions id;
  auto* id_cmd = app.add_subcommand("eval-identify", "Closed- and open-set identification");
  id_cmd->add_option("--manifest", id.manifest)->required()->check(CLI::ExistingFile);
  id_cmd->add_option("--protocol", id.protocol, "sv2still or sv2sv")->capture_default_str();
  id_cmd->add_option("--method", id.method)->capture_default_str();
  id_cmd->add_option("--model", id.model, "Model file, or 'none'")->required();
  id_cmd->add_option("--gallery-method", id.gallery_method, "Method for gallery templates (default: --method)");
  id_cmd->add_option("--gallery-model", id.gallery_model, "Model for gallery templates (default: --model)");
  id_cmd->add_option("--ranks", id.ranks)->capture_default_str();
  id_cmd->add_option("--fpir", id.fpirs)->capture_default_str();
  id_cmd->add_option("--threads", id.threads)->capture_default_str();
  id_cmd->add_option("--out", id.out, "Output directory")->required();

  VerifyOptions ve;
  auto* ve_cmd = app.add_subcommand("eval-verify", "K-fold pair verification");
  ve_cmd->add_option("--manifest", ve.manifest)->required()->check(CLI::ExistingFile);
  ve_cmd->add_option("--split", ve.split)->capture_default_str();
  ve_cmd->add_option("--method", ve.method)->capture_default_str();
  ve_cmd->add_option("--model", ve.model, "Model file, or 'none'")->required();
  ve_cmd->add_option("--pairs", ve.pairs, "Pair list (default: generated)")->check(CLI::ExistingFile);
  ve_cmd->add_option("--folds", ve.folds)->capture_default_str();
  ve_cmd->add_option("--seed", ve.seed)->capture_default_str();
  ve_cmd->add_option("--threads", ve.threads)->capture_default_str();
  ve_cmd->add_option("--out", ve.out, "Output directory")->required();

  GradcheckOptions gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gc_cmd->add_option("--arch", gc.arch)->capture_default_str();
  gc_cmd->add_option("--dim", gc.dim)->capture_default_str();
  gc_cmd->add_option("--hidden", gc.hidden)->capture_default_str();
  gc_cmd->add_option("--frames", gc.frames)->capture_default_str();
  gc_cmd->add_option("--subjects", gc.subjects)->capture_default_str();
  gc_cmd->add_option("--templates", gc.templates)->capture_default_str();
  gc_cmd->add_option("--eps", gc.eps)->capture_default_str();
  gc_cmd->add_option("--margin", gc.margin)->capture_default_str();
  gc_cmd->add_option("--tolerance", gc.tolerance)->capture_default_str();
  gc_cmd->add_option("--coords", gc.coords, "Random coordinate subset (0: all)")->capture_default_str();
  gc_cmd->add_option("--seed", gc.seed)->capture_default_str();
  gc_cmd->add_option("--out", gc.out, "Config echo file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "rean: " << e.what() << "\n\n";
    const CLI::App* failed = &app;
    for (auto* sub : app.get_subcommands()) failed = sub;
    std::cerr << failed->help();
    return 2;
  }

  try {
    if (*gen_cmd) run_gen(*gen_cmd, gen);
    if (*imp_cmd) run_import(*imp_cmd, imp);
    if (*train_cmd) run_train(*train_cmd, tr);
    if (*ag_cmd) run_aggregate(*ag_cmd, ag);
    if (*id_cmd) run_identify(*id_cmd, id);
    if (*ve_cmd) run_verify(*ve_cmd, ve);
    if (*gc_cmd) return run_gradcheck(*gc_cmd, gc);
  } catch (const std::exception& e) {
    std::cerr << "rean: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
