// unirep command-line tool: gen-data, train, sweep, plot.

#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "unirep/unirep.hpp"

namespace fs = std::filesystem;
using namespace unirep;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kNumerical = 3, kIo = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Output staged in a sibling temporary path and renamed into place on
// commit; an existing completed output is replaced only with --force.
class StagedOutput {
 public:
  StagedOutput(fs::path target, bool force, bool directory) : target_(std::move(target)), directory_(directory) {
    if (target_.empty()) throw UsageError("--out must not be empty");
    if (fs::exists(target_) && !force) {
      throw UsageError("output '" + target_.string() + "' exists; pass --force to overwrite");
    }
    staging_ = target_;
    staging_ += ".tmp-" + std::to_string(::getpid());
    fs::remove_all(staging_);
    if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
    if (directory_) fs::create_directories(staging_);
  }
  ~StagedOutput() {
    std::error_code ec;
    if (!committed_) fs::remove_all(staging_, ec);
  }
  StagedOutput(const StagedOutput&) = delete;
  StagedOutput& operator=(const StagedOutput&) = delete;

  const fs::path& path() const { return staging_; }
  const fs::path& target() const { return target_; }

  void commit() {
    fs::remove_all(target_);
    fs::rename(staging_, target_);
    committed_ = true;
  }

 private:
  fs::path target_, staging_;
  bool directory_;
  bool committed_ = false;
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(p.string(), "cannot open for writing");
  f << text;
  if (!f) throw FormatError(p.string(), "write failed");
}

// Text inputs written by people (config files, reports): parse errors are
// usage errors, a missing file is an I/O error.
template <class F>
auto parse_user_file(const fs::path& p, F&& parse) {
  if (!fs::exists(p)) throw FormatError(p.string(), "no such file");
  try {
    return parse();
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::string out, name, modalities = "F,T1,T1c,T2";
  std::size_t samples = 0, size = 32;
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
  bool healthy = false, tumors = false, force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  if (a.healthy && a.tumors) throw UsageError("--healthy and --tumors are mutually exclusive");
  if (a.samples == 0) throw UsageError("--samples must be positive");
  if (a.size < 4) throw UsageError("--size must be at least 4");
  if (!(a.train_fraction > 0 && a.train_fraction < 1)) throw UsageError("--train-fraction must lie in (0,1)");
  DatasetManifest m;
  m.name = a.name;
  m.modalities = parse_modalities(a.modalities);
  m.samples = a.samples;
  m.height = m.width = a.size;
  m.seed = a.seed;
  m.train_fraction = a.train_fraction;
  m.tumors = a.tumors || (!a.healthy && a.name.find("hcp") == std::string::npos);

  StagedOutput out(a.out, a.force, true);
  save_dataset(generate_dataset(m), out.path());
  out.commit();
  std::string mods;
  for (const auto& s : m.modalities) mods += (mods.empty() ? "" : ",") + s;
  std::printf("dataset %s: %zu samples, %zux%zu, modalities %s, %s, seed %llu -> %s\n", m.name.c_str(), m.samples,
              m.height, m.width, mods.c_str(), m.tumors ? "tumors" : "healthy",
              static_cast<unsigned long long>(m.seed), a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string scenario, data, out, config;
  std::vector<std::string> pretrain_data, sets;
  std::optional<std::uint64_t> seed;
  std::optional<double> theta_seg, theta_pre;
  std::optional<std::size_t> epochs;
  bool force = false, verbose = false;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  std::vector<std::string> touched;
  const auto apply = [&](const std::string& k, const std::string& v) {
    apply_setting(cfg, k, v);
    touched.push_back(k);
  };
  if (!a.config.empty()) {
    const auto kv = parse_user_file(a.config, [&] { return read_key_values(a.config); });
    for (const auto& [k, v] : kv) apply(k, v);
  }
  if (a.seed) apply("seed", std::to_string(*a.seed));
  if (a.theta_seg) apply("theta_seg", format_double(*a.theta_seg));
  if (a.theta_pre) apply("theta_pre", format_double(*a.theta_pre));
  if (a.epochs) apply("epochs_seg", std::to_string(*a.epochs));
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    apply(std::string(trim(std::string_view(s).substr(0, eq))), std::string(trim(std::string_view(s).substr(eq + 1))));
  }
  cfg.scenario = scenario_from_string(a.scenario);
  cfg.verbose = a.verbose;
  cfg.validate();

  const auto touched_key = [&](const char* k) { return std::find(touched.begin(), touched.end(), k) != touched.end(); };
  if (cfg.scenario == Scenario::Baseline) {
    for (const char* k : {"theta_seg", "n_max_seg"}) {
      if (touched_key(k)) std::fprintf(stderr, "warning: scenario baseline does not use modality dropout; ignoring %s\n", k);
    }
  }
  if (cfg.scenario != Scenario::UrnMDPretrained) {
    for (const char* k : {"theta_pre", "n_max_pre", "lr_pre"}) {
      if (touched_key(k)) std::fprintf(stderr, "warning: scenario %s has no pre-training; ignoring %s\n", a.scenario.c_str(), k);
    }
  }
  if (cfg.scenario == Scenario::UrnMDPretrained) {
    if (a.pretrain_data.empty() || a.pretrain_data.size() > 2) {
      throw UsageError("urn-md-pretrained needs one or two --pretrain-data paths");
    }
  } else if (!a.pretrain_data.empty()) {
    throw UsageError("--pretrain-data is only valid with scenario urn-md-pretrained");
  }

  const Dataset data = load_dataset(a.data);
  std::vector<Dataset> pre;
  for (const auto& p : a.pretrain_data) pre.push_back(load_dataset(p));
  std::vector<const Dataset*> pre_ptrs;
  for (const auto& d : pre) pre_ptrs.push_back(&d);

  StagedOutput out(a.out, a.force, true);
  try {
    const auto result = run_scenario(cfg, data, pre_ptrs);
    auto model = result.model;
    std::map<std::string, std::string> meta{{"seed", std::to_string(cfg.seed)},
                                            {"segmentation_steps", std::to_string(result.segmentation.steps)}};
    if (result.pretraining) {
      meta["pretrain_epochs"] = std::to_string(result.pretraining->epochs);
      meta["pretrain_converged"] = result.pretraining->converged ? "1" : "0";
    }
    save_trained(out.path(), model, meta);
    write_loss_trace(out.path() / "loss_trace.csv", result);
    std::ostringstream run;
    run << "data=" << a.data << "\n";
    for (std::size_t i = 0; i < a.pretrain_data.size(); ++i) run << "pretrain_data." << i << "=" << a.pretrain_data[i] << "\n";
    for (const auto& [k, v] : describe(cfg)) run << k << "=" << v << "\n";
    write_text(out.path() / "run.txt", run.str());
    out.commit();
    const double last = result.segmentation.trace.empty() ? 0.0 : result.segmentation.trace.back().loss;
    std::printf("trained %s: %zu segmentation steps, final loss %s", a.scenario.c_str(), result.segmentation.steps,
                format_double(last).c_str());
    if (result.pretraining) {
      std::printf(", pre-training %zu epochs (%s)", result.pretraining->epochs,
                  result.pretraining->converged ? "converged" : "epoch limit");
    }
    std::printf(" -> %s\n", a.out.c_str());
  } catch (const NumericalError& e) {
    fs::path diag = a.out;
    diag += ".diagnostic.txt";
    std::ostringstream d;
    d << "error=" << e.what() << "\n";
    for (const auto& [k, v] : describe(cfg)) d << k << "=" << v << "\n";
    write_text(diag, d.str());
    std::fprintf(stderr, "numerical failure: %s\ndiagnostic written to %s\n", e.what(), diag.c_str());
    return kNumerical;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// sweep and plot

struct SweepArgs {
  std::string model, data, out;
  std::size_t batch_size = 4;
  bool force = false;
};

int cmd_sweep(const SweepArgs& a) {
  if (a.batch_size == 0) throw UsageError("--batch-size must be positive");
  auto model = load_trained(a.model);
  const Dataset eval = load_dataset(a.data);
  SweepOptions opt;
  opt.batch_size = a.batch_size;
  StagedOutput out(a.out, a.force, true);
  const auto report = sweep(model, eval, opt);
  write_sweep_csv(out.path() / "sweep.csv", report);
  write_text(out.path() / "sweep.svg", render_svg({{to_string(model.scenario), report}}));
  out.commit();
  std::printf("sweep of %s on %s: %zu patterns -> %s\n", to_string(model.scenario).c_str(),
              eval.manifest.name.c_str(), report.patterns().size(), a.out.c_str());
  return kOk;
}

struct PlotArgs {
  std::vector<std::string> reports, labels;
  std::string out, key = "WT", metric = "dice";
  bool force = false;
};

int cmd_plot(const PlotArgs& a) {
  if (!a.labels.empty() && a.labels.size() != a.reports.size()) {
    throw UsageError("--label must be given once per --report");
  }
  if (a.metric != "dice" && a.metric != "psnr") throw UsageError("--metric must be dice or psnr");
  std::vector<std::pair<std::string, SweepReport>> reports;
  for (std::size_t i = 0; i < a.reports.size(); ++i) {
    const fs::path p = a.reports[i];
    auto r = parse_user_file(p, [&] { return read_sweep_csv(p); });
    if (r.entries.empty()) throw UsageError(p.string() + ": report has no rows");
    std::string label = a.labels.empty() ? fs::absolute(p).parent_path().filename().string() : a.labels[i];
    reports.emplace_back(std::move(label), std::move(r));
  }
  StagedOutput out(a.out, a.force, false);
  write_text(out.path(), render_svg(reports, a.key, a.metric));
  out.commit();
  std::printf("plotted %zu report(s), %s %s -> %s\n", reports.size(), a.key.c_str(), a.metric.c_str(), a.out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segmentation under missing modalities: phantom data, training, modality sweeps."};
  app.require_subcommand(1);

  GenDataArgs g;
  auto* gen = app.add_subcommand("gen-data", "Generate a phantom dataset directory");
  gen->add_option("--out", g.out, "Output dataset directory")->required();
  gen->add_option("--name", g.name, "Dataset name")->required();
  gen->add_option("--modalities", g.modalities, "Comma-separated subset of F,T1,T1c,T2")->capture_default_str();
  gen->add_option("--samples", g.samples, "Number of samples")->required();
  gen->add_option("--size", g.size, "Image height and width")->capture_default_str();
  gen->add_option("--seed", g.seed, "Seed")->capture_default_str();
  gen->add_option("--train-fraction", g.train_fraction, "Fraction of samples in the train split")->capture_default_str();
  gen->add_flag("--healthy", g.healthy, "No tumors (default when the name contains 'hcp')");
  gen->add_flag("--tumors", g.tumors, "Tumors even when the name contains 'hcp'");
  gen->add_flag("--force", g.force, "Replace an existing output");

  TrainArgs t;
  auto* train = app.add_subcommand("train", "Train one scenario and write a checkpoint");
  train->add_option("--scenario", t.scenario, "baseline|baseline-md|urn-md|urn-md-pretrained")->required();
  train->add_option("--data", t.data, "Segmentation dataset directory")->required();
  train->add_option("--pretrain-data", t.pretrain_data, "Pre-training dataset directories (one or two)");
  train->add_option("--out", t.out, "Output checkpoint directory")->required();
  train->add_option("--seed", t.seed, "Seed");
  train->add_option("--config", t.config, "key=value config file");
  train->add_option("--set", t.sets, "Config override key=value (repeatable)");
  train->add_option("--theta-seg", t.theta_seg, "Dropout parameter for segmentation");
  train->add_option("--theta-pre", t.theta_pre, "Dropout parameter for pre-training");
  train->add_option("--epochs", t.epochs, "Segmentation epochs");
  train->add_flag("--force", t.force, "Replace an existing output");
  train->add_flag("--verbose", t.verbose, "Per-epoch progress on stderr");

  SweepArgs s;
  auto* sw = app.add_subcommand("sweep", "Evaluate every modality availability pattern");
  sw->add_option("--model", s.model, "Checkpoint directory")->required();
  sw->add_option("--data", s.data, "Evaluation dataset directory")->required();
  sw->add_option("--out", s.out, "Output directory (sweep.csv, sweep.svg)")->required();
  sw->add_option("--batch-size", s.batch_size, "Inference batch size")->capture_default_str();
  sw->add_flag("--force", s.force, "Replace an existing output");

  PlotArgs p;
  auto* plot = app.add_subcommand("plot", "Grouped bar chart of one or more sweep reports");
  plot->add_option("--report", p.reports, "Sweep CSV (repeatable)")->required();
  plot->add_option("--label", p.labels, "Legend label per report (default: report's directory name)");
  plot->add_option("--out", p.out, "Output SVG file")->required();
  plot->add_option("--key", p.key, "Region or modality")->capture_default_str();
  plot->add_option("--metric", p.metric, "dice or psnr")->capture_default_str();
  plot->add_flag("--force", p.force, "Replace an existing output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(g);
    if (*train) return cmd_train(t);
    if (*sw) return cmd_sweep(s);
    if (*plot) return cmd_plot(p);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  return kUsage;
}
