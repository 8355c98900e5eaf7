#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sleepdg/autodiff/checkpoint.hpp"
#include "sleepdg/config.hpp"
#include "sleepdg/data_io.hpp"
#include "sleepdg/gradient_suite.hpp"
#include "sleepdg/harness.hpp"
#include "sleepdg/reports.hpp"

namespace sleepdg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitContract = 1;
inline constexpr int kExitUsage = 2;
inline constexpr double kGradTolerance = 1e-4;

/// A command line that parsed but is missing something a subcommand needs.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config_path;
  std::string preset;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string arm;
  std::vector<std::string> arms;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  std::optional<std::size_t> holdout;
  std::optional<std::size_t> sequences;
  std::optional<std::size_t> epochs;
  std::optional<double> shift;
  std::size_t jobs = 1;
  std::size_t trials = 20;
  bool dry_run = false;
};

namespace detail {

/// Appends timestamped lines to <out>/run.log; the only file with wall-clock content.
class RunLog {
 public:
  explicit RunLog(const std::string& dir) : os_(dir + "/run.log", std::ios::trunc) {
    if (!os_) throw ContractError("cannot write " + dir + "/run.log");
  }
  void operator()(const std::string& line) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    os_ << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << line << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

inline nlohmann::json read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("config: cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractError("config: " + path + " is not valid JSON: " + e.what());
  }
}

inline ExperimentConfig resolve_config(const Options& o, bool seed_is_data_seed) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config_path.empty()) j = read_config_file(o.config_path);
  if (!j.is_object()) throw ContractError("config: top level must be an object");
  if (!o.preset.empty()) j["preset"] = o.preset;
  ExperimentConfig c = config_from_json(j);
  if (o.seed) {
    if (seed_is_data_seed) {
      c.data.seed = *o.seed;
    } else {
      c.training.seeds = {*o.seed};
    }
  }
  if (!o.seeds.empty()) c.training.seeds = o.seeds;
  if (!o.arm.empty()) c.training.arm = parse_arm(o.arm);
  if (o.holdout) c.training.holdout = *o.holdout;
  if (o.sequences) c.data.sequences_per_domain = *o.sequences;
  if (o.epochs) c.training.epochs = *o.epochs;
  if (o.shift) c.data.shift_magnitude = *o.shift;
  c.validate();
  return c;
}

inline void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required flag ") + flag);
}

inline std::string prepare_out(const Options& o) {
  require(o.out, "--out");
  std::filesystem::create_directories(o.out);
  return o.out;
}

inline std::vector<const data::DomainDataset*> pointers(const std::vector<data::DomainDataset>& v) {
  std::vector<const data::DomainDataset*> out;
  for (const auto& d : v) out.push_back(&d);
  return out;
}

inline data::DomainSpec base_spec(const ExperimentConfig& c) {
  auto s = data::DomainSpec::standard();
  s.sample_rate = c.data.sample_rate;
  s.samples_per_epoch = c.model.samples_per_epoch;
  s.sequence_length = c.model.sequence_length;
  s.channels = c.model.channels;
  return s;
}

inline int gen_data(const ExperimentConfig& c, const std::string& out, RunLog& log, std::ostream& os) {
  const auto domains =
      data::make_benchmark(c.data.seed, c.data.shift_magnitude, c.data.sequences_per_domain, base_spec(c));
  for (const auto& d : domains) {
    const auto path = out + "/" + data::domain_file_name(d.spec.domain_id);
    data::write_dataset(path, d);
    log("wrote " + path);
    os << path << '\n';
  }
  return kExitOk;
}

inline int train(const ExperimentConfig& c, const Options& o, const std::string& out, RunLog& log,
                 std::ostream& os) {
  require(o.data, "--data");
  const auto reg = data::DatasetRegistry::from_directory(o.data);
  const std::size_t holdout = c.training.holdout;
  if (!reg.contains(holdout)) throw ContractError("training.holdout: domain " + std::to_string(holdout) + " not in " + o.data);
  std::vector<data::DomainDataset> sources;
  for (auto id : reg.ids()) {
    if (id != holdout) sources.push_back(reg.load(id));
  }
  const std::uint64_t seed = c.training.seeds.front();
  auto tr = harness::train(c, pointers(sources), harness::derive_seed({seed, holdout}), std::ref(log));
  {
    std::ostringstream csv;
    reports::write_losses_header(csv);
    reports::write_loss_rows(csv, holdout, seed, tr.losses);
    reports::write_text(out + "/losses.csv", csv.str());
  }
  ad::save_checkpoint(out + "/checkpoint.bin", tr.model.named_parameters());
  harness::FoldResult f;
  f.holdout = holdout;
  f.best_epoch = tr.best_epoch;
  f.best_validation_acc = tr.best_validation_acc;
  f.test = harness::evaluate(tr.model, reg.load(holdout));
  reports::write_json(out + "/metrics.json",
                      {{"arm", arm_name(c.training.arm)}, {"seed", seed}, {"fold", reports::to_json(f)}});
  os << arm_name(c.training.arm) << " holdout " << holdout << " acc " << f.test.acc << " mf1 " << f.test.mf1
     << '\n';
  return kExitOk;
}

inline int loo(const ExperimentConfig& c, const Options& o, const std::string& out, RunLog& log,
               std::ostream& os) {
  require(o.data, "--data");
  const auto reg = data::DatasetRegistry::from_directory(o.data);
  std::vector<harness::LooReport> runs;
  std::ostringstream csv;
  reports::write_losses_header(csv);
  for (auto seed : c.training.seeds) {
    log("seed " + std::to_string(seed));
    auto r = harness::leave_one_out(c, reg.ids(), [&](std::size_t id) { return reg.load(id); }, seed,
                                    std::ref(log));
    for (const auto& f : r.folds) reports::write_loss_rows(csv, f.holdout, seed, f.losses);
    for (const auto& f : r.folds) {
      os << arm_name(r.arm) << " seed " << seed << " holdout " << f.holdout << " acc " << f.test.acc
         << " mf1 " << f.test.mf1 << '\n';
    }
    os << arm_name(r.arm) << " seed " << seed << " average acc " << r.avg_acc << " mf1 " << r.avg_mf1 << '\n';
    runs.push_back(std::move(r));
  }
  reports::write_text(out + "/losses.csv", csv.str());
  reports::write_json(out + "/metrics.json", reports::loo_metrics(runs));
  return kExitOk;
}

inline int ablate(const ExperimentConfig& c, const Options& o, const std::string& out, RunLog& log,
                  std::ostream& os) {
  require(o.data, "--data");
  const auto reg = data::DatasetRegistry::from_directory(o.data);
  std::vector<data::DomainDataset> domains;
  for (auto id : reg.ids()) domains.push_back(reg.load(id));
  std::vector<Arm> arms;
  for (const auto& a : o.arms) arms.push_back(parse_arm(a));
  if (arms.empty()) arms = all_arms();
  if (o.jobs == 0) throw UsageError("--jobs must be at least 1");
  const auto result = harness::run_ablation(c, domains, arms, c.training.seeds, o.jobs, std::ref(log));
  std::ostringstream grid, runs;
  reports::write_ablation_grid(grid, result);
  reports::write_ablation_runs(runs, result);
  reports::write_text(out + "/ablation.csv", grid.str());
  reports::write_text(out + "/ablation_runs.csv", runs.str());
  reports::write_json(out + "/metrics.json", reports::ablation_metrics(result));
  os << grid.str();
  return kExitOk;
}

inline int export_features(const ExperimentConfig& c, const Options& o, const std::string& out, RunLog& log,
                           std::ostream& os, std::ostream& err) {
  require(o.data, "--data");
  require(o.checkpoint, "--checkpoint");
  const auto reg = data::DatasetRegistry::from_directory(o.data);
  harness::Model model(c.model, 0);
  ad::load_checkpoint(o.checkpoint, model.named_parameters());
  std::vector<data::DomainDataset> sets;
  for (auto id : reg.ids()) sets.push_back(reg.load(id));
  const auto fx = harness::export_features(model, pointers(sets));
  std::ostringstream csv;
  reports::write_features(csv, fx);
  reports::write_text(out + "/features.csv", csv.str());
  reports::write_json(out + "/pca.json", {{"eigenvalue", fx.component.eigenvalue},
                                          {"iterations", fx.component.iterations},
                                          {"degenerate", fx.component.degenerate},
                                          {"direction", fx.component.direction}});
  if (fx.component.degenerate) {
    err << "warning: feature covariance is zero; pc1 is all zeros\n";
    log("degenerate covariance");
  }
  os << fx.domain.size() << " epochs exported\n";
  return kExitOk;
}

inline int grad_check(const Options& o, std::ostream& os) {
  if (o.trials == 0) throw UsageError("--trials must be at least 1");
  bool ok = true;
  for (const auto& r : gradcheck::run_suite(o.trials, o.seed.value_or(0))) {
    const bool pass = r.max_error < kGradTolerance;
    ok = ok && pass;
    os << std::left << std::setw(20) << r.name << " max_rel_error " << std::scientific << std::setprecision(3)
       << r.max_error << std::defaultfloat << (pass ? "  ok" : "  FAIL") << '\n';
  }
  return ok ? kExitOk : kExitContract;
}

}  // namespace detail

/// Parses and runs one subcommand. Returns the process exit status.
inline int run(const std::vector<std::string>& args, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sleep staging with domain-generalizing feature alignment", "sleepdg"};
  app.require_subcommand(1, 1);
  Options o;

  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", o.config_path, "JSON config; absent fields come from the preset")
        ->check(CLI::ExistingFile);
    s->add_option("--preset", o.preset, "Base preset: desk or paper (overrides the file's preset)");
    s->add_flag("--dry-run", o.dry_run, "Resolve and echo the config to <out>/config.json, then stop");
  };
  auto add_out = [&](CLI::App* s) { s->add_option("--out", o.out, "Output directory"); };
  auto add_data = [&](CLI::App* s) { s->add_option("--data", o.data, "Directory of domain_<id>.bin files"); };
  auto add_epochs = [&](CLI::App* s) { s->add_option("--epochs", o.epochs, "Training epochs per fold"); };

  auto* gen = app.add_subcommand("gen-data", "Write the five synthetic domains");
  add_config(gen);
  add_out(gen);
  gen->add_option("--seed", o.seed, "Generator seed (data.seed)");
  gen->add_option("--shift", o.shift, "Shift magnitude (data.shift_magnitude)");
  gen->add_option("--sequences", o.sequences, "Sequences per domain (data.sequences_per_domain)");

  auto* tr = app.add_subcommand("train", "Train on four domains, then test on the held-out one");
  add_config(tr);
  add_out(tr);
  add_data(tr);
  add_epochs(tr);
  tr->add_option("--seed", o.seed, "Training seed");
  tr->add_option("--arm", o.arm, "BASE, AE, EA, SA, AE+EA, AE+SA or FULL");
  tr->add_option("--holdout", o.holdout, "Held-out domain id (training.holdout)");

  auto* lo = app.add_subcommand("loo", "Leave-one-domain-out evaluation over all five folds");
  add_config(lo);
  add_out(lo);
  add_data(lo);
  add_epochs(lo);
  lo->add_option("--seed", o.seed, "Single training seed");
  lo->add_option("--seeds", o.seeds, "Training seeds, comma separated")->delimiter(',');
  lo->add_option("--arm", o.arm, "BASE, AE, EA, SA, AE+EA, AE+SA or FULL");

  auto* ab = app.add_subcommand("ablate", "Leave-one-domain-out for several arms and seeds");
  add_config(ab);
  add_out(ab);
  add_data(ab);
  add_epochs(ab);
  ab->add_option("--arms", o.arms, "Arms, comma separated (default: all seven)")->delimiter(',');
  ab->add_option("--seeds", o.seeds, "Training seeds, comma separated")->delimiter(',');
  ab->add_option("--jobs", o.jobs, "Concurrent fold jobs")->capture_default_str();

  auto* ex = app.add_subcommand("export-features", "Dump encoder features with a 1-D PCA projection");
  add_config(ex);
  add_out(ex);
  add_data(ex);
  ex->add_option("--checkpoint", o.checkpoint, "Checkpoint written by train");

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every loss term and the model");
  gc->add_option("--trials", o.trials, "Random instances per term")->capture_default_str();
  gc->add_option("--seed", o.seed, "First seed");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    for (auto* s : app.get_subcommands()) {
      if (s->parsed()) {
        os << s->help();
        return kExitOk;
      }
    }
    os << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    os << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* scope = &app;
    for (auto* s : app.get_subcommands()) {
      if (s->parsed()) scope = s;
    }
    err << scope->help();
    return kExitUsage;
  }

  try {
    if (gc->parsed()) return detail::grad_check(o, os);
    const bool is_gen = gen->parsed();
    const ExperimentConfig cfg = detail::resolve_config(o, is_gen);
    const std::string out = detail::prepare_out(o);
    reports::write_json(out + "/config.json", to_json(cfg));
    if (o.dry_run) {
      os << to_json(cfg).dump(2) << '\n';
      return kExitOk;
    }
    detail::RunLog log(out);
    log("config resolved (preset " + cfg.preset + ")");
    int status = kExitOk;
    if (is_gen) status = detail::gen_data(cfg, out, log, os);
    if (tr->parsed()) status = detail::train(cfg, o, out, log, os);
    if (lo->parsed()) status = detail::loo(cfg, o, out, log, os);
    if (ab->parsed()) status = detail::ablate(cfg, o, out, log, os);
    if (ex->parsed()) status = detail::export_features(cfg, o, out, log, os, err);
    log("done");
    return status;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitContract;
  }
}

}  // namespace sleepdg::cli
