#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sleepdg/errors.hpp"
#include "sleepdg/harness.hpp"

namespace sleepdg::reports {

/// Shortest text that reads back to the same double; empty for NaN.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline nlohmann::json to_json(const metrics::ConfusionMatrix& cm) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t t = 0; t < cm.classes; ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < cm.classes; ++p) row.push_back(cm.at(t, p));
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json to_json(const harness::MetricsReport& m) {
  return {{"acc", m.acc},
          {"mf1", m.mf1},
          {"per_class_f1", m.per_class_f1},
          {"confusion", to_json(m.confusion)},
          {"stages", data::kStageNames}};
}

inline nlohmann::json to_json(const harness::FoldResult& f) {
  return {{"holdout", f.holdout},
          {"test", to_json(f.test)},
          {"best_epoch", f.best_epoch},
          {"best_validation_acc", f.best_validation_acc}};
}

inline nlohmann::json to_json(const harness::LooReport& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) folds.push_back(to_json(f));
  return {{"arm", arm_name(r.arm)}, {"seed", r.seed}, {"folds", folds},
          {"avg_acc", r.avg_acc}, {"avg_mf1", r.avg_mf1}};
}

/// Per-seed reports plus their mean.
inline nlohmann::json loo_metrics(const std::vector<harness::LooReport>& runs) {
  if (runs.empty()) throw ContractError("loo_metrics: no runs");
  nlohmann::json list = nlohmann::json::array();
  double acc = 0.0, mf1 = 0.0;
  for (const auto& r : runs) {
    list.push_back(to_json(r));
    acc += r.avg_acc;
    mf1 += r.avg_mf1;
  }
  const auto n = static_cast<double>(runs.size());
  return {{"arm", arm_name(runs.front().arm)}, {"runs", list}, {"avg_acc", acc / n}, {"avg_mf1", mf1 / n}};
}

inline nlohmann::json ablation_metrics(const harness::AblationResult& a) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& s : a.summary) {
    arms.push_back({{"arm", arm_name(s.arm)},
                    {"fold_acc_mean", s.fold_acc_mean},
                    {"acc_mean", s.acc_mean},
                    {"acc_std", s.acc_std},
                    {"mf1_mean", s.mf1_mean},
                    {"mf1_std", s.mf1_std}});
  }
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : a.runs) runs.push_back(to_json(r));
  return {{"summary", arms}, {"runs", runs}};
}

inline void write_losses_header(std::ostream& os) {
  os << "fold,seed,step,epoch,total,classify,reconstruction,epoch_level,sequence_level\n";
}

/// One row per optimisation step; terms the arm does not use are left empty.
inline void write_loss_rows(std::ostream& os, std::size_t fold, std::uint64_t seed,
                            const std::vector<harness::LossRow>& rows) {
  for (const auto& r : rows) {
    os << fold << ',' << seed << ',' << r.step << ',' << r.epoch << ',' << format_number(r.total) << ','
       << format_number(r.classify) << ',' << format_number(r.reconstruction) << ','
       << format_number(r.epoch_level) << ',' << format_number(r.sequence_level) << '\n';
  }
}

/// Arm x held-out-domain grid of seed-averaged accuracy, with mean and sample
/// standard deviation over seeds of the fold-averaged scores.
inline void write_ablation_grid(std::ostream& os, const harness::AblationResult& a) {
  if (a.runs.empty()) throw ContractError("write_ablation_grid: empty result");
  os << "arm";
  for (const auto& f : a.runs.front().folds) os << ",holdout_" << f.holdout;
  os << ",acc_mean,acc_std,mf1_mean,mf1_std\n";
  for (const auto& s : a.summary) {
    os << arm_name(s.arm);
    for (double v : s.fold_acc_mean) os << ',' << format_number(v);
    os << ',' << format_number(s.acc_mean) << ',' << format_number(s.acc_std) << ','
       << format_number(s.mf1_mean) << ',' << format_number(s.mf1_std) << '\n';
  }
}

inline void write_ablation_runs(std::ostream& os, const harness::AblationResult& a) {
  os << "arm,seed,holdout,acc,mf1,best_epoch,best_validation_acc\n";
  for (const auto& r : a.runs) {
    for (const auto& f : r.folds) {
      os << arm_name(r.arm) << ',' << r.seed << ',' << f.holdout << ',' << format_number(f.test.acc) << ','
         << format_number(f.test.mf1) << ',' << f.best_epoch << ',' << format_number(f.best_validation_acc)
         << '\n';
    }
  }
}

inline void write_features(std::ostream& os, const harness::FeatureExport& fx) {
  os << "domain,stage,pc1";
  for (std::size_t k = 0; k < fx.dim; ++k) os << ",f" << k;
  os << '\n';
  for (std::size_t r = 0; r < fx.domain.size(); ++r) {
    os << fx.domain[r] << ',' << data::kStageNames[fx.stage[r]] << ',' << format_number(fx.pc1[r]);
    for (std::size_t k = 0; k < fx.dim; ++k) os << ',' << format_number(fx.features[r * fx.dim + k]);
    os << '\n';
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ContractError("cannot write " + path);
  os << text;
  if (!os) throw ContractError("failed writing " + path);
}

inline void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

}  // namespace sleepdg::reports
