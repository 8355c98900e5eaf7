#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "sleepdg/autodiff/adam.hpp"
#include "sleepdg/config.hpp"
#include "sleepdg/data_io.hpp"
#include "sleepdg/losses.hpp"
#include "sleepdg/metrics.hpp"
#include "sleepdg/model.hpp"
#include "sleepdg/synthetic.hpp"

namespace sleepdg::harness {

using Model = SleepModel<float>;
using data::DomainDataset;

inline constexpr double kInactive = std::numeric_limits<double>::quiet_NaN();

/// Loss values of one optimisation step; NaN marks a term the arm does not use.
struct LossRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double total = 0.0;
  double classify = 0.0;
  double reconstruction = kInactive;
  double epoch_level = kInactive;
  double sequence_level = kInactive;
};

struct MetricsReport {
  double acc = 0.0;
  double mf1 = 0.0;
  std::vector<double> per_class_f1;
  metrics::ConfusionMatrix confusion{data::kStages};
};

struct TrainResult {
  Model model;
  std::vector<LossRow> losses;
  std::vector<double> validation_acc;  // one per training epoch
  std::size_t best_epoch = 0;          // 1-based
  double best_validation_acc = 0.0;
};

/// Optional progress sink; receives one line per training epoch.
using LogFn = std::function<void(const std::string&)>;

inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t{out[0]} << 32) | out[1];
}

inline void check_compatible(const ModelConfig& m, const DomainDataset& ds) {
  const auto& s = ds.spec;
  if (s.samples_per_epoch != m.samples_per_epoch || s.channels != m.channels ||
      s.sequence_length != m.sequence_length) {
    throw ContractError("domain " + std::to_string(s.domain_id) + " has epochs of (" +
                        std::to_string(s.samples_per_epoch) + ", " + std::to_string(s.channels) +
                        ") in sequences of " + std::to_string(s.sequence_length) +
                        ", model expects (" + std::to_string(m.samples_per_epoch) + ", " +
                        std::to_string(m.channels) + ") and " + std::to_string(m.sequence_length));
  }
}

/// Input tensor (k, L, n, C) holding the given sequences of a dataset.
inline Tensor<float> gather_sequences(const DomainDataset& ds, std::span<const std::size_t> idx) {
  const std::size_t seq = ds.sequence_size();
  std::vector<float> v(idx.size() * seq);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(ds.signals.begin() + static_cast<long>(idx[i] * seq), seq, v.begin() + static_cast<long>(i * seq));
  }
  const auto& s = ds.spec;
  return Tensor<float>::from({idx.size(), s.sequence_length, s.samples_per_epoch, s.channels}, std::move(v));
}

/// Per-epoch argmax predictions for a batch (B, L, n, C), eval mode.
inline std::vector<std::uint8_t> predict(const Model& model, const Tensor<float>& x) {
  ad::NoGradGuard no_grad;
  const auto logits = model.logits(model.encode(x));
  const std::size_t classes = logits.dim(2), rows = logits.size() / classes;
  std::vector<std::uint8_t> out(rows);
  const auto& v = logits.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (v[r * classes + c] > v[r * classes + best]) best = c;
    }
    out[r] = static_cast<std::uint8_t>(best);
  }
  return out;
}

inline void accumulate(const Model& model, const DomainDataset& ds, metrics::ConfusionMatrix& cm,
                       std::size_t chunk = 32) {
  check_compatible(model.config(), ds);
  const std::size_t len = ds.spec.sequence_length;
  for (std::size_t start = 0; start < ds.count; start += chunk) {
    const std::size_t end = std::min(ds.count, start + chunk);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const auto pred = predict(model, gather_sequences(ds, idx));
    cm.add(std::span<const std::uint8_t>(ds.labels.data() + start * len, pred.size()), pred);
  }
}

inline MetricsReport report_from(const metrics::ConfusionMatrix& cm) {
  MetricsReport r;
  r.confusion = cm;
  r.acc = metrics::accuracy(cm);
  r.per_class_f1 = metrics::per_class_f1(cm);
  r.mf1 = metrics::macro_f1(cm);
  return r;
}

/// ACC / MF1 / confusion over every epoch of the given datasets, pooled.
inline MetricsReport evaluate(const Model& model, const std::vector<const DomainDataset*>& sets) {
  metrics::ConfusionMatrix cm(model.config().num_stages);
  std::size_t total = 0;
  for (const auto* ds : sets) {
    accumulate(model, *ds, cm);
    total += ds->count;
  }
  if (total == 0) throw ContractError("evaluate: empty dataset");
  return report_from(cm);
}

inline MetricsReport evaluate(const Model& model, const DomainDataset& ds) {
  return evaluate(model, std::vector<const DomainDataset*>{&ds});
}

namespace detail {

inline std::vector<std::vector<float>> snapshot(const Model& m) {
  std::vector<std::vector<float>> out;
  for (const auto& [name, t] : m.named_parameters()) out.push_back(t.values());
  return out;
}

inline void restore(Model& m, const std::vector<std::vector<float>>& values) {
  auto& params = m.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].second.mutable_leaf_data();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

inline std::string describe(const LossRow& r) {
  auto f = [](double v) { return std::isnan(v) ? std::string("-") : std::to_string(v); };
  return "total " + f(r.total) + ", classify " + f(r.classify) + ", reconstruction " +
         f(r.reconstruction) + ", epoch " + f(r.epoch_level) + ", sequence " + f(r.sequence_level);
}

}  // namespace detail

/// Trains the configured arm on the source domains with a per-domain 80/20
/// (configurable) split and returns the parameters of the epoch with the best
/// pooled validation accuracy (earliest on ties).
inline TrainResult train(const ExperimentConfig& cfg, const std::vector<const DomainDataset*>& sources,
                         std::uint64_t seed, const LogFn& log = {}) {
  cfg.validate();
  cfg.validate_sources(sources.size());
  std::vector<const DomainDataset*> ordered = sources;
  std::sort(ordered.begin(), ordered.end(),
            [](auto* a, auto* b) { return a->spec.domain_id < b->spec.domain_id; });
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (ordered[i]->spec.domain_id == ordered[i - 1]->spec.domain_id) {
      throw ContractError("train: duplicate source domain " + std::to_string(ordered[i]->spec.domain_id));
    }
  }
  for (const auto* ds : ordered) check_compatible(cfg.model, *ds);

  const Arm arm = cfg.training.arm;
  const bool use_rec = uses_reconstruction(arm);
  const bool use_epoch = uses_epoch_alignment(arm);
  const bool use_seq = uses_sequence_alignment(arm);
  const auto pairs = cfg.training.ordered_pairs ? loss::Pairs::ordered : loss::Pairs::unordered;

  std::vector<DomainDataset> train_parts, val_parts;
  for (const auto* ds : ordered) {
    auto [tr, va] = data::split_domain(*ds, cfg.training.train_fraction,
                                       derive_seed({seed, ds->spec.domain_id, 0x5b117}));
    train_parts.push_back(std::move(tr));
    val_parts.push_back(std::move(va));
  }
  std::vector<const DomainDataset*> val_ptrs;
  for (const auto& v : val_parts) val_ptrs.push_back(&v);

  const std::size_t domains = ordered.size();
  const std::size_t per_domain = cfg.training.batch_size / domains;
  std::size_t batches = std::numeric_limits<std::size_t>::max();
  for (const auto& t : train_parts) batches = std::min(batches, t.count / per_domain);
  if (batches == 0) {
    throw ContractError("training.batch_size: a source domain has fewer than " +
                        std::to_string(per_domain) + " training sequences");
  }

  TrainResult result{Model(cfg.model, derive_seed({seed, 0x1417})), {}, {}, 0, -1.0};
  Model& model = result.model;
  std::vector<Tensor<float>> params;
  for (const auto& [name, t] : model.named_parameters()) {
    const bool is_decoder = name.rfind("decoder.", 0) == 0;
    if (!is_decoder || use_rec) params.push_back(t);
  }
  ad::AdamState<float> adam(cfg.optimizer, params);
  std::mt19937_64 batch_rng(derive_seed({seed, 0xba7c4}));
  std::mt19937_64 dropout_rng(derive_seed({seed, 0xd50}));

  const loss::LossWeights& weights = cfg.weights;
  const auto& mc = cfg.model;
  const std::size_t len = mc.sequence_length;
  std::vector<std::size_t> tags;
  for (std::size_t d = 0; d < domains; ++d) tags.insert(tags.end(), per_domain, d);

  std::vector<std::vector<float>> best;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.training.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> order(domains);
    for (std::size_t d = 0; d < domains; ++d) {
      order[d].resize(train_parts[d].count);
      for (std::size_t i = 0; i < order[d].size(); ++i) order[d][i] = i;
      std::shuffle(order[d].begin(), order[d].end(), batch_rng);
    }
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t bsz = per_domain * domains;
      std::vector<float> xs;
      xs.reserve(bsz * train_parts[0].sequence_size());
      std::vector<std::uint8_t> ys;
      for (std::size_t d = 0; d < domains; ++d) {
        const auto& part = train_parts[d];
        const std::size_t seq = part.sequence_size();
        for (std::size_t k = 0; k < per_domain; ++k) {
          const std::size_t i = order[d][b * per_domain + k];
          xs.insert(xs.end(), part.signals.begin() + static_cast<long>(i * seq),
                    part.signals.begin() + static_cast<long>((i + 1) * seq));
          ys.insert(ys.end(), part.labels.begin() + static_cast<long>(i * len),
                    part.labels.begin() + static_cast<long>((i + 1) * len));
        }
      }
      const auto x = Tensor<float>::from({bsz, len, mc.samples_per_epoch, mc.channels}, std::move(xs));
      const auto y = loss::one_hot<float>(ys, {bsz, len}, mc.num_stages);

      ForwardContext ctx{true, &dropout_rng};
      const auto h = model.encode(x, ctx);
      loss::LossTerms<float> terms;
      terms.classify = loss::classification_loss(model.classify(h), y);
      if (use_rec) terms.reconstruction = loss::reconstruction_loss(x, model.decode(h));
      if (use_epoch || use_seq) {
        const auto groups_h = loss::split_by_domain<float>(h, tags);
        if (use_epoch) terms.epoch = loss::epoch_level_loss(loss::epoch_banks(groups_h), pairs);
        if (use_seq) {
          std::vector<Tensor<float>> corr;
          for (const auto& g : groups_h) corr.push_back(loss::domain_correlation(g));
          terms.sequence = loss::sequence_level_loss(corr, pairs);
        }
      }
      ++step;
      LossRow row;
      row.step = step;
      row.epoch = epoch;
      row.classify = terms.classify.item();
      if (use_rec) row.reconstruction = terms.reconstruction.item();
      if (use_epoch) row.epoch_level = terms.epoch.item();
      if (use_seq) row.sequence_level = terms.sequence.item();
      Tensor<float> total;
      try {
        total = loss::total_loss(terms, weights);
      } catch (const ContractError& e) {
        throw ContractError("step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                            "): " + e.what() + " [" + detail::describe(row) + "]");
      }
      row.total = total.item();
      result.losses.push_back(row);
      const auto grads = ad::backward(total);
      ad::adam_step(adam, std::span<Tensor<float>>(params), grads);
    }
    const double val_acc = evaluate(model, val_ptrs).acc;
    result.validation_acc.push_back(val_acc);
    if (val_acc > result.best_validation_acc) {
      result.best_validation_acc = val_acc;
      result.best_epoch = epoch;
      best = detail::snapshot(model);
    }
    if (log) {
      log("epoch " + std::to_string(epoch) + " loss " + std::to_string(result.losses.back().total) +
          " val_acc " + std::to_string(val_acc));
    }
  }
  detail::restore(model, best);
  return result;
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out

struct FoldResult {
  std::size_t holdout = 0;
  MetricsReport test;
  std::size_t best_epoch = 0;
  double best_validation_acc = 0.0;
  std::vector<LossRow> losses;
};

struct LooReport {
  Arm arm = Arm::FULL;
  std::uint64_t seed = 0;
  std::vector<FoldResult> folds;
  double avg_acc = 0.0;
  double avg_mf1 = 0.0;
};

/// Supplies domain data by id; lets callers load held-out data only when needed.
using DomainLoader = std::function<DomainDataset(std::size_t)>;

inline void check_five_domains(const std::vector<std::size_t>& ids) {
  if (ids.size() != 5) {
    throw ContractError("leave_one_out: needs exactly 5 domains, got " + std::to_string(ids.size()));
  }
  auto sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ContractError("leave_one_out: duplicate domain ids");
  }
}

/// Trains on every domain except `holdout`, then evaluates on `holdout`.
inline FoldResult run_fold(const ExperimentConfig& cfg, const std::vector<const DomainDataset*>& domains,
                           std::size_t holdout, std::uint64_t seed, const LogFn& log = {}) {
  std::vector<const DomainDataset*> sources;
  const DomainDataset* target = nullptr;
  for (const auto* d : domains) {
    if (d->spec.domain_id == holdout) {
      target = d;
    } else {
      sources.push_back(d);
    }
  }
  if (!target) throw ContractError("held-out domain " + std::to_string(holdout) + " not found");
  auto tr = train(cfg, sources, derive_seed({seed, holdout}), log);
  FoldResult f;
  f.holdout = holdout;
  f.best_epoch = tr.best_epoch;
  f.best_validation_acc = tr.best_validation_acc;
  f.losses = std::move(tr.losses);
  f.test = evaluate(tr.model, *target);
  return f;
}

inline void finalize(LooReport& r) {
  r.avg_acc = 0.0;
  r.avg_mf1 = 0.0;
  for (const auto& f : r.folds) {
    r.avg_acc += f.test.acc;
    r.avg_mf1 += f.test.mf1;
  }
  r.avg_acc /= static_cast<double>(r.folds.size());
  r.avg_mf1 /= static_cast<double>(r.folds.size());
}

/// Five folds; each fold reads only its four sources for training, then its
/// held-out domain for the test evaluation.
inline LooReport leave_one_out(const ExperimentConfig& cfg, const std::vector<std::size_t>& ids,
                               const DomainLoader& load, std::uint64_t seed, const LogFn& log = {}) {
  check_five_domains(ids);
  auto sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  LooReport report;
  report.arm = cfg.training.arm;
  report.seed = seed;
  for (auto holdout : sorted) {
    std::vector<DomainDataset> sources;
    for (auto id : sorted) {
      if (id != holdout) sources.push_back(load(id));
    }
    std::vector<const DomainDataset*> ptrs;
    for (const auto& s : sources) ptrs.push_back(&s);
    if (log) log("fold holdout=" + std::to_string(holdout));
    auto tr = train(cfg, ptrs, derive_seed({seed, holdout}), log);
    FoldResult f;
    f.holdout = holdout;
    f.best_epoch = tr.best_epoch;
    f.best_validation_acc = tr.best_validation_acc;
    f.losses = std::move(tr.losses);
    const auto target = load(holdout);
    f.test = evaluate(tr.model, target);
    report.folds.push_back(std::move(f));
  }
  finalize(report);
  return report;
}

inline LooReport leave_one_out(const ExperimentConfig& cfg, const std::vector<DomainDataset>& domains,
                               std::uint64_t seed, const LogFn& log = {}) {
  std::vector<std::size_t> ids;
  for (const auto& d : domains) ids.push_back(d.spec.domain_id);
  return leave_one_out(
      cfg, ids,
      [&](std::size_t id) {
        for (const auto& d : domains) {
          if (d.spec.domain_id == id) return d;
        }
        throw ContractError("domain " + std::to_string(id) + " missing");
      },
      seed, log);
}

// ---------------------------------------------------------------------------
// Ablation grid

struct ArmSummary {
  Arm arm = Arm::FULL;
  std::vector<double> fold_acc_mean;  // per held-out domain, mean over seeds
  double acc_mean = 0.0, acc_std = 0.0;
  double mf1_mean = 0.0, mf1_std = 0.0;
};

struct AblationResult {
  std::vector<LooReport> runs;  // arm-major, then seed, in request order
  std::vector<ArmSummary> summary;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  s = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
  return {m, s};
}

/// Full leave-one-out per arm per seed. Independent (arm, seed, fold) jobs run
/// on `jobs` threads; results land in fixed slots so the output does not
/// depend on scheduling.
inline AblationResult run_ablation(const ExperimentConfig& cfg, const std::vector<DomainDataset>& domains,
                                   const std::vector<Arm>& arms, const std::vector<std::uint64_t>& seeds,
                                   std::size_t jobs = 1, const LogFn& log = {}) {
  if (arms.empty()) throw ContractError("ablation: no arms requested");
  if (seeds.empty()) throw ContractError("ablation: no seeds requested");
  std::vector<std::size_t> ids;
  for (const auto& d : domains) ids.push_back(d.spec.domain_id);
  check_five_domains(ids);
  std::vector<const DomainDataset*> ptrs;
  for (const auto& d : domains) ptrs.push_back(&d);
  std::sort(ptrs.begin(), ptrs.end(), [](auto* a, auto* b) { return a->spec.domain_id < b->spec.domain_id; });

  const std::size_t folds = ptrs.size();
  const std::size_t total = arms.size() * seeds.size() * folds;
  std::vector<FoldResult> slots(total);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= total) return;
      const std::size_t a = j / (seeds.size() * folds);
      const std::size_t s = (j / folds) % seeds.size();
      const std::size_t f = j % folds;
      try {
        ExperimentConfig c = cfg;
        c.training.arm = arms[a];
        slots[j] = run_fold(c, ptrs, ptrs[f]->spec.domain_id, seeds[s]);
        if (log) {
          std::lock_guard lock(mu);
          log(arm_name(arms[a]) + " seed " + std::to_string(seeds[s]) + " holdout " +
              std::to_string(ptrs[f]->spec.domain_id) + " acc " + std::to_string(slots[j].test.acc));
        }
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next.store(total);
        return;
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, total));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  AblationResult out;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    ArmSummary sum;
    sum.arm = arms[a];
    sum.fold_acc_mean.assign(folds, 0.0);
    std::vector<double> accs, mf1s;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      LooReport r;
      r.arm = arms[a];
      r.seed = seeds[s];
      for (std::size_t f = 0; f < folds; ++f) {
        auto& slot = slots[(a * seeds.size() + s) * folds + f];
        sum.fold_acc_mean[f] += slot.test.acc / static_cast<double>(seeds.size());
        r.folds.push_back(std::move(slot));
      }
      finalize(r);
      accs.push_back(r.avg_acc);
      mf1s.push_back(r.avg_mf1);
      out.runs.push_back(std::move(r));
    }
    std::tie(sum.acc_mean, sum.acc_std) = mean_std(accs);
    std::tie(sum.mf1_mean, sum.mf1_std) = mean_std(mf1s);
    out.summary.push_back(std::move(sum));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature export with a one-dimensional PCA projection

struct PrincipalComponent {
  std::vector<double> direction;  // unit length, first nonzero loading positive
  double eigenvalue = 0.0;
  std::size_t iterations = 0;
  bool degenerate = false;  // zero covariance: projection is all zeros
};

/// Leading eigenvector of a symmetric PSD matrix (d x d, row-major) by power
/// iteration from a fixed start vector, stopping when successive unit vectors
/// differ by less than `tol` in max norm.
inline PrincipalComponent power_iteration(const std::vector<double>& cov, std::size_t d, double tol = 1e-9,
                                          std::size_t max_iter = 100000) {
  if (cov.size() != d * d || d == 0) throw ShapeError("power_iteration: covariance must be d x d");
  PrincipalComponent pc;
  std::vector<double> v(d), w(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + static_cast<double>(i) / static_cast<double>(d);
  auto normalize = [](std::vector<double>& x) {
    double n = 0.0;
    for (double e : x) n += e * e;
    n = std::sqrt(n);
    if (n == 0.0) return 0.0;
    for (double& e : x) e /= n;
    return n;
  };
  normalize(v);
  for (pc.iterations = 1; pc.iterations <= max_iter; ++pc.iterations) {
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += cov[i * d + j] * v[j];
      w[i] = s;
    }
    if (normalize(w) == 0.0) {
      pc.degenerate = true;
      pc.direction.assign(d, 0.0);
      return pc;
    }
    double diff = 0.0;
    for (std::size_t i = 0; i < d; ++i) diff = std::max(diff, std::abs(w[i] - v[i]));
    v.swap(w);
    if (diff < tol) break;
  }
  for (double e : v) {
    if (std::abs(e) > 1e-12) {
      if (e < 0.0) {
        for (double& x : v) x = -x;
      }
      break;
    }
  }
  double rq = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) rq += v[i] * cov[i * d + j] * v[j];
  pc.eigenvalue = rq;
  pc.direction = std::move(v);
  return pc;
}

struct FeatureExport {
  std::size_t dim = 0;
  std::vector<std::size_t> domain;   // per epoch
  std::vector<std::uint8_t> stage;   // per epoch
  std::vector<double> pc1;           // per epoch
  std::vector<double> features;      // (epochs, dim)
  PrincipalComponent component;
};

/// Encoder features of every epoch in the datasets (eval mode) and their
/// scores on the first principal component of the pooled covariance.
inline FeatureExport export_features(const Model& model, const std::vector<const DomainDataset*>& sets) {
  FeatureExport out;
  const std::size_t d = model.config().feature_dim;
  out.dim = d;
  for (const auto* ds : sets) {
    check_compatible(model.config(), *ds);
    const std::size_t len = ds->spec.sequence_length;
    for (std::size_t start = 0; start < ds->count; start += 32) {
      const std::size_t end = std::min(ds->count, start + 32);
      std::vector<std::size_t> idx(end - start);
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
      ad::NoGradGuard no_grad;
      const auto h = model.encode(gather_sequences(*ds, idx));
      for (float v : h.data()) out.features.push_back(v);
      for (std::size_t e = start * len; e < end * len; ++e) {
        out.domain.push_back(ds->spec.domain_id);
        out.stage.push_back(ds->labels[e]);
      }
    }
  }
  const std::size_t rows = out.domain.size();
  if (rows == 0) throw ContractError("export_features: no epochs");
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < d; ++k) mean[k] += out.features[r * d + k];
  for (double& m : mean) m /= static_cast<double>(rows);
  std::vector<double> cov(d * d, 0.0);
  if (rows > 1) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < d; ++i) {
        const double a = out.features[r * d + i] - mean[i];
        for (std::size_t j = 0; j < d; ++j) cov[i * d + j] += a * (out.features[r * d + j] - mean[j]);
      }
    for (double& c : cov) c /= static_cast<double>(rows - 1);
  }
  out.component = power_iteration(cov, d);
  out.pc1.assign(rows, 0.0);
  if (!out.component.degenerate) {
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += (out.features[r * d + k] - mean[k]) * out.component.direction[k];
      out.pc1[r] = s;
    }
  }
  return out;
}

}  // namespace sleepdg::harness
