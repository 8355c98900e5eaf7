#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sleepdg/autodiff/adam.hpp"
#include "sleepdg/errors.hpp"
#include "sleepdg/losses.hpp"
#include "sleepdg/model.hpp"

namespace sleepdg {

enum class Arm { BASE, AE, EA, SA, AE_EA, AE_SA, FULL };

inline const std::vector<Arm>& all_arms() {
  static const std::vector<Arm> arms{Arm::BASE, Arm::AE,    Arm::EA,  Arm::SA,
                                     Arm::AE_EA, Arm::AE_SA, Arm::FULL};
  return arms;
}

inline std::string arm_name(Arm a) {
  switch (a) {
    case Arm::BASE: return "BASE";
    case Arm::AE: return "AE";
    case Arm::EA: return "EA";
    case Arm::SA: return "SA";
    case Arm::AE_EA: return "AE+EA";
    case Arm::AE_SA: return "AE+SA";
    case Arm::FULL: return "FULL";
  }
  return "?";
}

inline Arm parse_arm(const std::string& s) {
  for (Arm a : all_arms()) {
    if (arm_name(a) == s) return a;
  }
  throw ContractError("training.arm: unknown arm '" + s + "' (BASE, AE, EA, SA, AE+EA, AE+SA, FULL)");
}

inline bool uses_reconstruction(Arm a) {
  return a == Arm::AE || a == Arm::AE_EA || a == Arm::AE_SA || a == Arm::FULL;
}
inline bool uses_epoch_alignment(Arm a) {
  return a == Arm::EA || a == Arm::AE_EA || a == Arm::FULL;
}
inline bool uses_sequence_alignment(Arm a) {
  return a == Arm::SA || a == Arm::AE_SA || a == Arm::FULL;
}

struct TrainingConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double train_fraction = 0.8;
  Arm arm = Arm::FULL;
  std::vector<std::uint64_t> seeds{0};
  std::size_t holdout = 0;
  bool ordered_pairs = false;
};

struct DataConfig {
  std::size_t sequences_per_domain = 200;
  double shift_magnitude = 1.0;
  double sample_rate = 32.0;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  std::string preset = "desk";
  ModelConfig model;
  loss::LossWeights weights;
  ad::AdamOptions optimizer;
  TrainingConfig training;
  DataConfig data;

  static ExperimentConfig desk() { return {}; }

  /// Published settings: L = 20, d = 512, 50 epochs, 30 s epochs at 100 Hz.
  static ExperimentConfig paper() {
    ExperimentConfig c;
    c.preset = "paper";
    c.model = ModelConfig::paper();
    c.training.epochs = 50;
    c.data.sample_rate = 100.0;
    return c;
  }

  static ExperimentConfig preset_named(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw ContractError("preset: unknown preset '" + name + "' (desk, paper)");
  }

  void validate() const {
    model.validate();
    weights.validate();
    auto fail = [](const std::string& field, const std::string& why) {
      throw ContractError(field + ": " + why);
    };
    if (!(optimizer.learning_rate > 0.0)) fail("optimizer.learning_rate", "must be positive");
    if (!(optimizer.weight_decay >= 0.0)) fail("optimizer.weight_decay", "must be non-negative");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) fail("optimizer.beta1", "must lie in [0, 1)");
    if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) fail("optimizer.beta2", "must lie in [0, 1)");
    if (!(optimizer.eps > 0.0)) fail("optimizer.eps", "must be positive");
    if (training.epochs == 0) fail("training.epochs", "must be positive");
    if (training.batch_size == 0) fail("training.batch_size", "must be positive");
    if (!(training.train_fraction > 0.0 && training.train_fraction < 1.0)) {
      fail("training.train_fraction", "must lie in (0, 1)");
    }
    if (training.seeds.empty()) fail("training.seeds", "need at least one seed");
    if (data.sequences_per_domain < 2) fail("data.sequences_per_domain", "must be at least 2");
    if (!(data.shift_magnitude >= 0.0)) fail("data.shift_magnitude", "must be non-negative");
    if (!(data.sample_rate > 0.0)) fail("data.sample_rate", "must be positive");
  }

  /// Balanced batches need the batch size to split evenly over the sources.
  void validate_sources(std::size_t sources) const {
    if (sources < 2) throw ContractError("training: need at least 2 source domains");
    if (training.batch_size % sources != 0) {
      throw ContractError("training.batch_size: " + std::to_string(training.batch_size) +
                          " is not divisible by the " + std::to_string(sources) + " source domains");
    }
  }
};

// ---------------------------------------------------------------------------
// JSON. Reading overlays the present keys on a preset and rejects unknown keys.

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where,
                           std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ContractError(where + ": expected an object");
  const std::set<std::string> names(known.begin(), known.end());
  for (const auto& [key, value] : j.items()) {
    if (!names.count(key)) throw ContractError(where + "." + key + ": unknown field");
  }
}

template <class V>
void read_field(const nlohmann::json& j, const std::string& where, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception&) {
    throw ContractError(where + "." + key + ": wrong type");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& m = c.model;
  return {
      {"preset", c.preset},
      {"model",
       {{"samples_per_epoch", m.samples_per_epoch},
        {"channels", m.channels},
        {"sequence_length", m.sequence_length},
        {"feature_dim", m.feature_dim},
        {"num_stages", m.num_stages},
        {"conv_kernels", m.conv_kernels},
        {"conv_widths", m.conv_widths},
        {"attention_layers", m.attention_layers},
        {"attention_heads", m.attention_heads},
        {"ff_multiplier", m.ff_multiplier},
        {"dropout", m.dropout}}},
      {"loss_weights",
       {{"reconstruction", c.weights.reconstruction},
        {"epoch", c.weights.epoch},
        {"sequence", c.weights.sequence}}},
      {"optimizer",
       {{"learning_rate", c.optimizer.learning_rate},
        {"weight_decay", c.optimizer.weight_decay},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"decoupled_weight_decay", c.optimizer.decoupled_weight_decay}}},
      {"training",
       {{"epochs", c.training.epochs},
        {"batch_size", c.training.batch_size},
        {"train_fraction", c.training.train_fraction},
        {"arm", arm_name(c.training.arm)},
        {"seeds", c.training.seeds},
        {"holdout", c.training.holdout},
        {"ordered_pairs", c.training.ordered_pairs}}},
      {"data",
       {{"sequences_per_domain", c.data.sequences_per_domain},
        {"shift_magnitude", c.data.shift_magnitude},
        {"sample_rate", c.data.sample_rate},
        {"seed", c.data.seed}}}};
}

/// Resolves a config document: preset named by "preset" (default desk), then
/// every present field overrides it.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, "config", {"preset", "model", "loss_weights", "optimizer", "training", "data"});
  std::string preset = "desk";
  detail::read_field(j, "config", "preset", preset);
  ExperimentConfig c = ExperimentConfig::preset_named(preset);
  if (j.contains("model")) {
    const auto& m = j.at("model");
    const std::string w = "model";
    detail::reject_unknown(m, w, {"samples_per_epoch", "channels", "sequence_length", "feature_dim",
                                  "num_stages", "conv_kernels", "conv_widths", "attention_layers",
                                  "attention_heads", "ff_multiplier", "dropout"});
    detail::read_field(m, w, "samples_per_epoch", c.model.samples_per_epoch);
    detail::read_field(m, w, "channels", c.model.channels);
    detail::read_field(m, w, "sequence_length", c.model.sequence_length);
    detail::read_field(m, w, "feature_dim", c.model.feature_dim);
    detail::read_field(m, w, "num_stages", c.model.num_stages);
    detail::read_field(m, w, "conv_kernels", c.model.conv_kernels);
    detail::read_field(m, w, "conv_widths", c.model.conv_widths);
    detail::read_field(m, w, "attention_layers", c.model.attention_layers);
    detail::read_field(m, w, "attention_heads", c.model.attention_heads);
    detail::read_field(m, w, "ff_multiplier", c.model.ff_multiplier);
    detail::read_field(m, w, "dropout", c.model.dropout);
  }
  if (j.contains("loss_weights")) {
    const auto& l = j.at("loss_weights");
    const std::string w = "loss_weights";
    detail::reject_unknown(l, w, {"reconstruction", "epoch", "sequence"});
    detail::read_field(l, w, "reconstruction", c.weights.reconstruction);
    detail::read_field(l, w, "epoch", c.weights.epoch);
    detail::read_field(l, w, "sequence", c.weights.sequence);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    const std::string w = "optimizer";
    detail::reject_unknown(o, w, {"learning_rate", "weight_decay", "beta1", "beta2", "eps",
                                  "decoupled_weight_decay"});
    detail::read_field(o, w, "learning_rate", c.optimizer.learning_rate);
    detail::read_field(o, w, "weight_decay", c.optimizer.weight_decay);
    detail::read_field(o, w, "beta1", c.optimizer.beta1);
    detail::read_field(o, w, "beta2", c.optimizer.beta2);
    detail::read_field(o, w, "eps", c.optimizer.eps);
    detail::read_field(o, w, "decoupled_weight_decay", c.optimizer.decoupled_weight_decay);
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    const std::string w = "training";
    detail::reject_unknown(t, w, {"epochs", "batch_size", "train_fraction", "arm", "seeds", "holdout",
                                  "ordered_pairs"});
    detail::read_field(t, w, "epochs", c.training.epochs);
    detail::read_field(t, w, "batch_size", c.training.batch_size);
    detail::read_field(t, w, "train_fraction", c.training.train_fraction);
    if (t.contains("arm")) {
      std::string arm;
      detail::read_field(t, w, "arm", arm);
      c.training.arm = parse_arm(arm);
    }
    detail::read_field(t, w, "seeds", c.training.seeds);
    detail::read_field(t, w, "holdout", c.training.holdout);
    detail::read_field(t, w, "ordered_pairs", c.training.ordered_pairs);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    const std::string w = "data";
    detail::reject_unknown(d, w, {"sequences_per_domain", "shift_magnitude", "sample_rate", "seed"});
    detail::read_field(d, w, "sequences_per_domain", c.data.sequences_per_domain);
    detail::read_field(d, w, "shift_magnitude", c.data.shift_magnitude);
    detail::read_field(d, w, "sample_rate", c.data.sample_rate);
    detail::read_field(d, w, "seed", c.data.seed);
  }
  c.validate();
  return c;
}

}  // namespace sleepdg
