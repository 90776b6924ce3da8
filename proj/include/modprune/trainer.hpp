#pragma once

// Joint training of the backbone and its gate table.
//
// The backbone sees only the classification loss. Gates run beside it in
// observer mode: after warmup each batch's Taylor saliencies become detached
// targets, and gates are updated from alignment + binarization losses on a
// separate graph.

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "modprune/backbone.hpp"
#include "modprune/data.hpp"
#include "modprune/gating.hpp"
#include "json.hpp"

namespace modprune {

// How the running saliency target is keyed across batches.
enum class TargetKey { mask, missing_count };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 6;
  double p_max = 0.4;
  double alpha = 1.0;
  double lambda_bin = 0.1;
  double lr_backbone = 0.05;
  double lr_gates = 0.5;
  double momentum = 0.9;
  double grad_clip = 5.0;  // global L2 norm per step, 0 disables
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  double ema_decay = 0.9;
  TargetKey target_key = TargetKey::mask;

  void validate() const;
};

// p_t: 0 during warmup, then linear up to p_max at the final epoch.
double drop_probability(std::size_t epoch, const TrainConfig& cfg);

// Each modality present with probability 1 - p; an all-missing draw is redrawn.
ModalityMask sample_mask(double p, std::size_t n_modalities, std::mt19937_64& rng);
ModalityMask curriculum_mask(std::size_t epoch, const TrainConfig& cfg, std::size_t n_modalities,
                             std::mt19937_64& rng);

struct LossBreakdown {
  double cls = 0;
  double align = 0;
  double bin = 0;
  double total = 0;  // cls + alpha * (align + lambda_bin * bin)
  bool gates_updated = false;
  std::size_t correct = 0;
  std::size_t count = 0;
};

// Heavy-ball SGD over a fixed parameter list.
class Sgd {
 public:
  Sgd() = default;
  Sgd(std::vector<Tensor> params, double lr, double momentum, double clip);
  void zero_grad();
  void step();
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_ = 0, momentum_ = 0, clip_ = 0;
};

class Trainer {
 public:
  Trainer(Backbone& model, GateTable& gates, TrainConfig cfg);

  // One optimizer step on `batch` under one modality mask.
  LossBreakdown train_step(std::span<const Sample* const> batch, const ModalityMask& mask, std::size_t epoch);
  // Clears the running saliency targets.
  void begin_epoch();

  // Extra per-batch checks: the task logits must match a plain forward
  // bitwise, and the gate update must leave every backbone gradient as it was.
  void enable_observer_checks(bool on) { observer_checks_ = on; }
  std::size_t observer_violations() const { return observer_violations_; }
  std::size_t observer_batches() const { return observer_batches_; }

  const TrainConfig& config() const { return cfg_; }

 private:
  Backbone& model_;
  GateTable& gates_;
  TrainConfig cfg_;
  Sgd backbone_opt_;
  Sgd gate_opt_;
  // running targets per key, per gate group
  std::map<std::string, std::map<UnitGroupId, std::vector<double>>> ema_;
  bool observer_checks_ = false;
  std::size_t observer_violations_ = 0;
  std::size_t observer_batches_ = 0;

  std::string target_key(const ModalityMask& mask) const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double p_t = 0;
  double cls = 0;
  double align = 0;
  double bin = 0;
  double train_accuracy = 0;
};

struct RunReport {
  BackboneConfig backbone;
  TrainConfig train;
  std::vector<EpochLog> epochs;
  // accuracy on the evaluation split for k = 0, 1, 2 missing modalities
  std::map<std::size_t, double> accuracy_by_missing;
  std::size_t backbone_params = 0;
  std::size_t gate_params = 0;
  double initial_loss = 0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  Backbone model;
  GateTable gates;
  RunReport report;
};

// Fully deterministic given the configs. `eval` (optional) is used for the
// per-regime accuracy in the report; the training split is used otherwise.
TrainResult train(const Dataset& data, const BackboneConfig& bcfg, const TrainConfig& tcfg,
                  const Dataset* eval = nullptr);

}  // namespace modprune
