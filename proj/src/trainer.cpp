#include "modprune/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "modprune/config.hpp"
#include "modprune/errors.hpp"

namespace modprune {

void TrainConfig::validate() const {
  if (!(p_max >= 0.0 && p_max < 1.0)) throw InputError("train: p_max must lie in [0, 1)");
  if (epochs > 0 && warmup_epochs >= epochs) throw InputError("train: warmup_epochs must be below epochs");
  if (batch_size == 0) throw InputError("train: batch_size must be positive");
  if (alpha < 0 || lambda_bin < 0) throw InputError("train: alpha and lambda_bin must be non-negative");
  if (!(lr_backbone >= 0) || !(lr_gates >= 0)) throw InputError("train: learning rates must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) throw InputError("train: momentum must lie in [0, 1)");
  if (!(ema_decay >= 0 && ema_decay < 1)) throw InputError("train: ema_decay must lie in [0, 1)");
  if (grad_clip < 0) throw InputError("train: grad_clip must be non-negative");
}

double drop_probability(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch < cfg.warmup_epochs) return 0.0;
  if (cfg.epochs == 0 || cfg.epochs - 1 <= cfg.warmup_epochs) return cfg.p_max;
  const double ramp = static_cast<double>(epoch - cfg.warmup_epochs) /
                      static_cast<double>(cfg.epochs - 1 - cfg.warmup_epochs);
  return cfg.p_max * std::min(ramp, 1.0);
}

ModalityMask sample_mask(double p, std::size_t n_modalities, std::mt19937_64& rng) {
  if (n_modalities == 0) throw InputError("sample_mask: no modalities");
  if (p <= 0.0) return ModalityMask::all_present(n_modalities);
  std::bernoulli_distribution drop(p);
  std::vector<std::uint8_t> bits(n_modalities);
  for (;;) {
    for (auto& b : bits) b = drop(rng) ? 0 : 1;
    if (std::any_of(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; })) break;
  }
  return ModalityMask(bits);
}

ModalityMask curriculum_mask(std::size_t epoch, const TrainConfig& cfg, std::size_t n_modalities,
                             std::mt19937_64& rng) {
  if (cfg.epochs > 0 && epoch >= cfg.epochs) throw InputError("curriculum_mask: epoch past the schedule");
  return sample_mask(drop_probability(epoch, cfg), n_modalities, rng);
}

// ---- optimizer --------------------------------------------------------------------

Sgd::Sgd(std::vector<Tensor> params, double lr, double momentum, double clip)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), clip_(clip) {
  for (const Tensor& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void Sgd::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void Sgd::step() {
  double norm2 = 0.0;
  for (const Tensor& p : params_)
    if (p.has_grad())
      for (double g : p.grad()) norm2 += g * g;
  const double norm = std::sqrt(norm2);
  const double k = (clip_ > 0 && norm > clip_) ? clip_ / norm : 1.0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    auto& v = velocity_[i];
    auto w = p.mutable_values();
    if (p.has_grad()) {
      const auto g = p.grad();
      for (std::size_t n = 0; n < v.size(); ++n) v[n] = momentum_ * v[n] + k * g[n];
    } else {
      for (double& x : v) x *= momentum_;
    }
    for (std::size_t n = 0; n < v.size(); ++n) w[n] -= lr_ * v[n];
  }
}

namespace {

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  for (const auto& n : named) out.push_back(n.tensor);
  return out;
}

std::vector<std::vector<double>> grad_snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const Tensor& p : params)
    out.push_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end()) : std::vector<double>{});
  return out;
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

// ---- trainer ----------------------------------------------------------------------

Trainer::Trainer(Backbone& model, GateTable& gates, TrainConfig cfg)
    : model_(model), gates_(gates), cfg_(cfg) {
  cfg_.validate();
  if (gates_.n_modalities() != model_.config().n_modalities)
    throw InputError("Trainer: gate table and backbone disagree on the modality count");
  backbone_opt_ = Sgd(tensors_of(model_.parameters()), cfg_.lr_backbone, cfg_.momentum, cfg_.grad_clip);
  gate_opt_ = Sgd(tensors_of(gates_.parameters()), cfg_.lr_gates, cfg_.momentum, cfg_.grad_clip);
}

void Trainer::begin_epoch() { ema_.clear(); }

std::string Trainer::target_key(const ModalityMask& mask) const {
  return cfg_.target_key == TargetKey::mask ? mask.str() : std::to_string(mask.n_missing());
}

LossBreakdown Trainer::train_step(std::span<const Sample* const> batch, const ModalityMask& mask, std::size_t epoch) {
  if (batch.empty()) throw InputError("train_step: empty batch");
  LossBreakdown out;
  out.count = batch.size();
  const bool gates_active = epoch >= cfg_.warmup_epochs && cfg_.alpha > 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  backbone_opt_.zero_grad();
  SaliencyAccumulator sal;
  for (const Sample* s : batch) {
    TapSet taps;
    ForwardContext ctx;
    ctx.taps = &taps;
    const std::size_t label[] = {s->label};
    Tensor logits, loss;
    try {
      logits = model_.forward(*s, mask, &ctx);
      loss = cross_entropy(logits, label);
    } catch (const DomainError& e) {
      throw TrainingError("non-finite logits at epoch " + std::to_string(epoch) + " under mask " + mask.str() +
                          ": " + e.what());
    }
    const double lv = loss.item();
    if (!std::isfinite(lv))
      throw TrainingError("non-finite classification loss at epoch " + std::to_string(epoch) + " under mask " +
                          mask.str());
    out.cls += lv * inv_b;
    out.correct += argmax(logits.values()) == s->label;
    if (observer_checks_) {
      NoGradGuard ng;
      const Tensor plain = model_.forward(*s, mask);
      if (!same_bits(plain.values(), logits.values())) ++observer_violations_;
    }
    backward(scale(loss, inv_b));
    if (gates_active) sal.add(taps.collect_taps());
  }

  if (gates_active) {
    const auto& groups = gates_.groups();
    for (const GateGroup& g : groups) sal.expect(g.id, g.n_units);
    const auto batch_targets = sal.targets();
    auto& ema = ema_[target_key(mask)];
    for (const auto& [id, t] : batch_targets) {
      auto it = ema.find(id);
      if (it == ema.end()) {
        ema.emplace(id, t.normalized);
      } else {
        for (std::size_t i = 0; i < t.normalized.size(); ++i)
          it->second[i] = cfg_.ema_decay * it->second[i] + (1.0 - cfg_.ema_decay) * t.normalized[i];
      }
    }

    std::vector<std::vector<double>> before;
    if (observer_checks_) before = grad_snapshot(backbone_opt_.params());

    gate_opt_.zero_grad();
    Tensor align_sum, bin_sum;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      const Tensor g = gates_.forward(i, mask);
      const std::vector<double>& tv = ema.at(groups[i].id);
      const Tensor target({1, tv.size()}, tv);
      const Tensor a = alignment_loss(g, target);
      const Tensor b = binarization_loss(g);
      align_sum = align_sum.defined() ? add(align_sum, a) : a;
      bin_sum = bin_sum.defined() ? add(bin_sum, b) : b;
    }
    const double inv_g = 1.0 / static_cast<double>(groups.size());
    const Tensor align = scale(align_sum, inv_g);
    const Tensor bin = scale(bin_sum, inv_g);
    const Tensor gate_loss = scale(add(align, scale(bin, cfg_.lambda_bin)), cfg_.alpha);
    out.align = align.item();
    out.bin = bin.item();
    if (!std::isfinite(gate_loss.item()))
      throw TrainingError("non-finite gate loss at epoch " + std::to_string(epoch));
    backward(gate_loss);
    gate_opt_.step();
    out.gates_updated = true;

    if (observer_checks_) {
      const auto after = grad_snapshot(backbone_opt_.params());
      for (std::size_t i = 0; i < after.size(); ++i)
        if (!same_bits(before[i], after[i])) {
          ++observer_violations_;
          break;
        }
    }
  }
  if (observer_checks_) ++observer_batches_;

  backbone_opt_.step();
  out.total = out.cls + cfg_.alpha * (out.align + cfg_.lambda_bin * out.bin);
  return out;
}

// ---- full run ---------------------------------------------------------------------

nlohmann::json RunReport::to_json() const {
  nlohmann::json j;
  j["seed"] = train.seed;
  j["config"] = {{"model", modprune::to_json(backbone)}, {"train", modprune::to_json(train)}};
  j["backbone_params"] = backbone_params;
  j["gate_params"] = gate_params;
  j["gate_param_ratio"] = backbone_params ? double(gate_params) / double(backbone_params) : 0.0;
  j["initial_loss"] = initial_loss;
  nlohmann::json ep = nlohmann::json::array();
  for (const EpochLog& e : epochs)
    ep.push_back({{"epoch", e.epoch},
                  {"p_t", e.p_t},
                  {"cls", e.cls},
                  {"align", e.align},
                  {"bin", e.bin},
                  {"train_accuracy", e.train_accuracy}});
  j["epochs"] = ep;
  nlohmann::json acc = nlohmann::json::object();
  for (const auto& [k, a] : accuracy_by_missing) acc["missing_" + std::to_string(k)] = a;
  j["accuracy"] = acc;
  return j;
}

TrainResult train(const Dataset& data, const BackboneConfig& bcfg, const TrainConfig& tcfg, const Dataset* eval) {
  bcfg.validate();
  tcfg.validate();
  if (data.samples.empty()) throw InputError("train: empty dataset");
  const SyntheticSpec& ds = data.spec;
  if (ds.n_modalities != bcfg.n_modalities || ds.seq_len != bcfg.seq_len || ds.input_dim != bcfg.input_dim ||
      ds.n_classes != bcfg.n_classes)
    throw InputError("train: dataset shape (M, T, d_in, classes) does not match the model config");

  TrainResult r{Backbone::init(bcfg, derive_seed(tcfg.seed, {1})), GateTable{}, RunReport{}};
  r.gates = GateTable::init(r.model.layout(), bcfg.n_modalities, derive_seed(tcfg.seed, {2}));
  r.report.backbone = bcfg;
  r.report.train = tcfg;
  r.report.backbone_params = r.model.param_count();
  r.report.gate_params = r.gates.param_count();

  Trainer trainer(r.model, r.gates, tcfg);
  std::mt19937_64 rng(derive_seed(tcfg.seed, {3}));
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), 0);
  bool have_initial = false;

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    trainer.begin_epoch();
    EpochLog log;
    log.epoch = epoch;
    log.p_t = drop_probability(epoch, tcfg);
    std::size_t correct = 0, seen = 0, batches = 0, gate_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + tcfg.batch_size);
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < stop; ++i) batch.push_back(&data.samples[order[i]]);
      const ModalityMask mask = curriculum_mask(epoch, tcfg, bcfg.n_modalities, rng);
      const LossBreakdown lb = trainer.train_step(batch, mask, epoch);
      if (!have_initial) {
        r.report.initial_loss = lb.cls;
        have_initial = true;
      } else if (lb.cls > 1e3 * r.report.initial_loss) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch) + ": loss " +
                            std::to_string(lb.cls) + " exceeds 1000x the initial " +
                            std::to_string(r.report.initial_loss));
      }
      log.cls += lb.cls;
      if (lb.gates_updated) {
        log.align += lb.align;
        log.bin += lb.bin;
        ++gate_batches;
      }
      correct += lb.correct;
      seen += lb.count;
      ++batches;
    }
    log.cls /= static_cast<double>(batches);
    if (gate_batches) {
      log.align /= static_cast<double>(gate_batches);
      log.bin /= static_cast<double>(gate_batches);
    }
    log.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    r.report.epochs.push_back(log);
  }

  const Dataset& ev = eval ? *eval : data;
  for (std::size_t k = 0; k <= 2 && k < bcfg.n_modalities; ++k) {
    const std::uint64_t seeds[] = {derive_seed(tcfg.seed, {4, k})};
    r.report.accuracy_by_missing[k] = evaluate(r.model, ev, k, seeds).mean;
  }
  return r;
}

}  // namespace modprune
