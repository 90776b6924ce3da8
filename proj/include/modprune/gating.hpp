#pragma once

// Modality-conditioned unit importance.
//
// Every prunable unit i of group l owns a tiny predictor
//
//     g_i(m) = sigmoid(zeta_i + gamma_l * f_i(m)),   f_i(m) = w2_i . tanh(W1_i^T m + b1_i) + b2_i
//
// mapping the modality mask m to a score in (0, 1). gamma_l is shared by the
// group. Gates never feed back into the backbone: they are trained to match
// first-order saliency targets harvested from activation taps.

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "modprune/backbone.hpp"
#include "modprune/taps.hpp"
#include "modprune/tensor.hpp"
#include "modprune/units.hpp"

namespace modprune {

struct GateGroup {
  UnitGroupId id;
  std::size_t n_units = 0;
  std::size_t n_modalities = 0;
  std::size_t hidden = 0;
  // Per-unit parameters are packed side by side; unit i owns columns
  // [i*hidden, (i+1)*hidden) of w1/b1/w2 and entry i of zeta/b2.
  Tensor zeta;   // 1 x N
  Tensor w1;     // M x (N*H)
  Tensor b1;     // N*H
  Tensor w2;     // 1 x (N*H)
  Tensor b2;     // 1 x N
  Tensor gamma;  // 1
};

class GateTable {
 public:
  GateTable() = default;
  // hidden == 0 selects 2*M.
  static GateTable init(const ModelLayout& layout, std::size_t n_modalities, std::uint64_t seed,
                        std::size_t hidden = 0);

  std::size_t n_modalities() const { return n_modalities_; }
  const std::vector<GateGroup>& groups() const { return groups_; }
  std::vector<GateGroup>& groups() { return groups_; }
  const GateGroup& group(const UnitGroupId& id) const;
  std::size_t group_index(const UnitGroupId& id) const;

  // 1 x N gate outputs for group `index`; recorded on the tape when grads are on.
  Tensor forward(std::size_t index, const ModalityMask& mask) const;
  // Plain values, no tape.
  std::vector<double> gate_forward(const UnitGroupId& id, const ModalityMask& mask) const;
  std::map<UnitGroupId, std::vector<double>> gate_forward_all(const ModalityMask& mask) const;

  std::vector<NamedTensor> parameters() const;
  std::size_t param_count() const;
  GateTable clone() const;

  GateTable(std::size_t n_modalities, std::vector<GateGroup> groups);

 private:
  std::size_t n_modalities_ = 0;
  std::vector<GateGroup> groups_;
  std::vector<Tensor> block_sums_;  // (N*H) x N constant per group
  void build_block_sums();
};

// Per-group min-max to [0, 1]; a group whose raw values are all equal maps to 0.5.
std::vector<double> normalize_saliency(std::span<const double> raw);

struct SaliencyTarget {
  UnitGroupId id;
  std::vector<double> raw;         // mean |x * dL/dx| per unit
  std::vector<double> normalized;  // in [0, 1]
};

// Accumulates mean-over-rows |x * dL/dx| per unit across any number of taps.
class SaliencyAccumulator {
 public:
  void add(const TapRecord& tap);
  void add(std::span<const TapRecord> taps);
  // Declares a group so it yields an all-zero raw vector when no tap reached it.
  void expect(const UnitGroupId& id, std::size_t n_units);
  std::map<UnitGroupId, SaliencyTarget> targets() const;
  bool empty() const { return sums_.empty(); }

 private:
  struct Acc {
    std::vector<double> sum;
    double rows = 0;
  };
  std::map<UnitGroupId, Acc> sums_;
};

// Taps must all belong to one unit group.
SaliencyTarget saliency_from_taps(std::span<const TapRecord> taps);

double alignment_loss(std::span<const double> g, std::span<const double> target);
double binarization_loss(std::span<const double> g);
Tensor alignment_loss(const Tensor& g, const Tensor& target);
Tensor binarization_loss(const Tensor& g);

}  // namespace modprune
