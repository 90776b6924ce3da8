#pragma once

// Structured, data-free surgery on a trained Backbone.
//
//   scores  ->  select_by_budget  ->  PrunePlan  ->  materialize  ->  smaller Backbone
//
// Scores live in [0, 1] per unit (attention head, FFN channel, expert
// channel). A plan lists retained indices per unit group plus the K/V groups
// each attention layer keeps. materialize only slices: every surviving
// parameter value is copied bit for bit.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "modprune/backbone.hpp"
#include "modprune/data.hpp"
#include "modprune/gating.hpp"

namespace modprune {

struct UnitScores {
  std::string scorer;
  std::map<UnitGroupId, std::vector<double>> scores;

  std::size_t size() const;
  // One finite score per unit of `layout`.
  void validate(const ModelLayout& layout) const;
  nlohmann::json to_json() const;
};

extern const std::vector<std::string> kScorerNames;  // sentrygate, random, magnitude, synflow, taylor

UnitScores score_sentrygate(const GateTable& gates, const ModalityMask& platform);
// Mean gate output over a set of platform masks.
UnitScores score_sentrygate(const GateTable& gates, std::span<const ModalityMask> platforms);
UnitScores score_random(const ModelLayout& layout, std::uint64_t seed);
UnitScores score_magnitude(const Backbone& model);
UnitScores score_synflow(const Backbone& model);
// Taylor saliency measured on data: per mask, mean |x * dL/dx| per unit,
// normalized per group; then averaged over masks. Uses at most `max_samples`
// samples per mask (0 = all).
UnitScores score_taylor(const Backbone& model, const Dataset& data, std::span<const ModalityMask> masks,
                        std::size_t max_samples = 0);

// |theta * dR/dtheta| for every entry of every parameter, where R is the
// scalar returned by `objective`. Parameters are used as they are; callers
// wanting the data-free variant pass absolute-valued copies.
std::vector<std::vector<double>> synaptic_saliency(const std::vector<Tensor>& params,
                                                   const std::function<Tensor()>& objective);

struct PrunePlan {
  std::string scorer;
  double ratio = 0;
  // Retained unit indices per group, ascending.
  std::map<UnitGroupId, std::vector<std::size_t>> keep;
  // Retained K/V group slots per attention layer, ascending.
  std::map<std::size_t, std::vector<std::size_t>> kv_keep;
  // Groups whose floor forced a unit back in.
  std::vector<std::string> floor_events;

  std::size_t retained_units() const;
  // Throws StructuralError on any violated invariant.
  void validate(const ModelLayout& layout) const;
  nlohmann::json to_json() const;
  static PrunePlan from_json(const nlohmann::json& j);
};

PrunePlan identity_plan(const ModelLayout& layout);

// Drops the floor(ratio * n) lowest-scoring units over all groups (ties go to
// the later unit in layout order), then applies floors (>= 1 unit per group)
// and derives K/V groups from the surviving heads.
PrunePlan select_by_budget(const UnitScores& scores, const ModelLayout& layout, double ratio);

Backbone materialize(const Backbone& model, const PrunePlan& plan);

// The same plan expressed as 0/1 activation multipliers on the unpruned model.
UnitMask plan_unit_mask(const ModelLayout& layout, const PrunePlan& plan);

// Forward FLOPs with every modality present (2 per multiply-add). Elementwise
// ops, norms and softmax are not counted. Expert FFNs are charged at the
// uniform-routing expectation top_k / E of the fusion tokens each.
double model_flops(const Backbone& model);
double model_flops(const BackboneConfig& cfg);

// Exact serialized checkpoint size of the backbone, in bytes.
std::size_t model_memory(const Backbone& model);

}  // namespace modprune
