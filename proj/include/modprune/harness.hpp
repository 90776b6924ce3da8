#pragma once

// Experiment plumbing: one run config for every CLI command, pruning sweeps
// over (scorer, ratio, missing count, seed) and their reports.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "modprune/backbone.hpp"
#include "modprune/data.hpp"
#include "modprune/gating.hpp"
#include "modprune/pruner.hpp"
#include "modprune/trainer.hpp"

namespace modprune {

struct SweepGrid {
  std::vector<double> ratios = {0.06, 0.12, 0.17, 0.23};
  std::vector<std::size_t> missing = {0, 1, 2, 4};
  std::vector<std::string> scorers = {"sentrygate", "random", "magnitude", "synflow"};
  std::vector<std::uint64_t> seeds = {1};
  // Samples per mask for the data-driven taylor scorer (0 = whole split).
  std::size_t taylor_samples = 64;

  void validate() const;
};

struct RunConfig {
  SyntheticSpec data;
  BackboneConfig model;
  TrainConfig train;
  SweepGrid sweep;

  // Points every seeded component at `seed`.
  void set_seed(std::uint64_t seed);
  void validate() const;
};

nlohmann::json to_json(const SweepGrid& g);
nlohmann::json to_json(const RunConfig& c);
SweepGrid sweep_grid_from_json(const nlohmann::json& j);
// Sections may be omitted; unknown sections or keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);

struct SweepInputs {
  const Backbone* model = nullptr;
  const GateTable* gates = nullptr;
  const Dataset* eval = nullptr;         // accuracy is measured here
  const Dataset* calibration = nullptr;  // only the taylor scorer reads it
};

struct SweepRow {
  std::string scorer;
  double ratio = 0;
  std::size_t missing = 0;
  std::uint64_t seed = 0;
  double accuracy = 0;
  double flops = 0;
  std::size_t memory_bytes = 0;
  bool best = false;  // top accuracy among scorers for this (ratio, missing, seed)
};

// Scores for `scorer` as the sweep uses them at missing count k. The gate
// scorer averages its outputs over every mask with k modalities missing.
UnitScores sweep_scores(const SweepInputs& in, const std::string& scorer, std::size_t k, std::uint64_t seed,
                        std::size_t taylor_samples = 64);

// Prune with `scorer` at `ratio`, evaluate with k missing modalities. Each
// cell is independent of every other.
SweepRow run_cell(const SweepInputs& in, const std::string& scorer, double ratio, std::size_t k, std::uint64_t seed,
                  std::size_t taylor_samples = 64);

std::vector<SweepRow> sweep(const SweepGrid& grid, const SweepInputs& in);

// CSV columns: scorer,ratio,missing,seed,accuracy,flops,memory_bytes,best
std::string sweep_csv(const std::vector<SweepRow>& rows);
nlohmann::json sweep_summary(const std::vector<SweepRow>& rows);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace modprune
