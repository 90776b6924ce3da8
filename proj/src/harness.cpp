#include "modprune/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <tuple>

#include "json_reader.hpp"
#include "modprune/config.hpp"
#include "modprune/errors.hpp"

namespace modprune {

using nlohmann::json;

void SweepGrid::validate() const {
  if (ratios.empty() || missing.empty() || scorers.empty() || seeds.empty())
    throw InputError("sweep grid: every axis needs at least one value");
  for (double r : ratios)
    if (!(r >= 0.0 && r < 1.0)) throw InputError("sweep grid: ratio " + std::to_string(r) + " outside [0, 1)");
  for (const std::string& s : scorers)
    if (std::find(kScorerNames.begin(), kScorerNames.end(), s) == kScorerNames.end())
      throw InputError("sweep grid: unknown scorer '" + s + "'");
}

void RunConfig::set_seed(std::uint64_t seed) {
  data.seed = seed;
  train.seed = seed;
  sweep.seeds = {seed};
}

void RunConfig::validate() const {
  data.validate();
  model.validate();
  train.validate();
  sweep.validate();
  if (data.n_modalities != model.n_modalities || data.seq_len != model.seq_len || data.input_dim != model.input_dim ||
      data.n_classes != model.n_classes)
    throw InputError("config: data and model disagree on n_modalities, seq_len, input_dim or n_classes");
  for (std::size_t k : sweep.missing)
    if (k >= model.n_modalities)
      throw InputError("config: sweep missing count " + std::to_string(k) + " must be below n_modalities");
}

json to_json(const SweepGrid& g) {
  return {{"ratios", g.ratios}, {"missing", g.missing}, {"scorers", g.scorers}, {"seeds", g.seeds},
          {"taylor_samples", g.taylor_samples}};
}

json to_json(const RunConfig& c) {
  return {{"data", to_json(c.data)}, {"model", to_json(c.model)}, {"train", to_json(c.train)},
          {"sweep", to_json(c.sweep)}};
}

SweepGrid sweep_grid_from_json(const json& j) {
  SweepGrid g;
  detail::Reader r(j, "sweep");
  r.get("ratios", g.ratios);
  r.get("missing", g.missing);
  r.get("scorers", g.scorers);
  r.get("seeds", g.seeds);
  r.get("taylor_samples", g.taylor_samples);
  r.finish();
  g.validate();
  return g;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw InputError("config: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "data" && it.key() != "model" && it.key() != "train" && it.key() != "sweep")
      throw InputError("config: unknown section '" + it.key() + "'");
  RunConfig c;
  if (j.contains("data")) c.data = synthetic_spec_from_json(j["data"]);
  if (j.contains("model")) c.model = backbone_config_from_json(j["model"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("sweep")) c.sweep = sweep_grid_from_json(j["sweep"]);
  c.validate();
  return c;
}

// ---- sweep ------------------------------------------------------------------------

UnitScores sweep_scores(const SweepInputs& in, const std::string& scorer, std::size_t k, std::uint64_t seed,
                        std::size_t taylor_samples) {
  const std::size_t M = in.model->config().n_modalities;
  if (scorer == "sentrygate") {
    if (!in.gates) throw InputError("sentrygate scorer needs a gate table");
    const auto masks = masks_with_missing(M, k);
    return score_sentrygate(*in.gates, masks);
  }
  // Seeded only by the run seed so one random ranking serves every ratio.
  if (scorer == "random") return score_random(in.model->layout(), derive_seed(seed, {0x72616e64}));
  if (scorer == "magnitude") return score_magnitude(*in.model);
  if (scorer == "synflow") return score_synflow(*in.model);
  if (scorer == "taylor") {
    if (!in.calibration) throw InputError("taylor scorer needs calibration data");
    const auto masks = masks_with_missing(M, k);
    return score_taylor(*in.model, *in.calibration, masks, taylor_samples);
  }
  throw InputError("unknown scorer '" + scorer + "'");
}

namespace {

SweepRow evaluate_plan(const SweepInputs& in, const UnitScores& scores, double ratio, std::size_t k,
                       std::uint64_t seed) {
  const PrunePlan plan = select_by_budget(scores, in.model->layout(), ratio);
  const Backbone pruned = materialize(*in.model, plan);
  // Drop draws depend on (seed, k) only: every scorer and ratio sees the same masks.
  const std::uint64_t drop_seed[] = {derive_seed(seed, {0x64726f70, k})};
  SweepRow row;
  row.scorer = scores.scorer;
  row.ratio = ratio;
  row.missing = k;
  row.seed = seed;
  row.accuracy = evaluate(pruned, *in.eval, k, drop_seed).mean;
  row.flops = model_flops(pruned);
  row.memory_bytes = model_memory(pruned);
  return row;
}

void check_inputs(const SweepInputs& in) {
  if (!in.model || !in.eval) throw InputError("sweep: model and evaluation data are required");
}

}  // namespace

SweepRow run_cell(const SweepInputs& in, const std::string& scorer, double ratio, std::size_t k, std::uint64_t seed,
                  std::size_t taylor_samples) {
  check_inputs(in);
  return evaluate_plan(in, sweep_scores(in, scorer, k, seed, taylor_samples), ratio, k, seed);
}

std::vector<SweepRow> sweep(const SweepGrid& grid, const SweepInputs& in) {
  grid.validate();
  check_inputs(in);
  std::vector<SweepRow> rows;
  for (std::uint64_t seed : grid.seeds)
    for (std::size_t k : grid.missing)
      for (const std::string& scorer : grid.scorers) {
        // Scores do not depend on the ratio; compute them once per (scorer, k, seed).
        const UnitScores scores = sweep_scores(in, scorer, k, seed, grid.taylor_samples);
        for (double ratio : grid.ratios) rows.push_back(evaluate_plan(in, scores, ratio, k, seed));
      }
  std::map<std::tuple<std::uint64_t, std::size_t, std::uint64_t>, double> best;
  auto key = [](const SweepRow& r) { return std::make_tuple(std::bit_cast<std::uint64_t>(r.ratio), r.missing, r.seed); };
  for (const SweepRow& r : rows) {
    auto [it, fresh] = best.emplace(key(r), r.accuracy);
    if (!fresh) it->second = std::max(it->second, r.accuracy);
  }
  for (SweepRow& r : rows) r.best = r.accuracy == best.at(key(r));
  // Canonical order: scorer-major as listed, then ratio, missing, seed.
  std::vector<SweepRow> ordered;
  for (const std::string& scorer : grid.scorers)
    for (double ratio : grid.ratios)
      for (std::size_t k : grid.missing)
        for (std::uint64_t seed : grid.seeds)
          for (const SweepRow& r : rows)
            if (r.scorer == scorer && r.ratio == ratio && r.missing == k && r.seed == seed) ordered.push_back(r);
  return ordered;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "scorer,ratio,missing,seed,accuracy,flops,memory_bytes,best\n";
  char buf[256];
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.4f,%zu,%llu,%.6f,%.0f,%zu,%d\n", r.scorer.c_str(), r.ratio, r.missing,
                  static_cast<unsigned long long>(r.seed), r.accuracy, r.flops, r.memory_bytes, r.best ? 1 : 0);
    out += buf;
  }
  return out;
}

json sweep_summary(const std::vector<SweepRow>& rows) {
  std::map<std::string, std::vector<double>> by_scorer;
  std::map<std::string, std::size_t> wins;
  for (const SweepRow& r : rows) {
    by_scorer[r.scorer].push_back(r.accuracy);
    if (r.best) ++wins[r.scorer];
  }
  json scorers = json::object();
  for (const auto& [name, acc] : by_scorer)
    scorers[name] = {{"mean_accuracy", std::accumulate(acc.begin(), acc.end(), 0.0) / double(acc.size())},
                     {"cells", acc.size()},
                     {"best_cells", wins[name]}};
  return {{"rows", rows.size()}, {"scorers", scorers}};
}

// ---- statistics -------------------------------------------------------------------

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw InputError("spearman: need two equal-length series of length >= 2");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace modprune
