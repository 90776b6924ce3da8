#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "modprune/data.hpp"
#include "modprune/errors.hpp"
#include "modprune/harness.hpp"
#include "oracles.hpp"

using namespace modprune;

namespace {

double sq_dist(const Tensor& x, const Template& t, double sign) {
  double d = 0;
  const std::size_t F = t.level.size();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double e = x.at(i) - (t.level[i % F] + sign * t.wave[i]);
    d += e * e;
  }
  return d;
}

// Picks the class whose templates (either sign) sit closest to the sample.
std::size_t nearest_template(const Dataset& d, const Sample& s) {
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t c = 0; c < d.spec.n_classes; ++c) {
    double dist = 0;
    for (std::size_t j = 0; j < d.spec.n_modalities; ++j)
      dist += std::min(sq_dist(s.streams[j], d.templates[c][j], 1.0), sq_dist(s.streams[j], d.templates[c][j], -1.0));
    if (dist < best_d) best_d = dist, best = c;
  }
  return best;
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.n_modalities = 3;
  s.seq_len = 8;
  s.n_classes = 3;
  s.signature = SyntheticSpec::default_signature(3, 3);
  s.samples_per_class = 10;
  return s;
}

BackboneConfig small_model() {
  BackboneConfig c;
  c.n_modalities = 3;
  c.seq_len = 8;
  c.model_dim = 8;
  c.n_heads = 2;
  c.n_kv_groups = 1;
  c.ffn_dim = 6;
  c.n_experts = 2;
  c.top_k = 1;
  c.expert_dim = 4;
  c.n_classes = 3;
  c.sparsity_const = 1;
  return c;
}

struct SweepFixture {
  Dataset eval = generate_test_split(small_spec());
  Dataset calib = generate(small_spec());
  Backbone model = Backbone::init(small_model(), 3);
  GateTable gates = GateTable::init(model.layout(), 3, 4);
  SweepInputs inputs() const { return {&model, &gates, &eval, &calib}; }
};

}  // namespace

TEST(Generate, DeterministicBytes) {
  const SyntheticSpec s = small_spec();
  const Dataset a = generate(s), b = generate(s);
  ASSERT_EQ(a.size(), 30u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].label, b.samples[i].label);
    for (std::size_t j = 0; j < 3; ++j)
      ASSERT_EQ(0, std::memcmp(a.samples[i].streams[j].values().data(), b.samples[i].streams[j].values().data(),
                               a.samples[i].streams[j].numel() * sizeof(double)));
  }
  SyntheticSpec other = s;
  other.seed = 2;
  EXPECT_NE(generate(other).samples[0].streams[0].at(0), a.samples[0].streams[0].at(0));
  EXPECT_NE(generate_test_split(s).samples[0].streams[0].at(0), a.samples[0].streams[0].at(0));
}

TEST(Generate, BalancedAndInterleaved) {
  const Dataset d = generate(SyntheticSpec{});
  ASSERT_EQ(d.size(), 400u);
  std::vector<std::size_t> count(4, 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.samples[i].label, i % 4);
    ++count[d.samples[i].label];
    ASSERT_EQ(d.samples[i].streams.size(), 6u);
    EXPECT_EQ(d.samples[i].streams[0].shape(), (Shape{16, 2}));
  }
  EXPECT_EQ(count, (std::vector<std::size_t>(4, 100)));
}

TEST(Generate, NoiselessNearestTemplateIsPerfect) {
  SyntheticSpec s;
  s.noise = 0.0;
  s.samples_per_class = 25;
  const Dataset d = generate(s);
  std::size_t correct = 0;
  for (const Sample& x : d.samples) correct += nearest_template(d, x) == x.label;
  EXPECT_EQ(correct, d.size());
}

TEST(Generate, CentroidClassifierBetweenChanceAndPerfect) {
  const SyntheticSpec s;  // sigma 0.5, M = 6
  const Dataset train = generate(s), test = generate_test_split(s);
  const std::size_t dim = 6 * 16 * 2;
  std::vector<std::vector<double>> centroid(4, std::vector<double>(dim, 0.0));
  auto flat = [](const Sample& x) {
    std::vector<double> v;
    for (const Tensor& t : x.streams) v.insert(v.end(), t.values().begin(), t.values().end());
    return v;
  };
  for (const Sample& x : train.samples) {
    const auto v = flat(x);
    for (std::size_t i = 0; i < dim; ++i) centroid[x.label][i] += v[i] / 100.0;
  }
  std::size_t correct = 0;
  for (const Sample& x : test.samples) {
    const auto v = flat(x);
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < 4; ++c) {
      double d = 0;
      for (std::size_t i = 0; i < dim; ++i) d += (v[i] - centroid[c][i]) * (v[i] - centroid[c][i]);
      if (d < best_d) best_d = d, best = c;
    }
    correct += best == x.label;
  }
  const double acc = double(correct) / double(test.size());
  EXPECT_GT(acc, 0.25);
  EXPECT_LT(acc, 1.0);
}

TEST(Generate, SpecValidation) {
  SyntheticSpec s = small_spec();
  s.signature[1] = {0, 0, 0};
  EXPECT_THROW(generate(s), InputError);
  s = small_spec();
  s.signature = {{1, 1, 0}, {0, 1, 1}, {1, 0, 1}};  // no class tied to one modality
  EXPECT_THROW(s.validate(), InputError);
  s = small_spec();
  s.noise = -1;
  EXPECT_THROW(s.validate(), InputError);
}

TEST(Seeds, DeriveSeedIsStableAndSpread) {
  EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a)
    for (std::uint64_t b = 0; b < 20; ++b) seen.insert(derive_seed(a, {b}));
  EXPECT_EQ(seen.size(), 400u);
  EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
}

TEST(MissingMask, ExactCountAndUniform) {
  std::mt19937_64 rng(5);
  std::vector<double> miss(6, 0.0);
  const int n = 60000;
  for (int i = 0; i < n; ++i) {
    const ModalityMask m = sample_missing_mask(6, 2, rng);
    ASSERT_EQ(m.n_missing(), 2u);
    for (std::size_t j = 0; j < 6; ++j) miss[j] += !m.present(j);
  }
  for (double c : miss) EXPECT_NEAR(c / n, 2.0 / 6.0, 0.01);
  EXPECT_EQ(sample_missing_mask(6, 0, rng), ModalityMask::all_present(6));
  EXPECT_THROW(sample_missing_mask(6, 6, rng), InputError);
}

TEST(Evaluate, NoMissingIsSeedIndependent) {
  const Dataset d = generate(small_spec());
  const Backbone b = Backbone::init(small_model(), 6);
  const std::uint64_t seeds[] = {1, 2, 3, 4};
  const EvalResult r = evaluate(b, d, 0, seeds);
  EXPECT_EQ(r.per_seed.size(), 4u);
  EXPECT_EQ(r.stddev, 0.0);
  EXPECT_EQ(r.mean, evaluate_fixed(b, d, ModalityMask::all_present(3)));
}

TEST(Evaluate, RejectsImpossibleDrops) {
  const Dataset d = generate(small_spec());
  const Backbone b = Backbone::init(small_model(), 7);
  const std::uint64_t seeds[] = {1};
  EXPECT_THROW(evaluate(b, d, 3, seeds), InputError);
  EXPECT_THROW(evaluate(b, d, 1, {}), InputError);
  EXPECT_THROW(evaluate_fixed(b, d, ModalityMask::parse("000")), InputError);
  EXPECT_NO_THROW(evaluate_fixed(b, d, ModalityMask::parse("001")));
}

TEST(Evaluate, RandomModelSitsAtChance) {
  // Untrained networks with their heads rescaled: predictions carry no label
  // information, so pooled accuracy is binomial around 1/C.
  SyntheticSpec s;
  s.samples_per_class = 50;
  const Dataset d = generate(s);
  BackboneConfig c;
  double correct = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Backbone b = Backbone::init(c, 100 + seed);
    for (double& v : b.head_w().mutable_values()) v *= 10.0;
    const std::uint64_t seeds[] = {seed};
    correct += evaluate(b, d, 1, seeds).mean * double(d.size());
    total += double(d.size());
  }
  const double acc = correct / total;
  EXPECT_NEAR(acc, 0.25, 3.0 * std::sqrt(0.25 * 0.75 / total));
}

TEST(Spearman, KnownValues) {
  const double a[] = {1, 2, 3, 4, 5};
  const double up[] = {10, 20, 30, 40, 50};
  const double down[] = {5, 4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(spearman(a, up), 1.0);
  EXPECT_DOUBLE_EQ(spearman(a, down), -1.0);
  // ranks of b with a tie: 1, 2.5, 2.5, 4
  const double x[] = {1, 2, 3, 4};
  const double y[] = {1, 2, 2, 3};
  EXPECT_NEAR(spearman(x, y), 4.5 / std::sqrt(5.0 * 4.5), 1e-15);
  const double flat[] = {1, 1, 1, 1};
  EXPECT_EQ(spearman(x, flat), 0.0);
  EXPECT_THROW(spearman(std::span<const double>(x, 3), y), InputError);
}

TEST(Sweep, ZeroRatioMakesScorersAgree) {
  const SweepFixture f;
  SweepGrid g;
  g.ratios = {0.0};
  g.missing = {0, 1};
  g.scorers = {"sentrygate", "random", "magnitude", "synflow", "taylor"};
  g.taylor_samples = 6;
  const auto rows = sweep(g, f.inputs());
  ASSERT_EQ(rows.size(), 10u);
  for (const SweepRow& r : rows) {
    const SweepRow& first = rows[r.missing];  // sentrygate rows lead
    EXPECT_EQ(r.accuracy, first.accuracy);
    EXPECT_EQ(r.flops, model_flops(f.model));
    EXPECT_EQ(r.memory_bytes, first.memory_bytes);
    EXPECT_TRUE(r.best);
  }
}

TEST(Sweep, CardinalityOrderAndBest) {
  const SweepFixture f;
  SweepGrid g;
  g.missing = {0, 1, 2};
  g.seeds = {1, 2};
  const auto rows = sweep(g, f.inputs());
  ASSERT_EQ(rows.size(), g.scorers.size() * g.ratios.size() * g.missing.size() * g.seeds.size());
  std::size_t i = 0;
  for (const auto& s : g.scorers)
    for (double r : g.ratios)
      for (std::size_t k : g.missing)
        for (std::uint64_t seed : g.seeds) {
          EXPECT_EQ(rows[i].scorer, s);
          EXPECT_EQ(rows[i].ratio, r);
          EXPECT_EQ(rows[i].missing, k);
          EXPECT_EQ(rows[i].seed, seed);
          ++i;
        }
  for (const SweepRow& r : rows) {
    double top = 0;
    for (const SweepRow& o : rows)
      if (o.ratio == r.ratio && o.missing == r.missing && o.seed == r.seed) top = std::max(top, o.accuracy);
    EXPECT_EQ(r.best, r.accuracy == top);
    EXPECT_LT(r.flops, model_flops(f.model));
  }
}

TEST(Sweep, CellsAreIndependent) {
  const SweepFixture f;
  SweepGrid g;
  g.missing = {1, 2};
  g.ratios = {0.12, 0.23};
  const auto rows = sweep(g, f.inputs());
  for (const SweepRow& r : rows) {
    const SweepRow one = run_cell(f.inputs(), r.scorer, r.ratio, r.missing, r.seed);
    EXPECT_EQ(one.accuracy, r.accuracy);
    EXPECT_EQ(one.flops, r.flops);
    EXPECT_EQ(one.memory_bytes, r.memory_bytes);
  }
}

TEST(Sweep, CsvLayout) {
  SweepRow r{"random", 0.06, 2, 7, 0.8125, 123456.0, 999, true};
  EXPECT_EQ(sweep_csv({r}),
            "scorer,ratio,missing,seed,accuracy,flops,memory_bytes,best\n"
            "random,0.0600,2,7,0.812500,123456,999,1\n");
  const auto j = sweep_summary({r, SweepRow{"random", 0.12, 2, 7, 0.5, 1, 1, false}});
  EXPECT_EQ(j["rows"], 2);
  EXPECT_DOUBLE_EQ(j["scorers"]["random"]["mean_accuracy"].get<double>(), 0.65625);
  EXPECT_EQ(j["scorers"]["random"]["best_cells"], 1);
}

TEST(Sweep, InputChecks) {
  const SweepFixture f;
  SweepGrid g;
  g.ratios = {1.0};
  EXPECT_THROW(sweep(g, f.inputs()), InputError);
  g = SweepGrid{};
  g.scorers = {"oracle"};
  EXPECT_THROW(sweep(g, f.inputs()), InputError);
  g = SweepGrid{};
  g.missing = {};
  EXPECT_THROW(sweep(g, f.inputs()), InputError);
  SweepInputs no_gates = f.inputs();
  no_gates.gates = nullptr;
  EXPECT_THROW(run_cell(no_gates, "sentrygate", 0.1, 0, 1), InputError);
  no_gates.calibration = nullptr;
  EXPECT_THROW(run_cell(no_gates, "taylor", 0.1, 0, 1), InputError);
  EXPECT_NO_THROW(run_cell(no_gates, "magnitude", 0.1, 0, 1));
}

TEST(Sweep, RandomScorerIgnoresRatioAndMissing) {
  const SweepFixture f;
  const UnitScores a = sweep_scores(f.inputs(), "random", 0, 9);
  const UnitScores b = sweep_scores(f.inputs(), "random", 2, 9);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_NE(a.scores, sweep_scores(f.inputs(), "random", 0, 10).scores);
}

TEST(Sweep, GateScoresAverageAllMasksOfThatCount) {
  const SweepFixture f;
  const UnitScores s = sweep_scores(f.inputs(), "sentrygate", 1, 1);
  const auto masks = masks_with_missing(3, 1);
  EXPECT_EQ(s.scores, score_sentrygate(f.gates, masks).scores);
}
