#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "modprune/checkpoint.hpp"
#include "modprune/errors.hpp"
#include "modprune/pruner.hpp"
#include "oracles.hpp"

using namespace modprune;

namespace {

BackboneConfig small_cfg(std::size_t heads = 4, std::size_t groups = 2) {
  BackboneConfig c;
  c.n_modalities = 3;
  c.seq_len = 10;
  c.input_dim = 2;
  c.model_dim = 8;
  c.n_heads = heads;
  c.n_kv_groups = groups;
  c.ffn_dim = 6;
  c.n_experts = 3;
  c.top_k = 2;
  c.expert_dim = 5;
  c.n_classes = 3;
  c.sparsity_const = 1;
  return c;
}

ModelLayout flat_layout(std::size_t units) {
  ModelLayout l;
  l.groups = {{{Site::ffn_channel, 0, 0}, units}};
  return l;
}

UnitScores flat_scores(std::vector<double> v) {
  UnitScores s;
  s.scorer = "test";
  s.scores[{Site::ffn_channel, 0, 0}] = std::move(v);
  return s;
}

UnitScores random_scores(const ModelLayout& layout, std::mt19937_64& rng) {
  UnitScores s = score_random(layout, rng());
  s.scorer = "test";
  return s;
}

std::vector<double> logits(const Backbone& b, const Sample& s, const ModalityMask& m, ForwardContext* ctx = nullptr) {
  NoGradGuard ng;
  const Tensor l = b.forward(s, m, ctx);
  return {l.values().begin(), l.values().end()};
}

}  // namespace

TEST(SelectByBudget, QuantileExample) {
  const PrunePlan p = select_by_budget(flat_scores({0.1, 0.2, 0.9, 0.95}), flat_layout(4), 0.5);
  EXPECT_EQ(p.keep.at({Site::ffn_channel, 0, 0}), (std::vector<std::size_t>{2, 3}));
  EXPECT_TRUE(p.floor_events.empty());
  const PrunePlan q = select_by_budget(flat_scores({0.9, 0.1, 0.95, 0.2}), flat_layout(4), 0.5);
  EXPECT_EQ(q.keep.at({Site::ffn_channel, 0, 0}), (std::vector<std::size_t>{0, 2}));
}

TEST(SelectByBudget, TiesKeepLowerIndex) {
  const PrunePlan p = select_by_budget(flat_scores({0.5, 0.5, 0.5, 0.5, 0.5}), flat_layout(5), 0.4);
  EXPECT_EQ(p.keep.at({Site::ffn_channel, 0, 0}), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(SelectByBudget, ZeroRatioIsIdentity) {
  const Backbone b = Backbone::init(small_cfg(), 1);
  const ModelLayout l = b.layout();
  std::mt19937_64 rng(2);
  const PrunePlan p = select_by_budget(random_scores(l, rng), l, 0.0);
  const PrunePlan id = identity_plan(l);
  EXPECT_EQ(p.keep, id.keep);
  EXPECT_EQ(p.kv_keep, id.kv_keep);
  EXPECT_EQ(p.retained_units(), l.total_units());
}

TEST(SelectByBudget, RatioOutOfRange) {
  const auto s = flat_scores({0.1, 0.2});
  EXPECT_THROW(select_by_budget(s, flat_layout(2), 1.0), InputError);
  EXPECT_THROW(select_by_budget(s, flat_layout(2), -0.1), InputError);
  EXPECT_THROW(select_by_budget(s, flat_layout(3), 0.1), InputError);
  EXPECT_THROW(select_by_budget(flat_scores({0.1, std::nan("")}), flat_layout(2), 0.1), DomainError);
}

TEST(SelectByBudget, CountingOracle) {
  // Without floors the dropped set is exactly the floor(rho * n) smallest
  // scores, so the realized fraction is within 1/n of rho.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + rep % 40;
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    const double rho = u(rng) * 0.999;
    const PrunePlan p = select_by_budget(flat_scores(v), flat_layout(n), rho);
    std::vector<double> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    std::size_t drop = 0;
    while (double(drop + 1) <= rho * double(n) + 1e-9) ++drop;
    if (drop == n) continue;  // the floor takes over
    const auto& keep = p.keep.at({Site::ffn_channel, 0, 0});
    ASSERT_EQ(keep.size(), n - drop);
    for (std::size_t k : keep) EXPECT_GE(v[k], drop ? sorted[drop - 1] : -1.0);
    EXPECT_LE(std::fabs(double(n - keep.size()) / double(n) - rho), 1.0 / double(n));
  }
}

TEST(SelectByBudget, FloorKeepsBestUnitOfAnnihilatedGroup) {
  ModelLayout l;
  l.groups = {{{Site::ffn_channel, 0, 0}, 3}, {{Site::ffn_channel, 1, 0}, 3}};
  UnitScores s;
  s.scorer = "test";
  s.scores[{Site::ffn_channel, 0, 0}] = {0.10, 0.30, 0.20};
  s.scores[{Site::ffn_channel, 1, 0}] = {0.90, 0.80, 0.70};
  const PrunePlan p = select_by_budget(s, l, 0.5);
  EXPECT_EQ(p.keep.at({Site::ffn_channel, 0, 0}), (std::vector<std::size_t>{1}));
  EXPECT_EQ(p.keep.at({Site::ffn_channel, 1, 0}), (std::vector<std::size_t>{0, 1, 2}));
  ASSERT_EQ(p.floor_events.size(), 1u);
  EXPECT_NE(p.floor_events[0].find("ffn_channel"), std::string::npos);
}

TEST(SelectByBudget, GqaConsistencyFuzz) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 0.99);
  for (auto [H, G] : {std::pair{4u, 2u}, std::pair{4u, 1u}, std::pair{8u, 4u}, std::pair{8u, 2u}, std::pair{4u, 4u}}) {
    BackboneConfig c = small_cfg(H, G);
    c.model_dim = 16;
    const Backbone b = Backbone::init(c, H * 10 + G);
    const ModelLayout l = b.layout();
    for (int rep = 0; rep < 50; ++rep) {
      const PrunePlan p = select_by_budget(random_scores(l, rng), l, u(rng));
      ASSERT_NO_THROW(p.validate(l));
      for (const AttentionLayout& a : l.attention) {
        std::set<std::size_t> ref;
        for (std::size_t h : p.keep.at({Site::attention_head, a.layer, 0})) ref.insert(h / (H / G));
        EXPECT_EQ(std::vector<std::size_t>(ref.begin(), ref.end()), p.kv_keep.at(a.layer));
      }
      for (const auto& [id, k] : p.keep) EXPECT_FALSE(k.empty());
    }
  }
}

TEST(PrunePlan, ValidateRejectsInconsistentPlans) {
  const Backbone b = Backbone::init(small_cfg(), 5);
  const ModelLayout l = b.layout();
  const UnitGroupId heads0{Site::attention_head, 0, 0};
  PrunePlan p = identity_plan(l);
  p.keep[heads0] = {};
  EXPECT_THROW(p.validate(l), StructuralError);
  p = identity_plan(l);
  p.keep[heads0] = {0, 1};  // both map to group 0
  EXPECT_THROW(p.validate(l), StructuralError);  // group 1 kept without heads
  p.kv_keep[0] = {0};
  EXPECT_NO_THROW(p.validate(l));
  p.keep[heads0] = {0, 2};
  EXPECT_THROW(p.validate(l), StructuralError);  // head 2 needs dropped group 1
  p = identity_plan(l);
  p.keep[{Site::ffn_channel, 0, 0}] = {0, 9};
  EXPECT_THROW(p.validate(l), StructuralError);
  p = identity_plan(l);
  p.keep[{Site::ffn_channel, 0, 0}] = {2, 1};
  EXPECT_THROW(p.validate(l), StructuralError);
  p = identity_plan(l);
  p.keep.erase({Site::ffn_channel, 0, 0});
  EXPECT_THROW(materialize(b, p), StructuralError);
}

TEST(PrunePlan, JsonRoundTrip) {
  const Backbone b = Backbone::init(small_cfg(), 6);
  const ModelLayout l = b.layout();
  std::mt19937_64 rng(7);
  const PrunePlan p = select_by_budget(random_scores(l, rng), l, 0.6);
  const PrunePlan q = PrunePlan::from_json(nlohmann::json::parse(p.to_json().dump()));
  EXPECT_EQ(q.scorer, p.scorer);
  EXPECT_EQ(q.ratio, p.ratio);
  EXPECT_EQ(q.keep, p.keep);
  EXPECT_EQ(q.kv_keep, p.kv_keep);
  EXPECT_EQ(q.floor_events, p.floor_events);
  EXPECT_THROW(PrunePlan::from_json(nlohmann::json::parse("{\"scorer\": 3}")), InputError);
}

TEST(Materialize, IdentityPlanIsBitwiseNoOp) {
  const BackboneConfig c = small_cfg();
  const Backbone b = Backbone::init(c, 8);
  const Backbone m = materialize(b, identity_plan(b.layout()));
  std::mt19937_64 rng(9);
  for (const char* mask : {"111", "010", "101"}) {
    const Sample s = oracle::random_sample(rng, c);
    EXPECT_EQ(logits(b, s, ModalityMask::parse(mask)), logits(m, s, ModalityMask::parse(mask)));
  }
}

TEST(Materialize, SurvivorsAreBitwiseCopies) {
  const Backbone b = Backbone::init(small_cfg(), 10);
  const ModelLayout l = b.layout();
  std::mt19937_64 rng(11);
  const PrunePlan p = select_by_budget(random_scores(l, rng), l, 0.5);
  const Backbone m = materialize(b, p);
  const std::size_t d = b.config().model_dim / b.config().n_heads, D = b.config().model_dim;
  for (std::size_t f = 0; f < b.fusion().size(); ++f) {
    const std::size_t layer = b.fusion_layer_index(f);
    const auto& src = b.fusion()[f].attn;
    const auto& dst = m.fusion()[f].attn;
    const auto& heads = p.keep.at({Site::attention_head, layer, 0});
    const auto& groups = p.kv_keep.at(layer);
    for (std::size_t i = 0; i < heads.size(); ++i) {
      for (std::size_t r = 0; r < D; ++r)
        for (std::size_t k = 0; k < d; ++k) {
          ASSERT_EQ(dst.w_q.at(r, i * d + k), src.w_q.at(r, heads[i] * d + k));
          ASSERT_EQ(dst.w_o.at(i * d + k, r), src.w_o.at(heads[i] * d + k, r));
        }
      EXPECT_EQ(groups[dst.head_group[i]], src.head_group[heads[i]]);
    }
    for (std::size_t gi = 0; gi < groups.size(); ++gi)
      for (std::size_t r = 0; r < D; ++r)
        for (std::size_t k = 0; k < d; ++k) {
          ASSERT_EQ(dst.w_k.at(r, gi * d + k), src.w_k.at(r, groups[gi] * d + k));
          ASSERT_EQ(dst.w_v.at(r, gi * d + k), src.w_v.at(r, groups[gi] * d + k));
        }
    for (std::size_t e = 0; e < b.fusion()[f].moe.experts.size(); ++e) {
      const auto& se = b.fusion()[f].moe.experts[e];
      const auto& de = m.fusion()[f].moe.experts[e];
      const auto& ch = p.keep.at({Site::expert_channel, layer, e});
      for (std::size_t i = 0; i < ch.size(); ++i) {
        ASSERT_EQ(de.b1.at(i), se.b1.at(ch[i]));
        for (std::size_t r = 0; r < D; ++r) {
          ASSERT_EQ(de.w1.at(r, i), se.w1.at(r, ch[i]));
          ASSERT_EQ(de.w2.at(i, r), se.w2.at(ch[i], r));
        }
      }
      EXPECT_EQ(std::vector<double>(de.b2.values().begin(), de.b2.values().end()),
                std::vector<double>(se.b2.values().begin(), se.b2.values().end()));
    }
    EXPECT_EQ(m.fusion()[f].moe.top_k, b.fusion()[f].moe.top_k);
    EXPECT_EQ(std::vector<double>(m.fusion()[f].moe.router.values().begin(), m.fusion()[f].moe.router.values().end()),
              std::vector<double>(b.fusion()[f].moe.router.values().begin(), b.fusion()[f].moe.router.values().end()));
  }
  // Unpruned tensors are untouched too.
  const auto bp = b.parameters(), mp = m.parameters();
  for (std::size_t i = 0; i < bp.size(); ++i)
    if (bp[i].path.find("embed") != std::string::npos || bp[i].path.find("head.") == 0)
      EXPECT_EQ(std::vector<double>(bp[i].tensor.values().begin(), bp[i].tensor.values().end()),
                std::vector<double>(mp[i].tensor.values().begin(), mp[i].tensor.values().end()));
}

TEST(Materialize, ZeroContributionHeadOracle) {
  const BackboneConfig c = small_cfg();
  Backbone b = Backbone::init(c, 12);
  const std::size_t d = c.model_dim / c.n_heads, D = c.model_dim, victim = 3;
  const std::size_t layer = b.encoder_layer_index(1, 0);
  auto& attn = b.encoders()[1].layers[0].attn;
  for (std::size_t r = 0; r < D; ++r)
    for (std::size_t k = 0; k < d; ++k) {
      attn.w_q.mutable_values()[r * attn.w_q.cols() + victim * d + k] = 0.0;
      attn.w_o.mutable_values()[(victim * d + k) * D + r] = 0.0;
    }
  PrunePlan p = identity_plan(b.layout());
  p.keep[{Site::attention_head, layer, 0}] = {0, 1, 2};
  const Backbone m = materialize(b, p);
  EXPECT_EQ(m.encoders()[1].layers[0].attn.n_heads(), 3u);
  std::mt19937_64 rng(13);
  for (const char* mask : {"111", "011"}) {
    const Sample s = oracle::random_sample(rng, c);
    const auto a = logits(b, s, ModalityMask::parse(mask)), z = logits(m, s, ModalityMask::parse(mask));
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], z[k], 1e-12);
  }
}

TEST(Materialize, MatchesUnitMaskOnFullModel) {
  const BackboneConfig c = small_cfg();
  const Backbone b = Backbone::init(c, 14);
  const ModelLayout l = b.layout();
  std::mt19937_64 rng(15);
  for (double rho : {0.2, 0.5, 0.8}) {
    const PrunePlan p = select_by_budget(random_scores(l, rng), l, rho);
    const Backbone m = materialize(b, p);
    const UnitMask um = plan_unit_mask(l, p);
    ForwardContext ctx;
    ctx.unit_mask = &um;
    for (unsigned bits = 1; bits < 8; ++bits) {
      const ModalityMask mask({std::uint8_t(bits & 1), std::uint8_t((bits >> 1) & 1), std::uint8_t((bits >> 2) & 1)});
      const Sample s = oracle::random_sample(rng, c);
      const auto a = logits(b, s, mask, &ctx), z = logits(m, s, mask);
      for (std::size_t k = 0; k < a.size(); ++k) {
        ASSERT_TRUE(std::isfinite(z[k]));
        EXPECT_NEAR(a[k], z[k], 1e-12) << "rho=" << rho << " mask=" << mask.str();
      }
    }
  }
}

TEST(Materialize, ParameterCountFormula) {
  const BackboneConfig c = small_cfg(4, 2);
  const Backbone b = Backbone::init(c, 16);
  const ModelLayout l = b.layout();
  std::mt19937_64 rng(17);
  const std::size_t D = c.model_dim, d = D / c.n_heads;
  for (int rep = 0; rep < 20; ++rep) {
    const PrunePlan p = select_by_budget(random_scores(l, rng), l, 0.04 * rep);
    std::size_t n = c.n_modalities * (c.input_dim * D + D + c.seq_len * D + D) + D * c.n_classes + c.n_classes;
    for (const auto& [id, k] : p.keep) {
      const std::size_t u = k.size();
      if (id.site == Site::attention_head) {
        n += 2 * D * u * d + 2 * D * p.kv_keep.at(id.layer).size() * d;
      } else {
        n += 2 * D * u + u + D;
        if (id.site == Site::expert_channel && id.expert == 0) n += D * c.n_experts;
      }
    }
    EXPECT_EQ(materialize(b, p).param_count(), n);
  }
}

TEST(Accounting, FlopsAndMemoryShrinkWithAnyDrop) {
  const Backbone b = Backbone::init(small_cfg(), 18);
  const ModelLayout l = b.layout();
  const double f0 = model_flops(b);
  const std::size_t m0 = model_memory(b);
  EXPECT_EQ(model_flops(materialize(b, identity_plan(l))), f0);
  for (const UnitGroupLayout& g : l.groups) {
    // drop just the last unit of one group
    PrunePlan p = identity_plan(l);
    p.keep[g.id].pop_back();
    if (g.id.site == Site::attention_head) {
      std::set<std::size_t> used;
      for (std::size_t h : p.keep[g.id]) used.insert(l.attention[g.id.layer].head_group[h]);
      p.kv_keep[g.id.layer] = {used.begin(), used.end()};
    }
    const Backbone m = materialize(b, p);
    EXPECT_LT(model_flops(m), f0) << g.id.str();
    EXPECT_LT(model_memory(m), m0) << g.id.str();
  }
}

TEST(Accounting, FlopsFromConfigAndSparseSavings) {
  const BackboneConfig sparse;  // defaults
  BackboneConfig dense = sparse;
  dense.sparse_attention = false;
  EXPECT_EQ(model_flops(sparse), model_flops(Backbone::init(sparse, 5)));
  // Only scores and mix differ: 2 * H * (T - U) * T * 2d per attention layer.
  const double d = double(sparse.model_dim / sparse.n_heads), H = double(sparse.n_heads);
  auto saving = [&](std::size_t T) {
    return 2.0 * H * double(T - top_u_count(T, sparse.sparsity_const)) * double(T) * 2.0 * d;
  };
  const std::size_t N = sparse.seq_len * sparse.n_modalities;
  const double expect = double(sparse.n_modalities * sparse.encoder_depth) * saving(sparse.seq_len) +
                        double(sparse.fusion_depth) * saving(N);
  EXPECT_DOUBLE_EQ(model_flops(dense) - model_flops(sparse), expect);
  EXPECT_GT(expect, 0.0);
}

TEST(Accounting, MemoryIsSerializedSize) {
  const Backbone b = Backbone::init(small_cfg(), 19);
  EXPECT_EQ(model_memory(b), serialize_backbone(b).size());
}

TEST(Scorers, SentryGateDelegatesToGates) {
  const Backbone b = Backbone::init(small_cfg(), 20);
  GateTable g = GateTable::init(b.layout(), 3, 21);
  const ModalityMask m = ModalityMask::parse("101");
  const UnitScores s = score_sentrygate(g, m);
  EXPECT_EQ(s.scorer, "sentrygate");
  EXPECT_EQ(s.scores, g.gate_forward_all(m));
  EXPECT_NO_THROW(s.validate(b.layout()));
  for (const auto& [id, v] : s.scores)
    for (double x : v) EXPECT_NEAR(x, 0.5, 0.25);
  EXPECT_THROW(score_sentrygate(g, ModalityMask::parse("10")), InputError);
  EXPECT_THROW(score_sentrygate(g, std::span<const ModalityMask>{}), InputError);
}

TEST(Scorers, SentryGateIsMaskConditioned) {
  const Backbone b = Backbone::init(small_cfg(), 22);
  GateTable g = GateTable::init(b.layout(), 3, 23);
  std::mt19937_64 rng(24);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& p : g.parameters())
    for (double& v : p.tensor.mutable_values()) v = n(rng);
  const ModalityMask a = ModalityMask::parse("110"), c = ModalityMask::parse("011");
  EXPECT_NE(score_sentrygate(g, a).scores, score_sentrygate(g, c).scores);
  const ModalityMask both[] = {a, c};
  const UnitScores mean = score_sentrygate(g, both);
  const UnitScores sa = score_sentrygate(g, a), sc = score_sentrygate(g, c);
  for (const auto& [id, v] : mean.scores)
    for (std::size_t i = 0; i < v.size(); ++i)
      EXPECT_NEAR(v[i], 0.5 * (sa.scores.at(id)[i] + sc.scores.at(id)[i]), 1e-15);
}

TEST(Scorers, RandomIsSeeded) {
  const ModelLayout l = Backbone::init(small_cfg(), 25).layout();
  const UnitScores a = score_random(l, 7), b = score_random(l, 7), c = score_random(l, 8);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_NE(a.scores, c.scores);
  EXPECT_NO_THROW(a.validate(l));
  for (const auto& [id, v] : a.scores)
    for (double x : v) {
      EXPECT_GE(x, 0.0);
      EXPECT_LT(x, 1.0);
    }
}

TEST(Scorers, MagnitudeOfConstantWeightsIsHalf) {
  Backbone b = Backbone::init(small_cfg(), 26);
  for (const auto& p : b.parameters())
    for (double& v : Tensor(p.tensor).mutable_values()) v = 0.3;
  for (const auto& [id, v] : score_magnitude(b).scores)
    for (double x : v) EXPECT_EQ(x, 0.5);
}

TEST(Scorers, MagnitudeRanksByOwnSlices) {
  Backbone b = Backbone::init(small_cfg(), 27);
  auto& f = b.encoders()[0].layers[0].ffn;
  for (std::size_t r = 0; r < 8; ++r) f.w1.mutable_values()[r * f.width() + 4] = 50.0;
  const UnitScores all = score_magnitude(b);
  const auto& s = all.scores.at({Site::ffn_channel, 0, 0});
  EXPECT_EQ(s[4], 1.0);
  EXPECT_EQ(*std::min_element(s.begin(), s.end()), 0.0);
}

TEST(Scorers, SynapticSaliencyHandCase) {
  // x = [1, 1], W1 = [[1, 2], [3, 4]], W2 = [[1], [2]], R = x W1 W2.
  // dR/dW1[i][j] = x_i W2_j, dR/dW2_j = (x W1)_j = (4, 6).
  Tensor w1({2, 2}, {1, 2, 3, 4}), w2({2, 1}, {1, 2});
  const Tensor x({1, 2}, {1, 1});
  const auto sal = synaptic_saliency({w1, w2}, [&] { return sum_all(matmul(matmul(x, w1), w2)); });
  EXPECT_EQ(sal[0], (std::vector<double>{1, 4, 3, 8}));
  EXPECT_EQ(sal[1], (std::vector<double>{4, 12}));
  // per hidden unit j: W1 column j plus W2 row j -> 8 and 24
  EXPECT_EQ(sal[0][0] + sal[0][2] + sal[1][0], 8.0);
  EXPECT_EQ(sal[0][1] + sal[0][3] + sal[1][1], 24.0);
}

TEST(Scorers, SynflowIsDataFreeAndLeavesModelAlone) {
  const Backbone b = Backbone::init(small_cfg(), 28);
  std::vector<std::vector<double>> before;
  for (const auto& p : b.parameters()) before.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  const UnitScores s = score_synflow(b);
  EXPECT_NO_THROW(s.validate(b.layout()));
  for (const auto& [id, v] : s.scores) {
    EXPECT_EQ(*std::max_element(v.begin(), v.end()), 1.0) << id.str();
    for (double x : v) EXPECT_GE(x, 0.0);
  }
  const auto after = b.parameters();
  for (std::size_t i = 0; i < after.size(); ++i) {
    EXPECT_EQ(std::vector<double>(after[i].tensor.values().begin(), after[i].tensor.values().end()), before[i]);
    if (after[i].tensor.has_grad())
      for (double g : after[i].tensor.grad()) EXPECT_EQ(g, 0.0);
  }
  EXPECT_EQ(score_synflow(b).scores, s.scores);
}

TEST(Scorers, TaylorScoresAreNormalizedAndClean) {
  const BackboneConfig c = small_cfg();
  Backbone b = Backbone::init(c, 29);
  SyntheticSpec ds;
  ds.n_modalities = 3;
  ds.seq_len = 10;
  ds.n_classes = 3;
  ds.signature = SyntheticSpec::default_signature(3, 3);
  ds.samples_per_class = 4;
  const Dataset d = generate(ds);
  const auto masks = masks_with_missing(3, 1);
  const UnitScores s = score_taylor(b, d, masks, 6);
  EXPECT_NO_THROW(s.validate(b.layout()));
  for (const auto& [id, v] : s.scores)
    for (double x : v) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  for (const auto& p : b.parameters())
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) ASSERT_EQ(g, 0.0);
  const ModalityMask one[] = {masks[0]};
  const UnitScores single = score_taylor(b, d, one, 6);
  // one mask: every group spans exactly [0, 1] or is flat at 0.5
  for (const auto& [id, v] : single.scores) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    EXPECT_TRUE((*lo == 0.0 && *hi == 1.0) || (*lo == 0.5 && *hi == 0.5)) << id.str();
  }
  EXPECT_THROW(score_taylor(b, d, {}, 6), InputError);
}

TEST(Materialize, PrunedModelRunsUnderEveryMask) {
  BackboneConfig c = small_cfg();
  const Backbone b = Backbone::init(c, 30);
  const ModelLayout l = b.layout();
  std::mt19937_64 rng(31);
  const Backbone m = materialize(b, select_by_budget(random_scores(l, rng), l, 0.9));
  const Sample s = oracle::random_sample(rng, c);
  for (unsigned bits = 0; bits < 8; ++bits) {
    const ModalityMask mask({std::uint8_t(bits & 1), std::uint8_t((bits >> 1) & 1), std::uint8_t((bits >> 2) & 1)});
    for (double x : logits(m, s, mask)) EXPECT_TRUE(std::isfinite(x));
  }
}
