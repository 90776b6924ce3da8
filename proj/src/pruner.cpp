#include "modprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "modprune/checkpoint.hpp"
#include "modprune/errors.hpp"

namespace modprune {

using nlohmann::json;

const std::vector<std::string> kScorerNames = {"sentrygate", "random", "magnitude", "synflow", "taylor"};

std::size_t UnitScores::size() const {
  std::size_t n = 0;
  for (const auto& [id, v] : scores) n += v.size();
  return n;
}

void UnitScores::validate(const ModelLayout& layout) const {
  if (scores.size() != layout.groups.size())
    throw InputError("scores cover " + std::to_string(scores.size()) + " unit groups, model has " +
                     std::to_string(layout.groups.size()));
  for (const UnitGroupLayout& g : layout.groups) {
    auto it = scores.find(g.id);
    if (it == scores.end()) throw InputError("no scores for unit group " + g.id.str());
    if (it->second.size() != g.units)
      throw InputError("unit group " + g.id.str() + ": " + std::to_string(it->second.size()) + " scores for " +
                       std::to_string(g.units) + " units");
    for (double s : it->second)
      if (!std::isfinite(s)) throw DomainError("non-finite score in unit group " + g.id.str());
  }
}

json UnitScores::to_json() const {
  json groups = json::object();
  for (const auto& [id, v] : scores) groups[id.str()] = v;
  return {{"scorer", scorer}, {"scores", groups}};
}

// ---- scorers ----------------------------------------------------------------------

UnitScores score_sentrygate(const GateTable& gates, const ModalityMask& platform) {
  UnitScores s;
  s.scorer = "sentrygate";
  s.scores = gates.gate_forward_all(platform);
  return s;
}

UnitScores score_sentrygate(const GateTable& gates, std::span<const ModalityMask> platforms) {
  if (platforms.empty()) throw InputError("score_sentrygate: no platform masks");
  UnitScores s;
  s.scorer = "sentrygate";
  for (const ModalityMask& m : platforms)
    for (const auto& [id, v] : gates.gate_forward_all(m)) {
      auto& acc = s.scores[id];
      if (acc.empty()) acc.assign(v.size(), 0.0);
      for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
    }
  const double inv = 1.0 / static_cast<double>(platforms.size());
  for (auto& [id, v] : s.scores)
    for (double& x : v) x *= inv;
  return s;
}

UnitScores score_random(const ModelLayout& layout, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  UnitScores s;
  s.scorer = "random";
  for (const UnitGroupLayout& g : layout.groups) {
    auto& v = s.scores[g.id];
    for (std::size_t i = 0; i < g.units; ++i) v.push_back(u(rng));
  }
  return s;
}

namespace {

// Reduces per-entry parameter values to per-unit values. A head owns its
// W_Q column block and W_O row block; a channel owns its W1 column, b1 entry
// and W2 row. Shared K/V projections belong to no single head.
std::map<UnitGroupId, std::vector<double>> reduce_units(const Backbone& m,
                                                        const std::map<std::string, std::vector<double>>& v,
                                                        bool average) {
  std::map<UnitGroupId, std::vector<double>> out;
  const std::size_t D = m.config().model_dim;
  auto heads = [&](const std::string& pre, const AttentionWeights& w, UnitGroupId id) {
    const auto& q = v.at(pre + "attn.w_q");
    const auto& o = v.at(pre + "attn.w_o");
    const std::size_t d = w.head_dim, Qc = w.w_q.cols();
    auto& dst = out[id];
    for (std::size_t h = 0; h < w.n_heads(); ++h) {
      double s = 0.0;
      for (std::size_t r = 0; r < D; ++r)
        for (std::size_t c = h * d; c < (h + 1) * d; ++c) s += q[r * Qc + c];
      for (std::size_t r = h * d; r < (h + 1) * d; ++r)
        for (std::size_t c = 0; c < D; ++c) s += o[r * D + c];
      dst.push_back(average ? s / static_cast<double>(2 * D * d) : s);
    }
  };
  auto channels = [&](const std::string& pre, const FeedForward& f, UnitGroupId id) {
    const auto& w1 = v.at(pre + "w1");
    const auto& b1 = v.at(pre + "b1");
    const auto& w2 = v.at(pre + "w2");
    const std::size_t F = f.width();
    auto& dst = out[id];
    for (std::size_t c = 0; c < F; ++c) {
      double s = b1[c];
      for (std::size_t r = 0; r < D; ++r) s += w1[r * F + c] + w2[c * D + r];
      dst.push_back(average ? s / static_cast<double>(2 * D + 1) : s);
    }
  };
  for (std::size_t j = 0; j < m.encoders().size(); ++j)
    for (std::size_t l = 0; l < m.encoders()[j].layers.size(); ++l) {
      const std::string pre = "enc." + std::to_string(j) + ".layer." + std::to_string(l) + ".";
      const std::size_t layer = m.encoder_layer_index(j, l);
      heads(pre, m.encoders()[j].layers[l].attn, {Site::attention_head, layer, 0});
      channels(pre + "ffn.", m.encoders()[j].layers[l].ffn, {Site::ffn_channel, layer, 0});
    }
  for (std::size_t f = 0; f < m.fusion().size(); ++f) {
    const std::string pre = "fusion." + std::to_string(f) + ".";
    const std::size_t layer = m.fusion_layer_index(f);
    heads(pre, m.fusion()[f].attn, {Site::attention_head, layer, 0});
    for (std::size_t e = 0; e < m.fusion()[f].moe.experts.size(); ++e)
      channels(pre + "moe.expert." + std::to_string(e) + ".", m.fusion()[f].moe.experts[e],
               {Site::expert_channel, layer, e});
  }
  return out;
}

void normalize_groups(std::map<UnitGroupId, std::vector<double>>& s) {
  for (auto& [id, v] : s) v = normalize_saliency(v);
}

}  // namespace

UnitScores score_magnitude(const Backbone& model) {
  std::map<std::string, std::vector<double>> v;
  for (const NamedTensor& p : model.parameters()) {
    auto& a = v[p.path];
    for (double x : p.tensor.values()) a.push_back(std::fabs(x));
  }
  UnitScores s;
  s.scorer = "magnitude";
  s.scores = reduce_units(model, v, true);
  normalize_groups(s.scores);
  return s;
}

std::vector<std::vector<double>> synaptic_saliency(const std::vector<Tensor>& params,
                                                   const std::function<Tensor()>& objective) {
  for (Tensor p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  const Tensor r = objective();
  backward(r);
  std::vector<std::vector<double>> out;
  for (const Tensor& p : params) {
    std::vector<double> s(p.numel(), 0.0);
    if (p.has_grad()) {
      const auto w = p.values(), g = p.grad();
      for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::fabs(w[i] * g[i]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

UnitScores score_synflow(const Backbone& model) {
  const Backbone c = model.clone();
  const auto named = c.parameters();
  std::vector<Tensor> params;
  for (const NamedTensor& p : named) {
    for (double& x : Tensor(p.tensor).mutable_values()) x = std::fabs(x);
    params.push_back(p.tensor);
  }
  const BackboneConfig& cfg = c.config();
  std::vector<Tensor> ones(cfg.n_modalities, Tensor::ones({cfg.seq_len, cfg.input_dim}));
  const auto sal = synaptic_saliency(params, [&] {
    return sum_all(c.forward(ones, ModalityMask::all_present(cfg.n_modalities)));
  });
  std::map<std::string, std::vector<double>> v;
  for (std::size_t i = 0; i < named.size(); ++i) v[named[i].path] = sal[i];
  for (Tensor p : params) p.zero_grad();
  UnitScores s;
  s.scorer = "synflow";
  s.scores = reduce_units(c, v, false);
  normalize_groups(s.scores);
  return s;
}

UnitScores score_taylor(const Backbone& model, const Dataset& data, std::span<const ModalityMask> masks,
                        std::size_t max_samples) {
  if (masks.empty()) throw InputError("score_taylor: no masks");
  if (data.samples.empty()) throw InputError("score_taylor: empty dataset");
  const ModelLayout layout = model.layout();
  const std::size_t n = max_samples ? std::min(max_samples, data.samples.size()) : data.samples.size();
  UnitScores s;
  s.scorer = "taylor";
  for (const UnitGroupLayout& g : layout.groups) s.scores[g.id].assign(g.units, 0.0);
  const std::vector<NamedTensor> params = model.parameters();
  for (const ModalityMask& mask : masks) {
    SaliencyAccumulator acc;
    for (const UnitGroupLayout& g : layout.groups) acc.expect(g.id, g.units);
    for (std::size_t i = 0; i < n; ++i) {
      const Sample& smp = data.samples[i];
      TapSet taps;
      ForwardContext ctx;
      ctx.taps = &taps;
      const std::size_t label[] = {smp.label};
      backward(cross_entropy(model.forward(smp, mask, &ctx), label));
      acc.add(taps.collect_taps());
    }
    for (const auto& [id, t] : acc.targets()) {
      auto& dst = s.scores.at(id);
      for (std::size_t u = 0; u < dst.size(); ++u) dst[u] += t.normalized[u];
    }
  }
  // The teacher pass leaves gradients on the model's parameters; clear them.
  for (const NamedTensor& p : params) Tensor(p.tensor).zero_grad();
  const double inv = 1.0 / static_cast<double>(masks.size());
  for (auto& [id, v] : s.scores)
    for (double& x : v) x *= inv;
  return s;
}

// ---- plans ------------------------------------------------------------------------

std::size_t PrunePlan::retained_units() const {
  std::size_t n = 0;
  for (const auto& [id, k] : keep) n += k.size();
  return n;
}

void PrunePlan::validate(const ModelLayout& layout) const {
  if (keep.size() != layout.groups.size())
    throw StructuralError("plan covers " + std::to_string(keep.size()) + " unit groups, model has " +
                          std::to_string(layout.groups.size()));
  for (const UnitGroupLayout& g : layout.groups) {
    auto it = keep.find(g.id);
    if (it == keep.end()) throw StructuralError("plan has no entry for " + g.id.str());
    const auto& k = it->second;
    if (k.empty()) throw StructuralError("plan removes every unit of " + g.id.str());
    for (std::size_t i = 0; i < k.size(); ++i) {
      if (k[i] >= g.units) throw StructuralError("plan keeps unit " + std::to_string(k[i]) + " of " + g.id.str() +
                                                 ", which has " + std::to_string(g.units));
      if (i && k[i] <= k[i - 1]) throw StructuralError("plan indices of " + g.id.str() + " not strictly ascending");
    }
    if (g.id.site != Site::attention_head) continue;
    const AttentionLayout& a = layout.attention.at(g.id.layer);
    std::set<std::size_t> referenced;
    for (std::size_t h : k) referenced.insert(a.head_group.at(h));
    auto kv = kv_keep.find(g.id.layer);
    if (kv == kv_keep.end()) throw StructuralError("plan lacks K/V groups for layer " + std::to_string(g.id.layer));
    const std::set<std::size_t> kept(kv->second.begin(), kv->second.end());
    if (kept.size() != kv->second.size() || !std::is_sorted(kv->second.begin(), kv->second.end()))
      throw StructuralError("K/V groups of layer " + std::to_string(g.id.layer) + " not strictly ascending");
    for (std::size_t grp : kept)
      if (grp >= a.n_groups) throw StructuralError("K/V group " + std::to_string(grp) + " out of range");
    for (std::size_t grp : referenced)
      if (!kept.count(grp))
        throw StructuralError("layer " + std::to_string(g.id.layer) + ": retained head needs dropped K/V group " +
                              std::to_string(grp));
    for (std::size_t grp : kept)
      if (!referenced.count(grp))
        throw StructuralError("layer " + std::to_string(g.id.layer) + ": K/V group " + std::to_string(grp) +
                              " kept without any head");
  }
  if (kv_keep.size() != layout.attention.size()) throw StructuralError("plan has K/V entries for unknown layers");
}

json PrunePlan::to_json() const {
  json groups = json::array();
  for (const auto& [id, k] : keep) groups.push_back({{"id", id.str()}, {"keep", k}});
  json kv = json::array();
  for (const auto& [layer, k] : kv_keep) kv.push_back({{"layer", layer}, {"keep", k}});
  return {{"scorer", scorer}, {"ratio", ratio}, {"groups", groups}, {"kv_groups", kv},
          {"floor_events", floor_events}, {"retained_units", retained_units()}};
}

PrunePlan PrunePlan::from_json(const json& j) {
  PrunePlan p;
  try {
    p.scorer = j.at("scorer").get<std::string>();
    p.ratio = j.at("ratio").get<double>();
    for (const json& g : j.at("groups"))
      p.keep[parse_unit_group_id(g.at("id").get<std::string>())] = g.at("keep").get<std::vector<std::size_t>>();
    for (const json& g : j.at("kv_groups"))
      p.kv_keep[g.at("layer").get<std::size_t>()] = g.at("keep").get<std::vector<std::size_t>>();
    p.floor_events = j.value("floor_events", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed prune plan: ") + e.what());
  }
  return p;
}

namespace {

void derive_kv(PrunePlan& p, const ModelLayout& layout) {
  p.kv_keep.clear();
  for (const AttentionLayout& a : layout.attention) {
    std::set<std::size_t> groups;
    for (std::size_t h : p.keep.at({Site::attention_head, a.layer, 0})) groups.insert(a.head_group[h]);
    p.kv_keep[a.layer] = {groups.begin(), groups.end()};
  }
}

}  // namespace

PrunePlan identity_plan(const ModelLayout& layout) {
  PrunePlan p;
  p.scorer = "identity";
  for (const UnitGroupLayout& g : layout.groups) {
    auto& k = p.keep[g.id];
    k.resize(g.units);
    std::iota(k.begin(), k.end(), 0);
  }
  derive_kv(p, layout);
  return p;
}

PrunePlan select_by_budget(const UnitScores& scores, const ModelLayout& layout, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw InputError("pruning ratio must lie in [0, 1), got " + std::to_string(ratio));
  scores.validate(layout);

  struct Entry {
    double score;
    std::size_t pos;  // canonical layout order
    std::size_t group;
    std::size_t unit;
  };
  std::vector<Entry> all;
  for (std::size_t gi = 0; gi < layout.groups.size(); ++gi) {
    const auto& v = scores.scores.at(layout.groups[gi].id);
    for (std::size_t u = 0; u < v.size(); ++u) all.push_back({v[u], all.size(), gi, u});
  }
  const std::size_t n_drop =
      static_cast<std::size_t>(std::floor(ratio * static_cast<double>(all.size()) + 1e-9));
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
    return a.score != b.score ? a.score < b.score : a.pos > b.pos;
  });

  std::vector<std::vector<std::uint8_t>> kept(layout.groups.size());
  for (std::size_t gi = 0; gi < layout.groups.size(); ++gi) kept[gi].assign(layout.groups[gi].units, 1);
  for (std::size_t i = 0; i < n_drop; ++i) kept[all[i].group][all[i].unit] = 0;

  PrunePlan p;
  p.scorer = scores.scorer;
  p.ratio = ratio;
  for (std::size_t gi = 0; gi < layout.groups.size(); ++gi) {
    const UnitGroupLayout& g = layout.groups[gi];
    if (std::none_of(kept[gi].begin(), kept[gi].end(), [](std::uint8_t k) { return k != 0; })) {
      const auto& v = scores.scores.at(g.id);
      const std::size_t best = static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
      kept[gi][best] = 1;
      p.floor_events.push_back(g.id.str() + ": kept unit " + std::to_string(best) + " to avoid removing the group");
    }
    auto& k = p.keep[g.id];
    for (std::size_t u = 0; u < g.units; ++u)
      if (kept[gi][u]) k.push_back(u);
  }
  derive_kv(p, layout);
  return p;
}

// ---- surgery ----------------------------------------------------------------------

namespace {

// Column blocks `blocks` of width w from a 2-D tensor.
Tensor take_col_blocks(const Tensor& t, std::span<const std::size_t> blocks, std::size_t w) {
  const std::size_t R = t.rows(), C = t.cols(), nc = blocks.size() * w;
  const auto v = t.values();
  std::vector<double> out(R * nc);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t b = 0; b < blocks.size(); ++b)
      for (std::size_t i = 0; i < w; ++i) out[r * nc + b * w + i] = v[r * C + blocks[b] * w + i];
  return Tensor({R, nc}, std::move(out), true);
}

Tensor take_row_blocks(const Tensor& t, std::span<const std::size_t> blocks, std::size_t w) {
  const std::size_t C = t.cols();
  const auto v = t.values();
  std::vector<double> out;
  out.reserve(blocks.size() * w * C);
  for (std::size_t b : blocks) out.insert(out.end(), v.begin() + b * w * C, v.begin() + (b + 1) * w * C);
  return Tensor({blocks.size() * w, C}, std::move(out), true);
}

Tensor take_entries(const Tensor& t, std::span<const std::size_t> idx) {
  const auto v = t.values();
  std::vector<double> out;
  for (std::size_t i : idx) out.push_back(v[i]);
  return Tensor({idx.size()}, std::move(out), true);
}

AttentionWeights cut_attention(const AttentionWeights& w, std::span<const std::size_t> heads,
                               std::span<const std::size_t> groups) {
  AttentionWeights o;
  o.head_dim = w.head_dim;
  o.w_q = take_col_blocks(w.w_q, heads, w.head_dim);
  o.w_k = take_col_blocks(w.w_k, groups, w.head_dim);
  o.w_v = take_col_blocks(w.w_v, groups, w.head_dim);
  o.w_o = take_row_blocks(w.w_o, heads, w.head_dim);
  for (std::size_t h : heads)
    o.head_group.push_back(static_cast<std::size_t>(
        std::distance(groups.begin(), std::find(groups.begin(), groups.end(), w.head_group[h]))));
  return o;
}

FeedForward cut_ffn(const FeedForward& f, std::span<const std::size_t> ch) {
  return {take_col_blocks(f.w1, ch, 1), take_entries(f.b1, ch), take_row_blocks(f.w2, ch, 1), f.b2.clone()};
}

}  // namespace

Backbone materialize(const Backbone& model, const PrunePlan& plan) {
  const ModelLayout layout = model.layout();
  plan.validate(layout);
  const Backbone src = model.clone();
  std::vector<ModalityEncoder> enc = src.encoders();
  for (std::size_t j = 0; j < enc.size(); ++j)
    for (std::size_t l = 0; l < enc[j].layers.size(); ++l) {
      const std::size_t layer = model.encoder_layer_index(j, l);
      EncoderLayer& el = enc[j].layers[l];
      el.attn = cut_attention(el.attn, plan.keep.at({Site::attention_head, layer, 0}), plan.kv_keep.at(layer));
      el.ffn = cut_ffn(el.ffn, plan.keep.at({Site::ffn_channel, layer, 0}));
    }
  std::vector<FusionLayer> fusion = src.fusion();
  for (std::size_t f = 0; f < fusion.size(); ++f) {
    const std::size_t layer = model.fusion_layer_index(f);
    fusion[f].attn =
        cut_attention(fusion[f].attn, plan.keep.at({Site::attention_head, layer, 0}), plan.kv_keep.at(layer));
    for (std::size_t e = 0; e < fusion[f].moe.experts.size(); ++e)
      fusion[f].moe.experts[e] = cut_ffn(fusion[f].moe.experts[e], plan.keep.at({Site::expert_channel, layer, e}));
  }
  return Backbone(src.config(), std::move(enc), std::move(fusion), src.head_w(), src.head_b());
}

UnitMask plan_unit_mask(const ModelLayout& layout, const PrunePlan& plan) {
  plan.validate(layout);
  UnitMask m;
  for (const UnitGroupLayout& g : layout.groups) {
    auto& v = m[g.id];
    v.assign(g.units, 0.0);
    for (std::size_t u : plan.keep.at(g.id)) v[u] = 1.0;
  }
  return m;
}

// ---- accounting -------------------------------------------------------------------

double model_flops(const Backbone& model) {
  const BackboneConfig& cfg = model.config();
  const double D = static_cast<double>(cfg.model_dim);
  auto attn = [&](const AttentionWeights& w, std::size_t T) {
    const std::size_t q = cfg.sparse_attention ? top_u_count(T, cfg.sparsity_const) : T;
    return attention_flops(w.n_heads(), w.n_groups(), w.head_dim, cfg.model_dim, T, q, cfg.sparse_attention).total();
  };
  auto ffn = [&](const FeedForward& f, double tokens) { return 2.0 * 2.0 * tokens * D * static_cast<double>(f.width()); };

  const double T = static_cast<double>(cfg.seq_len);
  double total = 0.0;
  for (const ModalityEncoder& e : model.encoders()) {
    total += 2.0 * T * static_cast<double>(cfg.input_dim) * D;
    for (const EncoderLayer& l : e.layers) total += attn(l.attn, cfg.seq_len) + ffn(l.ffn, T);
  }
  const std::size_t N = cfg.seq_len * cfg.n_modalities;
  for (const FusionLayer& f : model.fusion()) {
    const double E = static_cast<double>(f.moe.experts.size());
    total += attn(f.attn, N) + 2.0 * static_cast<double>(N) * D * E;
    const double routed = static_cast<double>(N) * static_cast<double>(f.moe.top_k) / E;
    for (const FeedForward& ex : f.moe.experts) total += ffn(ex, routed);
  }
  total += 2.0 * D * static_cast<double>(cfg.n_classes);
  return total;
}

double model_flops(const BackboneConfig& cfg) { return model_flops(Backbone::init(cfg, 0)); }

std::size_t model_memory(const Backbone& model) { return serialize_backbone(model).size(); }

}  // namespace modprune
