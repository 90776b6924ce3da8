#include "modprune/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "modprune/errors.hpp"

namespace modprune {

// ---- config / mask ----------------------------------------------------------

AttentionConfig BackboneConfig::encoder_attention() const {
  return {n_heads, n_kv_groups, model_dim, seq_len, sparsity_const, sparse_attention};
}

AttentionConfig BackboneConfig::fusion_attention() const {
  return {n_heads, n_kv_groups, model_dim, seq_len * n_modalities, sparsity_const, sparse_attention};
}

void BackboneConfig::validate() const {
  if (!n_modalities || !seq_len || !input_dim || !model_dim || !ffn_dim || !n_classes || !expert_dim)
    throw InputError("BackboneConfig: dimensions must be positive");
  if (fusion_depth > 0 && (n_experts == 0 || top_k == 0))
    throw InputError("BackboneConfig: fusion layers need at least one expert and top_k >= 1");
  if (top_k > n_experts) throw InputError("BackboneConfig: top_k exceeds n_experts");
  encoder_attention().validate();
}

ModalityMask::ModalityMask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
  for (auto& b : bits_) b = b ? 1 : 0;
}

ModalityMask ModalityMask::all_present(std::size_t m) { return ModalityMask(std::vector<std::uint8_t>(m, 1)); }

ModalityMask ModalityMask::parse(std::string_view s) {
  std::vector<std::uint8_t> bits;
  for (char c : s) {
    if (c != '0' && c != '1') throw InputError("modality mask must be a string of 0/1, got '" + std::string(s) + "'");
    bits.push_back(c == '1');
  }
  if (bits.empty()) throw InputError("empty modality mask");
  return ModalityMask(std::move(bits));
}

std::size_t ModalityMask::n_present() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1));
}

std::vector<double> ModalityMask::as_doubles() const { return {bits_.begin(), bits_.end()}; }

std::string ModalityMask::str() const {
  std::string s;
  for (auto b : bits_) s += b ? '1' : '0';
  return s;
}

std::vector<ModalityMask> masks_with_missing(std::size_t m, std::size_t k) {
  if (k > m) throw InputError("masks_with_missing: k > m");
  std::vector<ModalityMask> out;
  std::vector<std::uint8_t> pick(m, 0);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k), 1);
  // prev_permutation over a sorted-descending selector walks subsets lexicographically
  do {
    std::vector<std::uint8_t> bits(m);
    for (std::size_t j = 0; j < m; ++j) bits[j] = pick[j] ? 0 : 1;
    out.emplace_back(std::move(bits));
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return out;
}

std::size_t ModelLayout::total_units() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.units;
  return n;
}

// ---- hooks ----------------------------------------------------------------------

namespace {

Tensor apply_hooks(Tensor act, UnitGroupId id, std::size_t unit_width, ForwardContext* ctx) {
  if (!ctx) return act;
  if (ctx->unit_mask) {
    auto it = ctx->unit_mask->find(id);
    if (it != ctx->unit_mask->end()) {
      const auto& mult = it->second;
      const std::size_t R = act.rows(), C = act.cols();
      if (mult.size() * unit_width != C)
        throw ShapeError("unit mask for " + id.str() + " has " + std::to_string(mult.size()) + " units, layer has " +
                         std::to_string(C / unit_width));
      std::vector<double> m(R * C);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) m[r * C + c] = mult[c / unit_width];
      act = mul(act, Tensor({R, C}, std::move(m)));
    }
  }
  if (ctx->taps && act.requires_grad()) ctx->taps->register_tap(act, id, unit_width);
  return act;
}

AttentionProbe* probe_for(ForwardContext* ctx, std::size_t layer) {
  if (!ctx || !ctx->probes) return nullptr;
  if (ctx->probes->size() <= layer) ctx->probes->resize(layer + 1);
  return &(*ctx->probes)[layer];
}

Tensor attention_block(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, std::size_t layer,
                       ForwardContext* ctx) {
  const Tensor heads = attention_heads(layer_norm(x, 1), w, cfg, probe_for(ctx, layer));
  const Tensor hooked = apply_hooks(heads, {Site::attention_head, layer, 0}, w.head_dim, ctx);
  return add(x, matmul(hooked, w.w_o));
}

}  // namespace

Tensor feed_forward(const Tensor& x, const FeedForward& ffn, UnitGroupId id, ForwardContext* ctx) {
  const Tensor hidden = apply_hooks(gelu(add(matmul(x, ffn.w1), ffn.b1)), id, 1, ctx);
  return add(matmul(hidden, ffn.w2), ffn.b2);
}

Tensor moe_ffn(const Tensor& h, const MoeFeedForward& moe, std::size_t layer, ForwardContext* ctx) {
  const std::size_t N = h.rows(), E = moe.experts.size();
  if (E == 0) throw ShapeError("moe_ffn: no experts");
  if (moe.top_k == 0 || moe.top_k > E) throw ShapeError("moe_ffn: bad top_k");
  const Tensor logits = matmul(h, moe.router);
  const auto lv = logits.values();
  for (double v : lv)
    if (!std::isfinite(v)) throw DomainError("moe_ffn: non-finite router logit");

  std::vector<std::uint8_t> keep(N * E, 0);
  std::vector<std::vector<std::size_t>> routed(E);
  std::vector<std::size_t> order(E);
  for (std::size_t t = 0; t < N; ++t) {
    std::iota(order.begin(), order.end(), 0);
    const double* row = lv.data() + t * E;
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    for (std::size_t i = 0; i < moe.top_k; ++i) keep[t * E + order[i]] = 1;
    for (std::size_t e = 0; e < E; ++e)
      if (keep[t * E + e]) routed[e].push_back(t);
  }
  const Tensor weights = masked_softmax(logits, keep);

  Tensor out;
  for (std::size_t e = 0; e < E; ++e) {
    if (routed[e].empty()) continue;
    const FeedForward& ex = moe.experts[e];
    const Tensor xe = gather_rows(h, routed[e]);
    const Tensor ye = feed_forward(xe, ex, {Site::expert_channel, layer, e}, ctx);
    const Tensor we = slice_cols(gather_rows(weights, routed[e]), e, e + 1);
    const Tensor contrib = scatter_rows(scale_rows(ye, we), routed[e], N);
    out = out.defined() ? add(out, contrib) : contrib;
  }
  return out;
}

// ---- Backbone ---------------------------------------------------------------------

Backbone::Backbone(BackboneConfig cfg, std::vector<ModalityEncoder> enc, std::vector<FusionLayer> fusion,
                   Tensor head_w, Tensor head_b)
    : cfg_(std::move(cfg)),
      encoders_(std::move(enc)),
      fusion_(std::move(fusion)),
      head_w_(std::move(head_w)),
      head_b_(std::move(head_b)) {}

Backbone Backbone::init(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t D = cfg.model_dim;
  auto mat = [&](std::size_t r, std::size_t c, double stddev) {
    std::normal_distribution<double> nd(0.0, stddev);
    std::vector<double> v(r * c);
    for (double& x : v) x = nd(rng);
    return Tensor({r, c}, std::move(v), true);
  };
  auto vec = [&](std::size_t n, double stddev) {
    std::normal_distribution<double> nd(0.0, stddev);
    std::vector<double> v(n);
    for (double& x : v) x = stddev > 0 ? nd(rng) : 0.0;
    return Tensor({n}, std::move(v), true);
  };
  auto ffn = [&](std::size_t width) {
    return FeedForward{mat(D, width, 1.0 / std::sqrt(double(D))), vec(width, 0.0),
                       mat(width, D, 1.0 / std::sqrt(double(width))), vec(D, 0.0)};
  };

  std::vector<ModalityEncoder> enc;
  for (std::size_t j = 0; j < cfg.n_modalities; ++j) {
    ModalityEncoder e;
    e.embed_w = mat(cfg.input_dim, D, 1.0 / std::sqrt(double(cfg.input_dim)));
    e.embed_b = vec(D, 0.0);
    e.pos = mat(cfg.seq_len, D, 0.1);
    e.missing_token = vec(D, 0.1);
    for (std::size_t l = 0; l < cfg.encoder_depth; ++l)
      e.layers.push_back({AttentionWeights::init(cfg.encoder_attention(), rng), ffn(cfg.ffn_dim)});
    enc.push_back(std::move(e));
  }
  std::vector<FusionLayer> fus;
  for (std::size_t f = 0; f < cfg.fusion_depth; ++f) {
    FusionLayer fl;
    fl.attn = AttentionWeights::init(cfg.fusion_attention(), rng);
    fl.moe.router = mat(D, cfg.n_experts, 1.0 / std::sqrt(double(D)));
    fl.moe.top_k = cfg.top_k;
    for (std::size_t e = 0; e < cfg.n_experts; ++e) fl.moe.experts.push_back(ffn(cfg.expert_dim));
    fus.push_back(std::move(fl));
  }
  Tensor hw = mat(D, cfg.n_classes, 1.0 / std::sqrt(double(D)));
  Tensor hb = vec(cfg.n_classes, 0.0);
  return Backbone(cfg, std::move(enc), std::move(fus), std::move(hw), std::move(hb));
}

Tensor Backbone::embed_modality(std::size_t j, const Tensor& x) const {
  const ModalityEncoder& e = encoders_.at(j);
  if (x.ndim() != 2 || x.rows() != cfg_.seq_len || x.cols() != cfg_.input_dim)
    throw ShapeError("modality " + std::to_string(j) + ": input " + shape_str(x.shape()) + ", expected [" +
                     std::to_string(cfg_.seq_len) + "," + std::to_string(cfg_.input_dim) + "]");
  return add(add(matmul(x, e.embed_w), e.embed_b), e.pos);
}

Tensor Backbone::encode_modality(std::size_t j, const Tensor& x, bool present, ForwardContext* ctx) const {
  const ModalityEncoder& e = encoders_.at(j);
  if (!present) return add(Tensor::zeros({cfg_.seq_len, cfg_.model_dim}), e.missing_token);
  if (!x.defined()) throw InputError("modality " + std::to_string(j) + " is flagged present but has no data");
  Tensor h = embed_modality(j, x);
  const AttentionConfig acfg = cfg_.encoder_attention();
  for (std::size_t l = 0; l < e.layers.size(); ++l) {
    const std::size_t layer = encoder_layer_index(j, l);
    h = attention_block(h, e.layers[l].attn, acfg, layer, ctx);
    h = add(h, feed_forward(layer_norm(h, 1), e.layers[l].ffn, {Site::ffn_channel, layer, 0}, ctx));
  }
  return h;
}

Tensor Backbone::fuse_and_classify(std::span<const Tensor> streams, ForwardContext* ctx) const {
  if (streams.size() != cfg_.n_modalities)
    throw ShapeError("fuse_and_classify: " + std::to_string(streams.size()) + " streams for " +
                     std::to_string(cfg_.n_modalities) + " modalities");
  for (const Tensor& s : streams)
    if (s.ndim() != 2 || s.rows() != cfg_.seq_len || s.cols() != cfg_.model_dim)
      throw ShapeError("fuse_and_classify: stream of shape " + shape_str(s.shape()));
  Tensor h = concat_rows(streams);
  const AttentionConfig acfg = cfg_.fusion_attention();
  for (std::size_t f = 0; f < fusion_.size(); ++f) {
    const std::size_t layer = fusion_layer_index(f);
    h = attention_block(h, fusion_[f].attn, acfg, layer, ctx);
    h = add(h, moe_ffn(layer_norm(h, 1), fusion_[f].moe, layer, ctx));
  }
  const Tensor pooled = reshape(mean(layer_norm(h, 1), 0), {1, cfg_.model_dim});
  return add(matmul(pooled, head_w_), head_b_);
}

Tensor Backbone::forward(std::span<const Tensor> streams, const ModalityMask& mask, ForwardContext* ctx) const {
  if (mask.size() != cfg_.n_modalities)
    throw InputError("mask length " + std::to_string(mask.size()) + " does not match " +
                     std::to_string(cfg_.n_modalities) + " modalities");
  if (streams.size() != cfg_.n_modalities)
    throw InputError("sample has " + std::to_string(streams.size()) + " streams, expected " +
                     std::to_string(cfg_.n_modalities));
  std::vector<Tensor> encoded;
  encoded.reserve(cfg_.n_modalities);
  for (std::size_t j = 0; j < cfg_.n_modalities; ++j)
    encoded.push_back(encode_modality(j, streams[j], mask.present(j), ctx));
  return fuse_and_classify(encoded, ctx);
}

ModelLayout Backbone::layout() const {
  ModelLayout out;
  out.attention.resize(cfg_.n_layers());
  auto add_attn = [&](std::size_t layer, const AttentionWeights& w) {
    out.groups.push_back({{Site::attention_head, layer, 0}, w.n_heads()});
    out.attention[layer] = {layer, w.n_groups(), w.head_group};
  };
  for (std::size_t j = 0; j < encoders_.size(); ++j)
    for (std::size_t l = 0; l < encoders_[j].layers.size(); ++l) {
      const std::size_t layer = encoder_layer_index(j, l);
      add_attn(layer, encoders_[j].layers[l].attn);
      out.groups.push_back({{Site::ffn_channel, layer, 0}, encoders_[j].layers[l].ffn.width()});
    }
  for (std::size_t f = 0; f < fusion_.size(); ++f) {
    const std::size_t layer = fusion_layer_index(f);
    add_attn(layer, fusion_[f].attn);
    for (std::size_t e = 0; e < fusion_[f].moe.experts.size(); ++e)
      out.groups.push_back({{Site::expert_channel, layer, e}, fusion_[f].moe.experts[e].width()});
  }
  return out;
}

std::vector<NamedTensor> Backbone::parameters() const {
  std::vector<NamedTensor> p;
  auto attn = [&](const std::string& pre, const AttentionWeights& w) {
    p.push_back({pre + "attn.w_q", w.w_q});
    p.push_back({pre + "attn.w_k", w.w_k});
    p.push_back({pre + "attn.w_v", w.w_v});
    p.push_back({pre + "attn.w_o", w.w_o});
  };
  auto ffn = [&](const std::string& pre, const FeedForward& f) {
    p.push_back({pre + "w1", f.w1});
    p.push_back({pre + "b1", f.b1});
    p.push_back({pre + "w2", f.w2});
    p.push_back({pre + "b2", f.b2});
  };
  for (std::size_t j = 0; j < encoders_.size(); ++j) {
    const std::string pre = "enc." + std::to_string(j) + ".";
    const ModalityEncoder& e = encoders_[j];
    p.push_back({pre + "embed.w", e.embed_w});
    p.push_back({pre + "embed.b", e.embed_b});
    p.push_back({pre + "pos", e.pos});
    p.push_back({pre + "missing_token", e.missing_token});
    for (std::size_t l = 0; l < e.layers.size(); ++l) {
      const std::string lp = pre + "layer." + std::to_string(l) + ".";
      attn(lp, e.layers[l].attn);
      ffn(lp + "ffn.", e.layers[l].ffn);
    }
  }
  for (std::size_t f = 0; f < fusion_.size(); ++f) {
    const std::string pre = "fusion." + std::to_string(f) + ".";
    attn(pre, fusion_[f].attn);
    p.push_back({pre + "moe.router", fusion_[f].moe.router});
    for (std::size_t e = 0; e < fusion_[f].moe.experts.size(); ++e)
      ffn(pre + "moe.expert." + std::to_string(e) + ".", fusion_[f].moe.experts[e]);
  }
  p.push_back({"head.w", head_w_});
  p.push_back({"head.b", head_b_});
  return p;
}

std::size_t Backbone::param_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Backbone Backbone::clone() const {
  auto c_attn = [](const AttentionWeights& w) {
    AttentionWeights o = w;
    o.w_q = w.w_q.clone();
    o.w_k = w.w_k.clone();
    o.w_v = w.w_v.clone();
    o.w_o = w.w_o.clone();
    return o;
  };
  auto c_ffn = [](const FeedForward& f) { return FeedForward{f.w1.clone(), f.b1.clone(), f.w2.clone(), f.b2.clone()}; };
  std::vector<ModalityEncoder> enc;
  for (const auto& e : encoders_) {
    ModalityEncoder n{e.embed_w.clone(), e.embed_b.clone(), e.pos.clone(), e.missing_token.clone(), {}};
    for (const auto& l : e.layers) n.layers.push_back({c_attn(l.attn), c_ffn(l.ffn)});
    enc.push_back(std::move(n));
  }
  std::vector<FusionLayer> fus;
  for (const auto& f : fusion_) {
    FusionLayer n;
    n.attn = c_attn(f.attn);
    n.moe.router = f.moe.router.clone();
    n.moe.top_k = f.moe.top_k;
    for (const auto& e : f.moe.experts) n.moe.experts.push_back(c_ffn(e));
    fus.push_back(std::move(n));
  }
  return Backbone(cfg_, std::move(enc), std::move(fus), head_w_.clone(), head_b_.clone());
}

}  // namespace modprune
