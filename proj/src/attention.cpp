#include "modprune/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "modprune/errors.hpp"

namespace modprune {

std::size_t top_u_count(std::size_t seq_len, std::size_t sparsity_const) {
  if (seq_len == 0) throw ShapeError("top_u_count: empty sequence");
  const double lnT = std::log(static_cast<double>(seq_len));
  const auto u = sparsity_const * static_cast<std::size_t>(std::ceil(lnT));
  return std::clamp<std::size_t>(u, 1, seq_len);
}

void AttentionConfig::validate() const {
  if (n_heads == 0 || n_kv_groups == 0 || model_dim == 0 || seq_len == 0 || sparsity_const == 0)
    throw InputError("AttentionConfig: all sizes must be positive");
  if (n_heads % n_kv_groups != 0)
    throw InputError("AttentionConfig: n_heads (" + std::to_string(n_heads) + ") is not a multiple of n_kv_groups (" +
                     std::to_string(n_kv_groups) + ")");
  if (model_dim % n_heads != 0)
    throw InputError("AttentionConfig: model_dim (" + std::to_string(model_dim) + ") is not divisible by n_heads");
}

void AttentionWeights::validate(std::size_t model_dim) const {
  if (head_dim == 0 || head_group.empty()) throw ShapeError("AttentionWeights: no heads");
  const std::size_t H = n_heads();
  if (w_q.rows() != model_dim || w_q.cols() != H * head_dim)
    throw ShapeError("AttentionWeights: W_Q is " + shape_str(w_q.shape()));
  if (w_k.rows() != model_dim || w_k.cols() % head_dim != 0 || w_v.shape() != w_k.shape())
    throw ShapeError("AttentionWeights: W_K/W_V are " + shape_str(w_k.shape()) + "/" + shape_str(w_v.shape()));
  if (w_o.rows() != H * head_dim || w_o.cols() != model_dim)
    throw ShapeError("AttentionWeights: W_O is " + shape_str(w_o.shape()));
  for (std::size_t g : head_group)
    if (g >= n_groups()) throw ShapeError("AttentionWeights: head mapped to missing group");
}

AttentionWeights AttentionWeights::init(const AttentionConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t D = cfg.model_dim, d = cfg.head_dim();
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(D)));
  auto mat = [&](std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (double& x : v) x = nd(rng);
    return Tensor({r, c}, std::move(v), true);
  };
  AttentionWeights w;
  w.head_dim = d;
  w.w_q = mat(D, cfg.n_heads * d);
  w.w_k = mat(D, cfg.n_kv_groups * d);
  w.w_v = mat(D, cfg.n_kv_groups * d);
  w.w_o = mat(cfg.n_heads * d, D);
  const std::size_t per_group = cfg.n_heads / cfg.n_kv_groups;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) w.head_group.push_back(h / per_group);
  return w;
}

std::vector<double> sparsity_score(const Tensor& q_head, const Tensor& k_group) {
  if (q_head.ndim() != 2 || k_group.ndim() != 2 || q_head.cols() != k_group.cols())
    throw ShapeError("sparsity_score: " + shape_str(q_head.shape()) + " vs " + shape_str(k_group.shape()));
  const std::size_t Tq = q_head.rows(), Tk = k_group.rows(), d = q_head.cols();
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  const double* Q = q_head.values().data();
  const double* K = k_group.values().data();
  std::vector<double> out(Tq);
  for (std::size_t t = 0; t < Tq; ++t) {
    double mx = -std::numeric_limits<double>::infinity(), sum = 0.0;
    for (std::size_t j = 0; j < Tk; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += Q[t * d + c] * K[j * d + c];
      s *= inv;
      mx = std::max(mx, s);
      sum += s;
    }
    out[t] = mx - sum / static_cast<double>(Tk);
  }
  return out;
}

std::vector<std::size_t> top_u_select(std::span<const double> scores, std::size_t u) {
  for (double s : scores)
    if (!std::isfinite(s)) throw DomainError("top_u_select: non-finite score");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  u = std::min(u, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(u), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(u);
  return idx;
}

std::vector<std::size_t> top_u_select(std::span<const double> scores, const AttentionConfig& cfg) {
  return top_u_select(scores, top_u_count(scores.size(), cfg.sparsity_const));
}

Tensor attention_heads(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg,
                       AttentionProbe* probe) {
  if (x.ndim() != 2 || x.cols() != cfg.model_dim)
    throw ShapeError("attention: input " + shape_str(x.shape()) + " does not match model_dim " +
                     std::to_string(cfg.model_dim));
  w.validate(cfg.model_dim);
  const std::size_t T = x.rows(), d = w.head_dim;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  const std::size_t U = cfg.sparse_enabled ? top_u_count(T, cfg.sparsity_const) : T;

  const Tensor q = matmul(x, w.w_q);
  const Tensor k = matmul(x, w.w_k);
  const Tensor v = matmul(x, w.w_v);

  const std::size_t G = w.n_groups();
  std::vector<Tensor> k_g(G), k_gt(G), v_g(G), ctx(G);
  for (std::size_t g = 0; g < G; ++g) {
    k_g[g] = slice_cols(k, g * d, (g + 1) * d);
    k_gt[g] = transpose(k_g[g]);
    v_g[g] = slice_cols(v, g * d, (g + 1) * d);
    if (cfg.sparse_enabled) ctx[g] = mean(v_g[g], 0);
  }

  std::vector<Tensor> outs;
  outs.reserve(w.n_heads());
  for (std::size_t h = 0; h < w.n_heads(); ++h) {
    const std::size_t g = w.head_group[h];
    const Tensor q_h = slice_cols(q, h * d, (h + 1) * d);
    Tensor head_out;
    std::vector<std::size_t> sel;
    Tensor probs;
    if (cfg.sparse_enabled) {
      sel = top_u_select(sparsity_score(q_h, k_g[g]), U);
      const Tensor q_sel = gather_rows(q_h, sel);
      probs = softmax(scale(matmul(q_sel, k_gt[g]), inv), 1);
      head_out = assemble_rows(matmul(probs, v_g[g]), sel, ctx[g], T);
    } else {
      probs = softmax(scale(matmul(q_h, k_gt[g]), inv), 1);
      head_out = matmul(probs, v_g[g]);
      sel.resize(T);
      std::iota(sel.begin(), sel.end(), 0);
    }
    if (probe) {
      AttentionProbe::Head rec;
      rec.head = h;
      rec.seq_len = T;
      rec.selected = sel;
      rec.weights.assign(T * T, 1.0 / static_cast<double>(T));
      const auto pv = probs.values();
      for (std::size_t r = 0; r < sel.size(); ++r)
        std::copy_n(pv.data() + r * T, T, rec.weights.data() + sel[r] * T);
      probe->heads.push_back(std::move(rec));
    }
    outs.push_back(std::move(head_out));
  }
  return outs.size() == 1 ? outs.front() : concat_cols(outs);
}

Tensor dense_mha(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg) {
  if (cfg.sparse_enabled) throw ContractError("dense_mha: config has sparse attention enabled");
  if (w.n_groups() != w.n_heads()) throw ContractError("dense_mha: needs one K/V group per head");
  return matmul(attention_heads(x, w, cfg), w.w_o);
}

Tensor sentry_attend(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, AttentionProbe* probe) {
  if (!cfg.sparse_enabled) throw ContractError("sentry_attend: config has sparse attention disabled");
  return matmul(attention_heads(x, w, cfg, probe), w.w_o);
}

AttentionFlops attention_flops(std::size_t heads, std::size_t groups, std::size_t head_dim, std::size_t model_dim,
                               std::size_t seq_len, std::size_t queries, bool sparse) {
  const double T = static_cast<double>(seq_len), D = static_cast<double>(model_dim),
               d = static_cast<double>(head_dim), Hq = static_cast<double>(heads),
               Hk = static_cast<double>(groups), U = static_cast<double>(queries);
  AttentionFlops f;
  f.projections = 2.0 * T * D * (Hq * d) + 2.0 * (2.0 * T * D * (Hk * d));
  f.scores = Hq * U * T * 2.0 * d;
  f.mix = Hq * U * T * 2.0 * d;
  f.output = 2.0 * T * (Hq * d) * D;
  f.selection = sparse ? Hq * T * T * 2.0 * d : 0.0;
  return f;
}

AttentionFlops attention_flops(const AttentionConfig& cfg) {
  cfg.validate();
  return attention_flops(cfg.n_heads, cfg.n_kv_groups, cfg.head_dim(), cfg.model_dim, cfg.seq_len,
                         cfg.effective_queries(), cfg.sparse_enabled);
}

}  // namespace modprune
