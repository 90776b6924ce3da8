#pragma once

// Multi-head self-attention in two flavours:
//   * dense_mha      - every head attends with every query row (reference path)
//   * sentry_attend  - grouped-query attention where each head keeps only the
//                      U queries with the spikiest score rows and fills the
//                      rest with the mean of its group's values.
//
// Heads are stored as column blocks of width head_dim inside the projection
// matrices. Query head h reads K/V group head_group[h]; for an unpruned layer
// that is h / (H_q / H_k).

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "modprune/tensor.hpp"

namespace modprune {

// U = clamp(c * ceil(ln T), 1, T).
std::size_t top_u_count(std::size_t seq_len, std::size_t sparsity_const);

struct AttentionConfig {
  std::size_t n_heads = 4;      // H_q
  std::size_t n_kv_groups = 2;  // H_k
  std::size_t model_dim = 16;   // D
  std::size_t seq_len = 16;     // T
  std::size_t sparsity_const = 5;
  bool sparse_enabled = true;

  std::size_t head_dim() const { return model_dim / n_heads; }
  std::size_t top_u() const { return top_u_count(seq_len, sparsity_const); }
  // U when sparse, T when dense.
  std::size_t effective_queries() const { return sparse_enabled ? top_u() : seq_len; }
  void validate() const;
};

struct AttentionWeights {
  Tensor w_q;  // D x (heads * head_dim)
  Tensor w_k;  // D x (groups * head_dim)
  Tensor w_v;  // D x (groups * head_dim)
  Tensor w_o;  // (heads * head_dim) x D
  std::size_t head_dim = 0;
  std::vector<std::size_t> head_group;  // per retained head: its K/V group slot

  std::size_t n_heads() const { return head_group.size(); }
  std::size_t n_groups() const { return w_k.cols() / head_dim; }
  std::size_t kv_param_count() const { return w_k.numel() + w_v.numel(); }
  std::size_t param_count() const { return w_q.numel() + w_k.numel() + w_v.numel() + w_o.numel(); }

  // Checks block shapes against `model_dim` and the head->group map.
  void validate(std::size_t model_dim) const;

  static AttentionWeights init(const AttentionConfig& cfg, std::mt19937_64& rng);
};

// Optional side channel for inspection and export.
struct AttentionProbe {
  struct Head {
    std::size_t head = 0;
    std::size_t seq_len = 0;
    std::vector<std::size_t> selected;  // attended query rows, in selection order
    std::vector<double> weights;        // T x T row-major; unselected rows are uniform 1/T
  };
  std::vector<Head> heads;
};

// max_j(q_t.k_j / sqrt(d)) - mean_j(q_t.k_j / sqrt(d)) for every query row t.
std::vector<double> sparsity_score(const Tensor& q_head, const Tensor& k_group);

// Indices of the u largest scores, ties to the lower index.
std::vector<std::size_t> top_u_select(std::span<const double> scores, std::size_t u);
std::vector<std::size_t> top_u_select(std::span<const double> scores, const AttentionConfig& cfg);

// Per-head outputs concatenated along columns: T x (heads * head_dim).
// Uses the sparse path iff cfg.sparse_enabled.
Tensor attention_heads(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg,
                       AttentionProbe* probe = nullptr);

Tensor dense_mha(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg);
Tensor sentry_attend(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg,
                     AttentionProbe* probe = nullptr);

// Forward floating-point operation counts, one multiply-add = 2 FLOPs.
//   projections = 2*T*D*(H_q*d) + 2 * 2*T*D*(H_k*d)
//   scores      = H_q * U_eff * T * 2d
//   mix         = H_q * U_eff * T * 2d
//   output      = 2*T*(H_q*d)*D
// `selection` is the exact query-scoring pass of the sparse path
// (H_q * T * T * 2d). It is reported but not part of total().
struct AttentionFlops {
  double projections = 0;
  double scores = 0;
  double mix = 0;
  double output = 0;
  double selection = 0;

  double total() const { return projections + scores + mix + output; }
};

AttentionFlops attention_flops(std::size_t heads, std::size_t groups, std::size_t head_dim,
                               std::size_t model_dim, std::size_t seq_len, std::size_t queries, bool sparse);
AttentionFlops attention_flops(const AttentionConfig& cfg);

inline std::size_t kv_projection_blocks(const AttentionConfig& cfg) { return 2 * cfg.n_kv_groups; }

}  // namespace modprune
