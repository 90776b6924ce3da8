#pragma once

// Plain-loop reference implementations used as test oracles. Nothing here
// touches the autodiff tape.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "modprune/attention.hpp"
#include "modprune/backbone.hpp"

namespace oracle {

using modprune::AttentionWeights;
using modprune::Tensor;

// Multiply-adds per stage of the attention forward pass.
struct MacCounter {
  double projections = 0, selection = 0, scores = 0, mix = 0, output = 0;
};

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

inline Mat mat_mul(const Mat& a, const Mat& b, double* macs) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) {
        out[i][j] += a[i][k] * b[k][j];
        if (macs) *macs += 1;
      }
  return out;
}

// T x D output of (sparse or dense) grouped-query attention, including W_O.
inline Mat attention(const Tensor& x, const AttentionWeights& w, bool sparse, std::size_t sparsity_const,
                     MacCounter* count = nullptr) {
  const Mat X = to_mat(x);
  const std::size_t T = X.size(), d = w.head_dim, H = w.n_heads();
  const Mat Q = mat_mul(X, to_mat(w.w_q), count ? &count->projections : nullptr);
  const Mat K = mat_mul(X, to_mat(w.w_k), count ? &count->projections : nullptr);
  const Mat V = mat_mul(X, to_mat(w.w_v), count ? &count->projections : nullptr);
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  const std::size_t U =
      sparse ? std::clamp<std::size_t>(sparsity_const * static_cast<std::size_t>(std::ceil(std::log(double(T)))),
                                       1, T)
             : T;

  Mat heads(T, std::vector<double>(H * d, 0.0));
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t g = w.head_group[h];
    auto dot = [&](std::size_t t, std::size_t j, double* macs) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) {
        s += Q[t][h * d + k] * K[j][g * d + k];
        if (macs) *macs += 1;
      }
      return s * inv;
    };
    std::vector<std::size_t> rows(T);
    std::iota(rows.begin(), rows.end(), 0);
    if (sparse) {
      std::vector<double> score(T);
      for (std::size_t t = 0; t < T; ++t) {
        double mx = -INFINITY, sum = 0;
        for (std::size_t j = 0; j < T; ++j) {
          const double s = dot(t, j, count ? &count->selection : nullptr);
          mx = std::max(mx, s);
          sum += s;
        }
        score[t] = mx - sum / static_cast<double>(T);
      }
      std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
      rows.resize(U);
      // context fill: column mean of the group's values
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < d; ++k) {
          double m = 0;
          for (std::size_t j = 0; j < T; ++j) m += V[j][g * d + k];
          heads[t][h * d + k] = m / static_cast<double>(T);
        }
    }
    for (std::size_t t : rows) {
      std::vector<double> p(T);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < T; ++j) mx = std::max(mx, p[j] = dot(t, j, count ? &count->scores : nullptr));
      double z = 0;
      for (double& v : p) z += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < d; ++k) {
        double acc = 0;
        for (std::size_t j = 0; j < T; ++j) {
          acc += p[j] / z * V[j][g * d + k];
          if (count) count->mix += 1;
        }
        heads[t][h * d + k] = acc;
      }
    }
  }
  return mat_mul(heads, to_mat(w.w_o), count ? &count->output : nullptr);
}

inline double max_abs_diff(const Mat& a, const Tensor& b) {
  double m = 0;
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < a[r].size(); ++c) m = std::max(m, std::fabs(a[r][c] - b.at(r, c)));
  return m;
}

inline Tensor random_input(std::mt19937_64& rng, std::size_t T, std::size_t D) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(T * D);
  for (double& x : v) x = n(rng);
  return Tensor({T, D}, std::move(v));
}

// ---- full backbone forward in plain loops ----------------------------------------

inline Mat layer_norm_rows(const Mat& x) {
  Mat y = x;
  for (auto& row : y) {
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= double(row.size());
    for (double v : row) var += (v - mu) * (v - mu);
    var /= double(row.size());
    for (double& v : row) v = (v - mu) / std::sqrt(var + 1e-5);
  }
  return y;
}

inline Mat ffn(const Mat& x, const modprune::FeedForward& f) {
  const Mat W1 = to_mat(f.w1), W2 = to_mat(f.w2);
  Mat h = mat_mul(x, W1, nullptr);
  for (auto& row : h)
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double v = row[c] + f.b1.at(c);
      row[c] = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    }
  Mat y = mat_mul(h, W2, nullptr);
  for (auto& row : y)
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += f.b2.at(c);
  return y;
}

// Every token runs through every expert; only the top-k router logits (ties to
// the lower expert index) get nonzero softmax weight.
inline Mat moe(const Mat& x, const modprune::MoeFeedForward& m) {
  const std::size_t E = m.experts.size();
  const Mat logits = mat_mul(x, to_mat(m.router), nullptr);
  std::vector<Mat> outs;
  for (const auto& e : m.experts) outs.push_back(ffn(x, e));
  Mat y(x.size(), std::vector<double>(x[0].size(), 0.0));
  for (std::size_t t = 0; t < x.size(); ++t) {
    std::vector<bool> chosen(E, false);
    for (std::size_t k = 0; k < m.top_k; ++k) {
      std::size_t best = E;
      for (std::size_t e = 0; e < E; ++e)
        if (!chosen[e] && (best == E || logits[t][e] > logits[t][best])) best = e;
      chosen[best] = true;
    }
    double mx = -INFINITY, z = 0;
    for (std::size_t e = 0; e < E; ++e)
      if (chosen[e]) mx = std::max(mx, logits[t][e]);
    for (std::size_t e = 0; e < E; ++e)
      if (chosen[e]) z += std::exp(logits[t][e] - mx);
    for (std::size_t e = 0; e < E; ++e)
      if (chosen[e])
        for (std::size_t c = 0; c < y[t].size(); ++c) y[t][c] += std::exp(logits[t][e] - mx) / z * outs[e][t][c];
  }
  return y;
}

inline void add_into(Mat& a, const Mat& b) {
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < a[r].size(); ++c) a[r][c] += b[r][c];
}

inline Tensor from_mat(const Mat& m) {
  std::vector<double> v;
  for (const auto& row : m) v.insert(v.end(), row.begin(), row.end());
  return Tensor({m.size(), m[0].size()}, std::move(v));
}

inline std::vector<double> forward(const modprune::Backbone& b, const modprune::Sample& s,
                                   const modprune::ModalityMask& mask) {
  const auto& cfg = b.config();
  const std::size_t T = cfg.seq_len, D = cfg.model_dim;
  Mat all;
  for (std::size_t j = 0; j < cfg.n_modalities; ++j) {
    const auto& enc = b.encoders()[j];
    Mat h(T, std::vector<double>(D));
    if (!mask.present(j)) {
      for (auto& row : h)
        for (std::size_t c = 0; c < D; ++c) row[c] = enc.missing_token.at(c);
    } else {
      h = mat_mul(to_mat(s.streams[j]), to_mat(enc.embed_w), nullptr);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < D; ++c) h[t][c] += enc.embed_b.at(c) + enc.pos.at(t, c);
      for (const auto& layer : enc.layers) {
        add_into(h, attention(from_mat(layer_norm_rows(h)), layer.attn, cfg.sparse_attention, cfg.sparsity_const));
        add_into(h, ffn(layer_norm_rows(h), layer.ffn));
      }
    }
    all.insert(all.end(), h.begin(), h.end());
  }
  for (const auto& f : b.fusion()) {
    add_into(all, attention(from_mat(layer_norm_rows(all)), f.attn, cfg.sparse_attention, cfg.sparsity_const));
    add_into(all, moe(layer_norm_rows(all), f.moe));
  }
  const Mat n = layer_norm_rows(all);
  std::vector<double> logits(cfg.n_classes);
  for (std::size_t k = 0; k < cfg.n_classes; ++k) {
    double acc = b.head_b().at(k);
    for (std::size_t c = 0; c < D; ++c) {
      double pooled = 0;
      for (const auto& row : n) pooled += row[c];
      acc += pooled / double(n.size()) * b.head_w().at(c, k);
    }
    logits[k] = acc;
  }
  return logits;
}

inline modprune::Sample random_sample(std::mt19937_64& rng, const modprune::BackboneConfig& cfg, std::size_t label = 0) {
  modprune::Sample s;
  for (std::size_t j = 0; j < cfg.n_modalities; ++j) s.streams.push_back(random_input(rng, cfg.seq_len, cfg.input_dim));
  s.label = label;
  return s;
}

}  // namespace oracle
