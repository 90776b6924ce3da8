#include "modprune/gating.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "modprune/errors.hpp"

namespace modprune {

GateTable::GateTable(std::size_t n_modalities, std::vector<GateGroup> groups)
    : n_modalities_(n_modalities), groups_(std::move(groups)) {
  build_block_sums();
}

void GateTable::build_block_sums() {
  block_sums_.clear();
  for (const GateGroup& g : groups_) {
    const std::size_t N = g.n_units, H = g.hidden;
    std::vector<double> m(N * H * N, 0.0);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t h = 0; h < H; ++h) m[(i * H + h) * N + i] = 1.0;
    block_sums_.emplace_back(Shape{N * H, N}, std::move(m));
  }
}

GateTable GateTable::init(const ModelLayout& layout, std::size_t n_modalities, std::uint64_t seed,
                          std::size_t hidden) {
  if (n_modalities == 0) throw InputError("GateTable: no modalities");
  const std::size_t M = n_modalities, H = hidden ? hidden : 2 * M;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> w1d(0.0, 1.0 / std::sqrt(double(M)));
  std::normal_distribution<double> w2d(0.0, 0.1);
  std::vector<GateGroup> groups;
  for (const UnitGroupLayout& ul : layout.groups) {
    const std::size_t N = ul.units;
    GateGroup g;
    g.id = ul.id;
    g.n_units = N;
    g.n_modalities = M;
    g.hidden = H;
    g.zeta = Tensor::zeros({1, N}, true);
    std::vector<double> w1(M * N * H);
    for (double& v : w1) v = w1d(rng);
    g.w1 = Tensor({M, N * H}, std::move(w1), true);
    g.b1 = Tensor::zeros({N * H}, true);
    std::vector<double> w2(N * H);
    for (double& v : w2) v = w2d(rng);
    g.w2 = Tensor({1, N * H}, std::move(w2), true);
    g.b2 = Tensor::zeros({1, N}, true);
    g.gamma = Tensor::scalar(1.0, true);
    groups.push_back(std::move(g));
  }
  return GateTable(M, std::move(groups));
}

std::size_t GateTable::group_index(const UnitGroupId& id) const {
  for (std::size_t i = 0; i < groups_.size(); ++i)
    if (groups_[i].id == id) return i;
  throw InputError("GateTable: no gate group " + id.str());
}

const GateGroup& GateTable::group(const UnitGroupId& id) const { return groups_[group_index(id)]; }

Tensor GateTable::forward(std::size_t index, const ModalityMask& mask) const {
  if (mask.size() != n_modalities_)
    throw InputError("gate_forward: mask length " + std::to_string(mask.size()) + ", gates expect " +
                     std::to_string(n_modalities_));
  const GateGroup& g = groups_.at(index);
  const Tensor m({1, n_modalities_}, mask.as_doubles());
  const Tensor hidden = tanh(add(matmul(m, g.w1), g.b1));
  const Tensor f = add(matmul(mul(hidden, g.w2), block_sums_[index]), g.b2);
  return sigmoid(add(g.zeta, scale_by(f, g.gamma)));
}

std::vector<double> GateTable::gate_forward(const UnitGroupId& id, const ModalityMask& mask) const {
  NoGradGuard ng;
  const Tensor g = forward(group_index(id), mask);
  return {g.values().begin(), g.values().end()};
}

std::map<UnitGroupId, std::vector<double>> GateTable::gate_forward_all(const ModalityMask& mask) const {
  NoGradGuard ng;
  std::map<UnitGroupId, std::vector<double>> out;
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    const Tensor g = forward(i, mask);
    out[groups_[i].id] = {g.values().begin(), g.values().end()};
  }
  return out;
}

std::vector<NamedTensor> GateTable::parameters() const {
  std::vector<NamedTensor> p;
  for (const GateGroup& g : groups_) {
    const std::string pre = "gates." + g.id.str() + ".";
    p.push_back({pre + "zeta", g.zeta});
    p.push_back({pre + "w1", g.w1});
    p.push_back({pre + "b1", g.b1});
    p.push_back({pre + "w2", g.w2});
    p.push_back({pre + "b2", g.b2});
    p.push_back({pre + "gamma", g.gamma});
  }
  return p;
}

std::size_t GateTable::param_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

GateTable GateTable::clone() const {
  std::vector<GateGroup> gs;
  for (const GateGroup& g : groups_) {
    GateGroup c = g;
    c.zeta = g.zeta.clone();
    c.w1 = g.w1.clone();
    c.b1 = g.b1.clone();
    c.w2 = g.w2.clone();
    c.b2 = g.b2.clone();
    c.gamma = g.gamma.clone();
    gs.push_back(std::move(c));
  }
  return GateTable(n_modalities_, std::move(gs));
}

// ---- saliency ---------------------------------------------------------------------

std::vector<double> normalize_saliency(std::span<const double> raw) {
  if (raw.empty()) return {};
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  std::vector<double> out(raw.size());
  if (!(*hi > *lo)) {
    std::fill(out.begin(), out.end(), 0.5);
    return out;
  }
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - *lo) / span;
  return out;
}

void SaliencyAccumulator::add(const TapRecord& tap) {
  const Tensor& x = tap.activation;
  const Tensor& g = tap.activation_grad;
  if (!x.defined() || !g.defined()) throw ContractError("saliency: tap without activation gradient");
  if (x.shape() != g.shape()) throw ShapeError("saliency: activation/gradient shapes differ");
  const std::size_t R = x.rows(), C = x.cols(), W = tap.unit_width, N = C / W;
  Acc& acc = sums_[tap.tap_id];
  if (acc.sum.empty()) acc.sum.assign(N, 0.0);
  if (acc.sum.size() != N) throw ShapeError("saliency: unit count changed for " + tap.tap_id.str());
  const auto xv = x.values(), gv = g.values();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) acc.sum[c / W] += std::fabs(xv[r * C + c] * gv[r * C + c]);
  acc.rows += static_cast<double>(R);
}

void SaliencyAccumulator::add(std::span<const TapRecord> taps) {
  for (const TapRecord& t : taps) add(t);
}

void SaliencyAccumulator::expect(const UnitGroupId& id, std::size_t n_units) {
  Acc& acc = sums_[id];
  if (acc.sum.empty()) acc.sum.assign(n_units, 0.0);
}

std::map<UnitGroupId, SaliencyTarget> SaliencyAccumulator::targets() const {
  std::map<UnitGroupId, SaliencyTarget> out;
  for (const auto& [id, acc] : sums_) {
    SaliencyTarget t;
    t.id = id;
    t.raw = acc.sum;
    if (acc.rows > 0)
      for (double& v : t.raw) v /= acc.rows;
    t.normalized = normalize_saliency(t.raw);
    out.emplace(id, std::move(t));
  }
  return out;
}

SaliencyTarget saliency_from_taps(std::span<const TapRecord> taps) {
  if (taps.empty()) throw ContractError("saliency_from_taps: no taps");
  for (const TapRecord& t : taps)
    if (t.tap_id != taps.front().tap_id) throw ContractError("saliency_from_taps: taps span several unit groups");
  SaliencyAccumulator acc;
  acc.add(taps);
  return acc.targets().begin()->second;
}

double alignment_loss(std::span<const double> g, std::span<const double> target) {
  if (g.size() != target.size() || g.empty())
    throw ShapeError("alignment_loss: " + std::to_string(g.size()) + " gates vs " + std::to_string(target.size()) +
                     " targets");
  double s = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) s += (g[i] - target[i]) * (g[i] - target[i]);
  return s / static_cast<double>(g.size());
}

double binarization_loss(std::span<const double> g) {
  if (g.empty()) return 0.0;
  double s = 0.0;
  for (double v : g) s += v * (1.0 - v);
  return s / static_cast<double>(g.size());
}

Tensor alignment_loss(const Tensor& g, const Tensor& target) {
  if (g.numel() != target.numel()) throw ShapeError("alignment_loss: length mismatch");
  return mse(g, target.shape() == g.shape() ? target : reshape(target, g.shape()));
}

Tensor binarization_loss(const Tensor& g) {
  return mean_all(mul(g, sub(Tensor::ones(g.shape()), g)));
}

}  // namespace modprune
