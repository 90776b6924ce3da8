#include <bit>
#include "modprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "modprune/errors.hpp"

namespace modprune {

std::vector<std::vector<std::uint8_t>> SyntheticSpec::default_signature(std::size_t n_classes,
                                                                         std::size_t n_modalities) {
  if (n_classes == 4 && n_modalities == 6)
    return {{1, 1, 0, 0, 0, 0},   // class 0: modalities 0,1
            {0, 1, 1, 1, 0, 0},   // class 1: modalities 1,2,3
            {0, 0, 0, 1, 1, 0},   // class 2: modalities 3,4
            {0, 0, 0, 0, 0, 1}};  // class 3: only modality 5
  // Class c is carried by modality c mod M, plus the next one when there is room.
  std::vector<std::vector<std::uint8_t>> sig(n_classes, std::vector<std::uint8_t>(n_modalities, 0));
  for (std::size_t c = 0; c < n_classes; ++c) {
    sig[c][c % n_modalities] = 1;
    if (n_modalities > 2 && c + 1 < n_classes) sig[c][(c + 1) % n_modalities] = 1;
  }
  return sig;
}

void SyntheticSpec::validate() const {
  if (!n_modalities || !seq_len || !input_dim || n_classes < 2 || !samples_per_class)
    throw InputError("SyntheticSpec: sizes must be positive and n_classes >= 2");
  if (noise < 0) throw InputError("SyntheticSpec: negative noise");
  if (signature.size() != n_classes) throw InputError("SyntheticSpec: signature needs one row per class");
  bool some_exclusive = false;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (signature[c].size() != n_modalities) throw InputError("SyntheticSpec: signature row length != n_modalities");
    const auto carriers = std::count(signature[c].begin(), signature[c].end(), 1);
    if (carriers == 0) throw InputError("SyntheticSpec: class " + std::to_string(c) + " is carried by no modality");
    if (carriers == 1) some_exclusive = true;
  }
  if (!some_exclusive) throw InputError("SyntheticSpec: no class depends on a single specific modality");
}

namespace {

Template make_template(std::mt19937_64& rng, const SyntheticSpec& spec, double freq) {
  std::normal_distribution<double> lvl(0.0, spec.level_scale);
  std::uniform_real_distribution<double> ph(0.0, 2.0 * std::numbers::pi);
  Template t;
  t.level.resize(spec.input_dim);
  for (double& v : t.level) v = lvl(rng);
  t.wave.resize(spec.seq_len * spec.input_dim);
  const double phase = ph(rng);
  for (std::size_t ch = 0; ch < spec.input_dim; ++ch) {
    const double chan_phase = phase + 0.5 * static_cast<double>(ch);
    for (std::size_t s = 0; s < spec.seq_len; ++s)
      t.wave[s * spec.input_dim + ch] =
          spec.amplitude * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(s) /
                                        static_cast<double>(spec.seq_len) +
                                    chan_phase);
  }
  return t;
}

std::vector<std::vector<Template>> build_templates(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.template_seed);
  std::vector<std::vector<Template>> out(spec.n_classes, std::vector<Template>(spec.n_modalities));
  for (std::size_t j = 0; j < spec.n_modalities; ++j) {
    // Distinct frequencies within one modality keep its templates apart.
    std::vector<double> freqs(spec.n_classes + 1);
    std::iota(freqs.begin(), freqs.end(), 1.0);
    std::shuffle(freqs.begin(), freqs.end(), rng);
    const Template neutral = make_template(rng, spec, freqs[0]);
    for (std::size_t c = 0; c < spec.n_classes; ++c)
      out[c][j] = spec.signature[c][j] ? make_template(rng, spec, freqs[c + 1]) : neutral;
  }
  return out;
}

Dataset generate_with_seed(const SyntheticSpec& spec, std::uint64_t noise_seed) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  d.templates = build_templates(spec);
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution flip(0.5);
  const std::size_t T = spec.seq_len, F = spec.input_dim;
  // Interleave classes so any prefix is roughly balanced.
  for (std::size_t i = 0; i < spec.samples_per_class; ++i)
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      Sample s;
      s.label = c;
      for (std::size_t j = 0; j < spec.n_modalities; ++j) {
        const Template& tp = d.templates[c][j];
        const double sign = flip(rng) ? -1.0 : 1.0;
        std::vector<double> v(T * F);
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t ch = 0; ch < F; ++ch)
            v[t * F + ch] = tp.level[ch] + sign * tp.wave[t * F + ch] + spec.noise * noise(rng);
        s.streams.emplace_back(Shape{T, F}, std::move(v));
      }
      d.samples.push_back(std::move(s));
    }
  return d;
}

}  // namespace

Dataset generate(const SyntheticSpec& spec) { return generate_with_seed(spec, spec.seed); }

Dataset generate_test_split(const SyntheticSpec& spec) {
  return generate_with_seed(spec, derive_seed(spec.seed, {0x7e57}));
}

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> coords) {
  // splitmix64 chain
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base);
  for (std::uint64_t c : coords) h = mix(std::rotl(h, 17) ^ mix(c ^ 0xd6e8feb86659fd93ULL));
  return h;
}

ModalityMask sample_missing_mask(std::size_t n_modalities, std::size_t k, std::mt19937_64& rng) {
  if (k >= n_modalities) throw InputError("cannot drop " + std::to_string(k) + " of " + std::to_string(n_modalities) +
                                          " modalities: at least one must remain");
  std::vector<std::size_t> idx(n_modalities);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::uint8_t> bits(n_modalities, 1);
  // partial Fisher-Yates with explicit uniform draws for reproducibility
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_modalities - 1);
    std::swap(idx[i], idx[pick(rng)]);
    bits[idx[i]] = 0;
  }
  return ModalityMask(std::move(bits));
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

EvalResult evaluate(const Backbone& model, const Dataset& data, std::size_t k, std::span<const std::uint64_t> seeds) {
  const std::size_t M = model.config().n_modalities;
  if (k >= M) throw InputError("evaluate: k=" + std::to_string(k) + " must be below the modality count " + std::to_string(M));
  if (seeds.empty()) throw InputError("evaluate: no seeds");
  if (data.samples.empty()) throw InputError("evaluate: empty dataset");
  NoGradGuard ng;
  EvalResult r;
  for (std::uint64_t seed : seeds) {
    std::mt19937_64 rng(seed);
    std::size_t correct = 0;
    for (const Sample& s : data.samples) {
      const ModalityMask mask = sample_missing_mask(M, k, rng);
      const Tensor logits = model.forward(s, mask);
      correct += argmax(logits.values()) == s.label;
    }
    r.per_seed.push_back(static_cast<double>(correct) / static_cast<double>(data.samples.size()));
  }
  r.mean = std::accumulate(r.per_seed.begin(), r.per_seed.end(), 0.0) / static_cast<double>(r.per_seed.size());
  double var = 0.0;
  for (double a : r.per_seed) var += (a - r.mean) * (a - r.mean);
  r.stddev = std::sqrt(var / static_cast<double>(r.per_seed.size()));
  return r;
}

double evaluate_fixed(const Backbone& model, const Dataset& data, const ModalityMask& mask) {
  if (mask.size() > 0 && mask.n_missing() == mask.size()) throw InputError("cannot evaluate with every modality missing");
  NoGradGuard ng;
  std::size_t correct = 0;
  for (const Sample& s : data.samples) correct += argmax(model.forward(s, mask).values()) == s.label;
  return static_cast<double>(correct) / static_cast<double>(data.samples.size());
}

}  // namespace modprune
