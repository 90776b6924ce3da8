#pragma once

// Synthetic multimodal classification data and the missing-modality
// evaluation protocol.
//
// Each (class, modality) pair either carries a class-specific template or the
// modality's shared neutral template. A template is a per-channel level plus
// a sinusoid whose sign is flipped at random per sample and modality, so
// class means only keep the levels while the waveform stays decodable.

#include <cstdint>
#include <span>
#include <vector>

#include "modprune/backbone.hpp"

namespace modprune {

struct SyntheticSpec {
  std::size_t n_modalities = 6;
  std::size_t seq_len = 16;
  std::size_t input_dim = 2;
  std::size_t n_classes = 4;
  // signature[c][j] != 0: modality j carries class c's own template.
  std::vector<std::vector<std::uint8_t>> signature = default_signature(4, 6);
  double noise = 0.5;
  double amplitude = 1.0;
  double level_scale = 0.1;
  std::size_t samples_per_class = 100;
  std::uint64_t template_seed = 7;
  std::uint64_t seed = 1;

  // Default layout for 6 modalities / 4 classes; generic fallback otherwise.
  static std::vector<std::vector<std::uint8_t>> default_signature(std::size_t n_classes, std::size_t n_modalities);
  void validate() const;
};

struct Template {
  std::vector<double> level;  // input_dim
  std::vector<double> wave;   // T x input_dim, sign-free waveform
};

struct Dataset {
  SyntheticSpec spec;
  std::vector<Sample> samples;
  // templates[c][j]
  std::vector<std::vector<Template>> templates;

  std::size_t size() const { return samples.size(); }
};

Dataset generate(const SyntheticSpec& spec);

// Train split uses spec.seed; test split draws fresh noise from a derived seed
// over the same templates.
Dataset generate_test_split(const SyntheticSpec& spec);

// Stable 64-bit mixing for per-cell seeds.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> coords);

// k distinct modalities dropped uniformly at random.
ModalityMask sample_missing_mask(std::size_t n_modalities, std::size_t k, std::mt19937_64& rng);

struct EvalResult {
  double mean = 0;
  double stddev = 0;  // population std over seeds
  std::vector<double> per_seed;
};

// For each seed: every sample gets its own k-missing mask drawn from
// mt19937_64(seed); accuracy is averaged over samples, then over seeds.
EvalResult evaluate(const Backbone& model, const Dataset& data, std::size_t k, std::span<const std::uint64_t> seeds);

// Accuracy with one fixed mask for every sample. The mask must keep at least
// one modality.
double evaluate_fixed(const Backbone& model, const Dataset& data, const ModalityMask& mask);

std::size_t argmax(std::span<const double> v);

}  // namespace modprune
