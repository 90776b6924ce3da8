#pragma once

// Reference multimodal time-series classifier.
//
//   per modality j:  x_j (T x d_in) -> linear embed + positional table -> encoder stack
//                    (or the learned missing token broadcast over T when m_j == 0)
//   fusion:          concat streams along time -> (M*T) x D -> fusion stack (attention + MoE FFN)
//   head:            layer norm -> mean over tokens -> linear -> n_classes logits
//
// Encoder and fusion layers are pre-norm residual blocks. Attention layers
// use sentry_attend when sparse attention is enabled, dense heads otherwise.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "modprune/attention.hpp"
#include "modprune/taps.hpp"
#include "modprune/tensor.hpp"
#include "modprune/units.hpp"

namespace modprune {

struct BackboneConfig {
  std::size_t n_modalities = 6;
  std::size_t seq_len = 16;
  std::size_t input_dim = 2;
  std::size_t model_dim = 16;
  std::size_t n_heads = 4;
  std::size_t n_kv_groups = 2;
  std::size_t encoder_depth = 1;
  std::size_t fusion_depth = 1;
  std::size_t ffn_dim = 24;
  std::size_t n_experts = 3;
  std::size_t top_k = 2;
  std::size_t expert_dim = 16;
  std::size_t n_classes = 4;
  std::size_t sparsity_const = 5;
  bool sparse_attention = true;

  AttentionConfig encoder_attention() const;
  AttentionConfig fusion_attention() const;
  std::size_t n_layers() const { return n_modalities * encoder_depth + fusion_depth; }
  void validate() const;
};

class ModalityMask {
 public:
  ModalityMask() = default;
  explicit ModalityMask(std::vector<std::uint8_t> bits);
  static ModalityMask all_present(std::size_t m);
  // "101101": character j is modality j.
  static ModalityMask parse(std::string_view s);

  std::size_t size() const { return bits_.size(); }
  bool present(std::size_t j) const { return bits_.at(j) != 0; }
  std::size_t n_present() const;
  std::size_t n_missing() const { return size() - n_present(); }
  const std::vector<std::uint8_t>& bits() const { return bits_; }
  std::vector<double> as_doubles() const;
  std::string str() const;

  auto operator<=>(const ModalityMask&) const = default;

 private:
  std::vector<std::uint8_t> bits_;
};

// Every mask of length m with exactly k zeros, in lexicographic order of the
// missing index sets.
std::vector<ModalityMask> masks_with_missing(std::size_t m, std::size_t k);

struct Sample {
  std::vector<Tensor> streams;  // one T x d_in tensor per modality
  std::size_t label = 0;
};

struct FeedForward {
  Tensor w1;  // D x F
  Tensor b1;  // F
  Tensor w2;  // F x D
  Tensor b2;  // D
  std::size_t width() const { return w1.cols(); }
};

struct MoeFeedForward {
  Tensor router;  // D x E
  std::vector<FeedForward> experts;
  std::size_t top_k = 1;
};

struct EncoderLayer {
  AttentionWeights attn;
  FeedForward ffn;
};

struct FusionLayer {
  AttentionWeights attn;
  MoeFeedForward moe;
};

struct ModalityEncoder {
  Tensor embed_w;        // d_in x D
  Tensor embed_b;        // D
  Tensor pos;            // T x D
  Tensor missing_token;  // D
  std::vector<EncoderLayer> layers;
};

// Hard 0/1 multipliers on unit activations, keyed by unit group. Used to
// emulate pruning without reshaping any weight.
using UnitMask = std::map<UnitGroupId, std::vector<double>>;

struct ForwardContext {
  TapSet* taps = nullptr;
  const UnitMask* unit_mask = nullptr;
  // One probe per attention layer, indexed by global layer; resized on demand.
  std::vector<AttentionProbe>* probes = nullptr;
};

// One group of sibling prunable units in canonical order.
struct UnitGroupLayout {
  UnitGroupId id;
  std::size_t units = 0;
};

struct AttentionLayout {
  std::size_t layer = 0;
  std::size_t n_groups = 0;
  std::vector<std::size_t> head_group;
};

struct ModelLayout {
  std::vector<UnitGroupLayout> groups;     // layer by layer: heads, then ffn or experts
  std::vector<AttentionLayout> attention;  // indexed by global layer
  std::size_t total_units() const;
};

struct NamedTensor {
  std::string path;
  Tensor tensor;
};

// Parameters are Tensor handles: copying a Backbone shares its parameters.
// Use clone() for an independent copy.
class Backbone {
 public:
  Backbone() = default;
  static Backbone init(const BackboneConfig& cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }

  // Logits, shape 1 x n_classes.
  Tensor forward(std::span<const Tensor> streams, const ModalityMask& mask, ForwardContext* ctx = nullptr) const;
  Tensor forward(const Sample& s, const ModalityMask& mask, ForwardContext* ctx = nullptr) const {
    return forward(s.streams, mask, ctx);
  }

  // T x D stream for modality j.
  Tensor encode_modality(std::size_t j, const Tensor& x, bool present, ForwardContext* ctx = nullptr) const;
  // Linear embedding plus positional table, before any encoder layer.
  Tensor embed_modality(std::size_t j, const Tensor& x) const;
  Tensor fuse_and_classify(std::span<const Tensor> streams, ForwardContext* ctx = nullptr) const;

  ModelLayout layout() const;
  std::vector<NamedTensor> parameters() const;
  std::size_t param_count() const;
  Backbone clone() const;

  // Raw access for surgery and scorers.
  std::vector<ModalityEncoder>& encoders() { return encoders_; }
  const std::vector<ModalityEncoder>& encoders() const { return encoders_; }
  std::vector<FusionLayer>& fusion() { return fusion_; }
  const std::vector<FusionLayer>& fusion() const { return fusion_; }
  Tensor& head_w() { return head_w_; }
  const Tensor& head_w() const { return head_w_; }
  Tensor& head_b() { return head_b_; }
  const Tensor& head_b() const { return head_b_; }

  // Global layer index of encoder layer `depth` of modality j, or of fusion layer f.
  std::size_t encoder_layer_index(std::size_t j, std::size_t depth) const { return j * cfg_.encoder_depth + depth; }
  std::size_t fusion_layer_index(std::size_t f) const { return cfg_.n_modalities * cfg_.encoder_depth + f; }

  // Assemble from parts (checkpoint loading, surgery).
  Backbone(BackboneConfig cfg, std::vector<ModalityEncoder> enc, std::vector<FusionLayer> fusion, Tensor head_w,
           Tensor head_b);

 private:
  BackboneConfig cfg_;
  std::vector<ModalityEncoder> encoders_;
  std::vector<FusionLayer> fusion_;
  Tensor head_w_;  // D x C
  Tensor head_b_;  // C
};

// Token-wise top-k mixture of expert FFNs; `layer` labels taps and unit masks.
Tensor moe_ffn(const Tensor& h, const MoeFeedForward& moe, std::size_t layer = 0, ForwardContext* ctx = nullptr);

// gelu(x W1 + b1) W2 + b2 with the hidden activation exposed to hooks as `id`.
Tensor feed_forward(const Tensor& x, const FeedForward& ffn, UnitGroupId id, ForwardContext* ctx = nullptr);

}  // namespace modprune
