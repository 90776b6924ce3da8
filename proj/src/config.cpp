#include "modprune/config.hpp"

#include <string>

#include "json_reader.hpp"
#include "modprune/errors.hpp"

namespace modprune {

using nlohmann::json;

using detail::Reader;

json to_json(const BackboneConfig& c) {
  return {{"n_modalities", c.n_modalities}, {"seq_len", c.seq_len},       {"input_dim", c.input_dim},
          {"model_dim", c.model_dim},       {"n_heads", c.n_heads},       {"n_kv_groups", c.n_kv_groups},
          {"encoder_depth", c.encoder_depth}, {"fusion_depth", c.fusion_depth}, {"ffn_dim", c.ffn_dim},
          {"n_experts", c.n_experts},       {"top_k", c.top_k},           {"expert_dim", c.expert_dim},
          {"n_classes", c.n_classes},       {"sparsity_const", c.sparsity_const},
          {"sparse_attention", c.sparse_attention}};
}

BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  Reader r(j, "model");
  r.get("n_modalities", c.n_modalities);
  r.get("seq_len", c.seq_len);
  r.get("input_dim", c.input_dim);
  r.get("model_dim", c.model_dim);
  r.get("n_heads", c.n_heads);
  r.get("n_kv_groups", c.n_kv_groups);
  r.get("encoder_depth", c.encoder_depth);
  r.get("fusion_depth", c.fusion_depth);
  r.get("ffn_dim", c.ffn_dim);
  r.get("n_experts", c.n_experts);
  r.get("top_k", c.top_k);
  r.get("expert_dim", c.expert_dim);
  r.get("n_classes", c.n_classes);
  r.get("sparsity_const", c.sparsity_const);
  r.get("sparse_attention", c.sparse_attention);
  r.finish();
  c.validate();
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"p_max", c.p_max},
          {"alpha", c.alpha},
          {"lambda_bin", c.lambda_bin},
          {"lr_backbone", c.lr_backbone},
          {"lr_gates", c.lr_gates},
          {"momentum", c.momentum},
          {"grad_clip", c.grad_clip},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"ema_decay", c.ema_decay},
          {"target_key", c.target_key == TargetKey::mask ? "mask" : "missing_count"}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  Reader r(j, "train");
  r.get("epochs", c.epochs);
  c.warmup_epochs = c.epochs / 5;
  r.get("warmup_epochs", c.warmup_epochs);
  r.get("p_max", c.p_max);
  r.get("alpha", c.alpha);
  r.get("lambda_bin", c.lambda_bin);
  r.get("lr_backbone", c.lr_backbone);
  r.get("lr_gates", c.lr_gates);
  r.get("momentum", c.momentum);
  r.get("grad_clip", c.grad_clip);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get("ema_decay", c.ema_decay);
  std::string key = "mask";
  r.get("target_key", key);
  if (key == "mask")
    c.target_key = TargetKey::mask;
  else if (key == "missing_count")
    c.target_key = TargetKey::missing_count;
  else
    throw InputError("train.target_key: expected 'mask' or 'missing_count', got '" + key + "'");
  r.finish();
  c.validate();
  return c;
}

json to_json(const SyntheticSpec& s) {
  return {{"n_modalities", s.n_modalities},
          {"seq_len", s.seq_len},
          {"input_dim", s.input_dim},
          {"n_classes", s.n_classes},
          {"signature", s.signature},
          {"noise", s.noise},
          {"amplitude", s.amplitude},
          {"level_scale", s.level_scale},
          {"samples_per_class", s.samples_per_class},
          {"template_seed", s.template_seed},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  SyntheticSpec s;
  Reader r(j, "data");
  r.get("n_modalities", s.n_modalities);
  r.get("seq_len", s.seq_len);
  r.get("input_dim", s.input_dim);
  r.get("n_classes", s.n_classes);
  r.get("noise", s.noise);
  r.get("amplitude", s.amplitude);
  r.get("level_scale", s.level_scale);
  r.get("samples_per_class", s.samples_per_class);
  r.get("template_seed", s.template_seed);
  r.get("seed", s.seed);
  s.signature = SyntheticSpec::default_signature(s.n_classes, s.n_modalities);
  r.get("signature", s.signature);
  r.finish();
  s.validate();
  return s;
}

}  // namespace modprune
