#pragma once

// JSON round-trip for every configuration struct. Parsing is strict: unknown
// keys and wrong types raise InputError naming the offending key. Missing
// keys keep their defaults.

#include "json.hpp"
#include "modprune/backbone.hpp"
#include "modprune/data.hpp"
#include "modprune/trainer.hpp"

namespace modprune {

nlohmann::json to_json(const BackboneConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const SyntheticSpec& s);

BackboneConfig backbone_config_from_json(const nlohmann::json& j);
// warmup_epochs defaults to 20% of epochs when absent.
TrainConfig train_config_from_json(const nlohmann::json& j);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

}  // namespace modprune
