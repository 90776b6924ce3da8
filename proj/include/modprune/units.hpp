#pragma once

#include <compare>
#include <cstddef>
#include <string>
#include <string_view>

namespace modprune {

// Kind of prunable structural unit.
enum class Site { attention_head, ffn_channel, expert_channel };

std::string_view site_name(Site s);
Site site_from_name(std::string_view name);

// Identifies one group of sibling units: the heads of an attention layer, the
// hidden channels of an FFN, or the hidden channels of one MoE expert.
// `layer` is the global attention/FFN layer index (encoder layers of
// modality 0, then modality 1, ..., then fusion layers). `expert` is 0
// unless site == expert_channel.
struct UnitGroupId {
  Site site = Site::attention_head;
  std::size_t layer = 0;
  std::size_t expert = 0;

  auto operator<=>(const UnitGroupId&) const = default;
  std::string str() const;
};

}  // namespace modprune
