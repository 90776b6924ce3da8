#include "modprune/taps.hpp"

#include "modprune/errors.hpp"

namespace modprune {

std::string_view site_name(Site s) {
  switch (s) {
    case Site::attention_head: return "attention_head";
    case Site::ffn_channel: return "ffn_channel";
    case Site::expert_channel: return "expert_channel";
  }
  return "?";
}

Site site_from_name(std::string_view name) {
  if (name == "attention_head") return Site::attention_head;
  if (name == "ffn_channel") return Site::ffn_channel;
  if (name == "expert_channel") return Site::expert_channel;
  throw InputError("unknown unit site '" + std::string(name) + "'");
}

std::string UnitGroupId::str() const {
  std::string s = std::string(site_name(site)) + "/" + std::to_string(layer);
  if (site == Site::expert_channel) s += "/" + std::to_string(expert);
  return s;
}

void TapSet::register_tap(const Tensor& node, UnitGroupId id, std::size_t unit_width) {
  if (!node.defined()) throw ContractError("register_tap: undefined node");
  if (unit_width == 0 || node.ndim() != 2 || node.cols() % unit_width != 0)
    throw ShapeError("register_tap: " + shape_str(node.shape()) + " does not split into units of width " +
                     std::to_string(unit_width));
  entries_.push_back({node, id, unit_width});
}

std::vector<TapRecord> TapSet::collect_taps() const {
  std::vector<TapRecord> out;
  out.reserve(entries_.size());
  for (const Entry& e : entries_) {
    if (!e.node.has_grad())
      throw ContractError("collect_taps: tap " + e.id.str() + " has no gradient; run backward first");
    out.push_back({e.id, e.node.detach(), Tensor(e.node.shape(), {e.node.grad().begin(), e.node.grad().end()}),
                   e.unit_width});
  }
  return out;
}

}  // namespace modprune
