#pragma once

// Activation taps: remember selected graph nodes during a forward pass so
// that after backward() both the activation x and dL/dx can be read back.

#include <vector>

#include "modprune/tensor.hpp"
#include "modprune/units.hpp"

namespace modprune {

struct TapRecord {
  UnitGroupId tap_id;
  Tensor activation;       // rows x (units * unit_width), detached snapshot
  Tensor activation_grad;  // same shape
  std::size_t unit_width = 1;  // columns owned by each unit (head_dim for heads)
};

class TapSet {
 public:
  // `node` must belong to the graph that backward() will be called on.
  void register_tap(const Tensor& node, UnitGroupId id, std::size_t unit_width = 1);

  // Snapshots every tap. Throws ContractError if a tap has no gradient yet.
  std::vector<TapRecord> collect_taps() const;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    Tensor node;
    UnitGroupId id;
    std::size_t unit_width;
  };
  std::vector<Entry> entries_;
};

}  // namespace modprune
