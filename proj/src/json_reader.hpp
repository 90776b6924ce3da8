#pragma once

#include <set>
#include <string>
#include <type_traits>

#include "json.hpp"
#include "modprune/errors.hpp"

namespace modprune::detail {

// Reads known keys from an object and rejects the rest.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw InputError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_unsigned() && !(it->is_number_integer() && it->template get<long long>() >= 0))
          throw InputError(where_ + "." + key + ": expected a non-negative integer");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw InputError(where_ + "." + key + ": expected a boolean");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw InputError(where_ + "." + key + ": expected a number");
      }
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw InputError(where_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw InputError(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace modprune::detail
