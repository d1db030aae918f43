#include "rforge/json_util.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace rforge {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view context) {
  if (!j.is_object()) throw std::invalid_argument(std::string(context) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw std::invalid_argument(std::string(context) + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace rforge
