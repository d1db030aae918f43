#pragma once

#include <initializer_list>
#include <string_view>

#include <json.hpp>

namespace rforge {

// Throws std::invalid_argument naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view context);

}  // namespace rforge
