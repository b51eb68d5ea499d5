#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "tdt/errors.hpp"

namespace tdt::json_util {

using nlohmann::json;

// Throws ConfigError naming the first key of `j` not in `allowed`.
inline void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (auto a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(std::string(context) + ": unknown key \"" + it.key() + "\"");
  }
}

// Reads `key` into `out` when present; leaves the default otherwise.
template <class T>
void read_opt(const json& j, const char* key, T& out, std::string_view context) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(context) + "." + key + ": " + e.what());
  }
}

}  // namespace tdt::json_util
