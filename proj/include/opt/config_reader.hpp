#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "opt/error.hpp"

namespace opt::config {

// Reads known keys from a JSON object and rejects everything else.
class KeyReader {
 public:
  KeyReader(const nlohmann::json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ValidationError(context_ + ": expected an object");
  }

  template <class T>
  bool get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return false;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(context_ + "." + key + ": " + e.what());
    }
    return true;
  }

  const nlohmann::json* sub(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ValidationError(context_ + ": unknown key '" + key + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

}  // namespace opt::config
