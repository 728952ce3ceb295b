// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "mixspeech/common.hpp"

namespace mixspeech {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// Strict reader over a JSON object: every key must be consumed, unknown keys
// are validation errors. Keeps config snapshots unambiguous.
class JsonReader {
 public:
  JsonReader(const json& j, std::string context) : j_(j), context_(std::move(context)) {
    expect(j_.is_object(), Errc::Validation, context_ + ": expected a JSON object");
  }

  template <typename T>
  T require(const std::string& key) {
    expect(j_.contains(key), Errc::Validation, context_ + ": missing required field '" + key + "'");
    return take<T>(key);
  }

  template <typename T>
  T optional(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    return take<T>(key);
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    expect(j_.contains(key), Errc::Validation, context_ + ": missing required field '" + key + "'");
    seen_.insert(key);
    return j_.at(key);
  }

  // Call after all fields were read.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      expect(seen_.count(it.key()) > 0, Errc::Validation,
             context_ + ": unknown field '" + it.key() + "'");
  }

 private:
  template <typename T>
  T take(const std::string& key) {
    seen_.insert(key);
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(Errc::Validation, context_ + ": field '" + key + "': " + e.what());
    }
  }

  const json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

inline json parse_json_file_content(const std::string& text, const std::string& context) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  expect(!j.is_discarded(), Errc::Validation, context + ": malformed JSON");
  return j;
}

}  // namespace mixspeech
