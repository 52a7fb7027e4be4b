#pragma once

// JSON conversions for configuration types. Private to the core library.

#include <stdexcept>
#include <string>

#include "json.hpp"
#include "worldlm/model.hpp"
#include "worldlm/topology.hpp"

namespace worldlm::detail {

using nlohmann::json;

/// Error tied to a JSON pointer inside the document being read.
class JsonPathError : public std::invalid_argument {
 public:
  JsonPathError(std::string pointer, const std::string& message)
      : std::invalid_argument(pointer + ": " + message), pointer_(std::move(pointer)), detail_(message) {}
  const std::string& pointer() const { return pointer_; }
  const std::string& detail() const { return detail_; }

 private:
  std::string pointer_;
  std::string detail_;
};

json to_json(const ScheduleConfig& s);
json to_json(const TrainerConfig& t);
json to_json(const ModelConfig& m);
json to_json(const NodeSpec& n);

/// Strict readers: unknown keys raise std::invalid_argument naming the key.
/// Missing keys keep the value already in `out`.
void from_json(const json& j, ScheduleConfig& out, const std::string& where);
void from_json(const json& j, TrainerConfig& out, const std::string& where);
void from_json(const json& j, ModelConfig& out, const std::string& where);

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where);

template <typename T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw JsonPathError(where + "/" + key, e.what());
  }
}

}  // namespace worldlm::detail
