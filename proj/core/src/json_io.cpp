#include "json_io.hpp"

#include <stdexcept>

namespace worldlm::detail {

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  if (!j.is_object()) throw JsonPathError(where, "expected an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw JsonPathError(where + "/" + key, "unknown key");
  }
}

json to_json(const ScheduleConfig& s) {
  return {{"alpha", s.alpha}, {"peak_lr", s.peak_lr}, {"total_steps", s.total_steps}};
}

json to_json(const TrainerConfig& t) {
  return {{"optimizer", t.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"epsilon", t.epsilon},
          {"local_steps", t.local_steps},
          {"batch_size", t.batch_size},
          {"schedule", to_json(t.schedule)}};
}

json to_json(const ModelConfig& m) {
  return {{"vocab_size", m.vocab_size},           {"embed_dim", m.embed_dim},
          {"num_blocks", m.num_blocks},           {"expansion_ratio", m.expansion_ratio},
          {"key_block_count", m.key_block_count}, {"context_len", m.context_len},
          {"include_head_in_keys", m.include_head_in_keys}};
}

json to_json(const NodeSpec& n) {
  json j{{"id", n.id},
         {"name", n.name},
         {"parent", n.parent ? json(*n.parent) : json(nullptr)},
         {"children", n.children},
         {"dataset_ref", n.dataset_ref},
         {"dp_enabled", n.dp_enabled},
         {"residual_ceiling", n.residual_ceiling},
         {"trains_locally", n.trains_locally},
         {"trainer", to_json(n.trainer)}};
  return j;
}

void from_json(const json& j, ScheduleConfig& out, const std::string& where) {
  reject_unknown_keys(j, {"alpha", "peak_lr", "total_steps"}, where);
  read_opt(j, "alpha", out.alpha, where);
  read_opt(j, "peak_lr", out.peak_lr, where);
  read_opt(j, "total_steps", out.total_steps, where);
}

void from_json(const json& j, TrainerConfig& out, const std::string& where) {
  reject_unknown_keys(j, {"optimizer", "beta1", "beta2", "epsilon", "local_steps", "batch_size", "schedule"},
                      where);
  if (j.contains("optimizer")) {
    std::string name;
    read_opt(j, "optimizer", name, where);
    if (name == "adam") {
      out.optimizer = OptimizerKind::adam;
    } else if (name == "sgd") {
      out.optimizer = OptimizerKind::sgd;
    } else {
      throw JsonPathError(where + "/optimizer", "expected \"adam\" or \"sgd\", got \"" + name + "\"");
    }
  }
  read_opt(j, "beta1", out.beta1, where);
  read_opt(j, "beta2", out.beta2, where);
  read_opt(j, "epsilon", out.epsilon, where);
  read_opt(j, "local_steps", out.local_steps, where);
  read_opt(j, "batch_size", out.batch_size, where);
  if (j.contains("schedule")) from_json(j["schedule"], out.schedule, where + "/schedule");
}

void from_json(const json& j, ModelConfig& out, const std::string& where) {
  reject_unknown_keys(j, {"vocab_size", "embed_dim", "num_blocks", "expansion_ratio", "key_block_count",
                          "context_len", "include_head_in_keys"},
                      where);
  read_opt(j, "vocab_size", out.vocab_size, where);
  read_opt(j, "embed_dim", out.embed_dim, where);
  read_opt(j, "num_blocks", out.num_blocks, where);
  read_opt(j, "expansion_ratio", out.expansion_ratio, where);
  read_opt(j, "key_block_count", out.key_block_count, where);
  read_opt(j, "context_len", out.context_len, where);
  read_opt(j, "include_head_in_keys", out.include_head_in_keys, where);
}

}  // namespace worldlm::detail
