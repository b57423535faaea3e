// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "uwfuse/models.hpp"
#include "uwfuse/text.hpp"

namespace uwfuse {

enum class Objective { CwganGpL1, MseOnly };

inline std::string_view objective_name(Objective o) {
  return o == Objective::CwganGpL1 ? "cwgan_gp_l1" : "mse_only";
}

inline Objective parse_objective(std::string_view s) {
  if (s == "cwgan_gp_l1") return Objective::CwganGpL1;
  if (s == "mse_only") return Objective::MseOnly;
  throw Error("unknown objective '" + std::string(s) + "' (expected cwgan_gp_l1 or mse_only)");
}

struct TrainConfig {
  float lambda_gp = 10.0f;
  float lambda_l1 = 10.0f;
  float lr = 0.0002f;
  float beta1 = 0.5f;
  float beta2 = 0.999f;
  int batch_size = 1;
  int epochs = 50;
  int critic_steps = 1;
  std::uint64_t seed = 0;
  std::int64_t max_steps = 0;  // 0: run all epochs
  ModelConfig model;
  Objective objective = Objective::CwganGpL1;

  void validate() const {
    if (!(lambda_gp >= 0.0f) || !(lambda_l1 >= 0.0f)) throw Error("loss weights must be >= 0");
    if (!(lr > 0.0f)) throw Error("lr must be > 0");
    if (!(beta1 >= 0.0f && beta1 < 1.0f) || !(beta2 >= 0.0f && beta2 < 1.0f))
      throw Error("beta1 and beta2 must lie in [0, 1)");
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (critic_steps < 1) throw Error("critic_steps must be >= 1");
    if (max_steps < 0) throw Error("max_steps must be >= 0");
    uwfuse::validate(model);
  }

  bool operator==(const TrainConfig&) const = default;
};

/// Flat `key = value` form; keys match the CLI flag names in snake_case.
inline std::map<std::string, std::string> to_key_values(const TrainConfig& c) {
  return {
      {"lambda_gp", text::format(c.lambda_gp)},
      {"lambda_l1", text::format(c.lambda_l1)},
      {"lr", text::format(c.lr)},
      {"beta1", text::format(c.beta1)},
      {"beta2", text::format(c.beta2)},
      {"batch_size", std::to_string(c.batch_size)},
      {"epochs", std::to_string(c.epochs)},
      {"critic_steps", std::to_string(c.critic_steps)},
      {"seed", std::to_string(c.seed)},
      {"max_steps", std::to_string(c.max_steps)},
      {"objective", std::string(objective_name(c.objective))},
      {"input_size", std::to_string(c.model.input_size)},
      {"in_channels", std::to_string(c.model.in_channels)},
      {"base_channels", std::to_string(c.model.base_channels)},
      {"max_channels", std::to_string(c.model.max_channels)},
      {"disc_layers", std::to_string(c.model.disc_layers)},
      {"variant", std::string(variant_name(c.model.variant))},
  };
}

inline std::string serialize(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, v] : to_key_values(c)) out += k + " = " + v + "\n";
  return out;
}

/// Applies the recognized keys of `kv`; unknown keys are an error.
inline void apply_key_values(TrainConfig& c, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "lambda_gp") c.lambda_gp = text::parse<float>(v, k);
    else if (k == "lambda_l1") c.lambda_l1 = text::parse<float>(v, k);
    else if (k == "lr") c.lr = text::parse<float>(v, k);
    else if (k == "beta1") c.beta1 = text::parse<float>(v, k);
    else if (k == "beta2") c.beta2 = text::parse<float>(v, k);
    else if (k == "batch_size") c.batch_size = text::parse<int>(v, k);
    else if (k == "epochs") c.epochs = text::parse<int>(v, k);
    else if (k == "critic_steps") c.critic_steps = text::parse<int>(v, k);
    else if (k == "seed") c.seed = text::parse<std::uint64_t>(v, k);
    else if (k == "max_steps") c.max_steps = text::parse<std::int64_t>(v, k);
    else if (k == "objective") c.objective = parse_objective(text::trim(v));
    else if (k == "input_size") c.model.input_size = text::parse<int>(v, k);
    else if (k == "in_channels") c.model.in_channels = text::parse<int>(v, k);
    else if (k == "base_channels") c.model.base_channels = text::parse<int>(v, k);
    else if (k == "max_channels") c.model.max_channels = text::parse<int>(v, k);
    else if (k == "disc_layers") c.model.disc_layers = text::parse<int>(v, k);
    else if (k == "variant") c.model.variant = parse_variant(text::trim(v));
    else throw Error("unknown config key '" + k + "'");
  }
}

inline TrainConfig parse_train_config(std::string_view content) {
  TrainConfig c;
  apply_key_values(c, text::parse_key_values(content));
  c.validate();
  return c;
}

}  // namespace uwfuse
