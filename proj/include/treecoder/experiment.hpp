#pragma once

// Flat JSON experiment files: model shape, optimizer settings and data paths
// side by side. Unknown keys are rejected.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "treecoder/errors.hpp"
#include "treecoder/trainer.hpp"
#include "treecoder/tree.hpp"

namespace treecoder {

struct ExperimentConfig {
  std::string name = "experiment";
  std::optional<std::filesystem::path> vocab;  // absent: byte-level vocabulary
  std::vector<std::filesystem::path> train;
  std::vector<std::filesystem::path> valid;
  std::vector<std::filesystem::path> test;
  std::filesystem::path out = "runs/experiment";
  TreeConfig model;
  TrainConfig train_config;
  std::optional<std::size_t> vocab_size;  // must match the vocabulary when given
};

namespace detail {

inline std::vector<std::filesystem::path> path_list(const nlohmann::json& v) {
  std::vector<std::filesystem::path> out;
  if (v.is_string()) {
    out.emplace_back(v.get<std::string>());
  } else {
    for (const auto& p : v) out.emplace_back(p.get<std::string>());
  }
  return out;
}

}  // namespace detail

inline ExperimentConfig parse_experiment(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  ExperimentConfig e;
  auto& m = e.model;
  auto& t = e.train_config;
  using Setter = std::function<void(const nlohmann::json&)>;
  auto size = [](std::size_t& f) -> Setter { return [&f](const nlohmann::json& v) { f = v.get<std::size_t>(); }; };
  auto real = [](double& f) -> Setter { return [&f](const nlohmann::json& v) { f = v.get<double>(); }; };
  const std::map<std::string, Setter> fields = {
      {"name", [&](const nlohmann::json& v) { e.name = v.get<std::string>(); }},
      {"vocab", [&](const nlohmann::json& v) { e.vocab = v.get<std::string>(); }},
      {"train", [&](const nlohmann::json& v) { e.train = detail::path_list(v); }},
      {"valid", [&](const nlohmann::json& v) { e.valid = detail::path_list(v); }},
      {"test", [&](const nlohmann::json& v) { e.test = detail::path_list(v); }},
      {"out", [&](const nlohmann::json& v) { e.out = v.get<std::string>(); }},
      {"k", size(m.k)},
      {"h", size(m.h)},
      {"dec", size(m.dec)},
      {"d_model", size(m.d_model)},
      {"n_heads", size(m.n_heads)},
      {"ffn_hidden", size(m.ffn_hidden)},
      {"context_len", size(m.context_len)},
      {"vocab_size", [&](const nlohmann::json& v) { e.vocab_size = v.get<std::size_t>(); }},
      {"selector_hidden_mult", size(m.selector_hidden_mult)},
      {"dropout", real(m.dropout)},
      {"rms_eps", real(m.rms_eps)},
      {"routing", [&](const nlohmann::json& v) { m.routing = parse_routing(v.get<std::string>()); }},
      {"base_lr", real(t.base_lr)},
      {"warmup_steps", size(t.warmup_steps)},
      {"beta1", real(t.beta1)},
      {"beta2", real(t.beta2)},
      {"adam_eps", real(t.adam_eps)},
      {"weight_decay", real(t.weight_decay)},
      {"clip_norm", real(t.clip_norm)},
      {"batch_size", size(t.batch_size)},
      {"eval_batch_size", size(t.eval_batch_size)},
      {"epochs", size(t.epochs)},
      {"restart_period", size(t.restart_period)},
      {"restart_mult", real(t.restart_mult)},
      {"min_lr_fraction", real(t.min_lr_fraction)},
      {"seed", [&](const nlohmann::json& v) { t.seed = v.get<std::uint64_t>(); }},
      {"max_steps", size(t.max_steps)},
  };

  std::string unknown;
  for (const auto& [key, _] : j.items()) {
    if (!fields.contains(key)) unknown += (unknown.empty() ? "" : ", ") + key;
  }
  if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
  for (const auto& [key, value] : j.items()) {
    try {
      fields.at(key)(value);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + key + "' has the wrong type: " + value.dump());
    }
  }
  if (e.train.empty()) throw ConfigError("config needs at least one 'train' file");
  if (e.valid.empty()) throw ConfigError("config needs at least one 'valid' file");
  m.validate();
  t.validate();
  return e;
}

inline nlohmann::json to_json(const ExperimentConfig& e) {
  auto paths = [](const std::vector<std::filesystem::path>& ps) {
    auto a = nlohmann::json::array();
    for (const auto& p : ps) a.push_back(p.string());
    return a;
  };
  const auto& m = e.model;
  const auto& t = e.train_config;
  nlohmann::json j = {{"name", e.name},
                      {"train", paths(e.train)},
                      {"valid", paths(e.valid)},
                      {"test", paths(e.test)},
                      {"out", e.out.string()},
                      {"k", m.k},
                      {"h", m.h},
                      {"dec", m.dec},
                      {"d_model", m.d_model},
                      {"n_heads", m.n_heads},
                      {"ffn_hidden", m.ffn_width()},
                      {"context_len", m.context_len},
                      {"vocab_size", m.vocab_size},
                      {"selector_hidden_mult", m.selector_hidden_mult},
                      {"dropout", m.dropout},
                      {"rms_eps", m.rms_eps},
                      {"routing", to_string(m.routing)},
                      {"base_lr", t.base_lr},
                      {"warmup_steps", t.warmup_steps},
                      {"beta1", t.beta1},
                      {"beta2", t.beta2},
                      {"adam_eps", t.adam_eps},
                      {"weight_decay", t.weight_decay},
                      {"clip_norm", t.clip_norm},
                      {"batch_size", t.batch_size},
                      {"eval_batch_size", t.eval_batch_size},
                      {"epochs", t.epochs},
                      {"restart_period", t.restart_period},
                      {"restart_mult", t.restart_mult},
                      {"min_lr_fraction", t.min_lr_fraction},
                      {"seed", t.seed},
                      {"max_steps", t.max_steps}};
  if (e.vocab) j["vocab"] = e.vocab->string();
  return j;
}

// Every referenced input file must exist before anything is written.
inline void check_inputs(const ExperimentConfig& e) {
  std::vector<std::filesystem::path> all;
  if (e.vocab) all.push_back(*e.vocab);
  for (const auto* group : {&e.train, &e.valid, &e.test}) all.insert(all.end(), group->begin(), group->end());
  for (const auto& p : all) {
    if (!std::filesystem::is_regular_file(p)) throw InputError("missing input file " + p.string());
  }
}

}  // namespace treecoder
