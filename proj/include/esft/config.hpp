// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Engine configuration file (JSON). Every key is optional; missing keys keep
// the defaults below. Command-line flags override file values.
//
//   {
//     "model":     {"num_layers": 4, "num_experts": 64, "top_k": 6, "hidden": 64,
//                   "intermediate": 32, "vocab": 256, "dtype": "f32"},
//     "model_dir": "path/to/checkpoint",          // used instead of "model" when set
//     "adapter_dirs": ["a0", "a1"],
//     "page":      {"page_size": 2097152, "pool_capacity": 1024},
//     "max_adapters": 20,
//     "e_max": 8,
//     "seed": 0,
//     "scheduler": {"token_budget": 512, "clock": "simulated",
//                   "step_cost_fixed": 0.002, "step_cost_per_token": 0.0001},
//     "workload":  {"alpha": 1.0, "rate": 10.0, "duration": 100.0,
//                   "prompt_len": [16, 64], "output_len": [8, 32], "num_domains": 5}
//   }

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "esft/expert_memory.hpp"
#include "esft/io.hpp"
#include "esft/model.hpp"
#include "esft/serving.hpp"
#include "esft/workload.hpp"

namespace esft {

inline const char* clock_name(ClockMode c) { return c == ClockMode::kWallClock ? "wall" : "simulated"; }

inline ClockMode parse_clock(const std::string& s) {
  if (s == "simulated" || s == "sim") return ClockMode::kSimulated;
  if (s == "wall" || s == "wallclock" || s == "wall-clock") return ClockMode::kWallClock;
  raise(ErrorKind::kConfig, "unknown clock mode '" + s + "' (simulated | wall)");
}

struct EngineConfig {
  ModelConfig model;
  std::optional<std::filesystem::path> model_dir;
  std::vector<std::filesystem::path> adapter_dirs;
  PageConfig page;
  int max_adapters = 20;
  int e_max = 8;
  std::uint64_t seed = 0;
  SchedulerConfig scheduler;
  WorkloadSpec workload{.num_adapters = 1, .alpha = 1.0, .rate = 10.0};

  void validate() const {
    require(e_max >= 1, ErrorKind::kConfig, "e_max must be >= 1");
    require(max_adapters >= 0, ErrorKind::kConfig, "max_adapters must be >= 0");
    require(scheduler.token_budget >= 1, ErrorKind::kConfig, "token_budget must be >= 1");
    page.validate();
    if (model_dir)
      require(std::filesystem::is_directory(*model_dir), ErrorKind::kConfig, "model_dir " + model_dir->string() + " does not exist");
    for (const auto& d : adapter_dirs)
      require(std::filesystem::is_directory(d), ErrorKind::kConfig, "adapter dir " + d.string() + " does not exist");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {
        {"model", esft::to_json(model)},
        {"page", {{"page_size", page.page_size}, {"pool_capacity", page.pool_capacity}}},
        {"max_adapters", max_adapters},
        {"e_max", e_max},
        {"seed", seed},
        {"scheduler",
         {{"token_budget", scheduler.token_budget},
          {"clock", clock_name(scheduler.clock)},
          {"step_cost_fixed", scheduler.step_cost_fixed},
          {"step_cost_per_token", scheduler.step_cost_per_token}}},
        {"workload",
         {{"alpha", workload.alpha},
          {"rate", workload.rate},
          {"duration", workload.duration},
          {"prompt_len", {workload.prompt_len.min, workload.prompt_len.max}},
          {"output_len", {workload.output_len.min, workload.output_len.max}},
          {"num_domains", workload.num_domains}}}};
    if (model_dir) j["model_dir"] = model_dir->string();
    std::vector<std::string> dirs;
    for (const auto& d : adapter_dirs) dirs.push_back(d.string());
    j["adapter_dirs"] = dirs;
    return j;
  }

  static EngineConfig from_json(const nlohmann::json& j) {
    EngineConfig c;
    try {
      if (j.contains("model")) {
        // Partial model blocks are merged over the defaults.
        nlohmann::json m = esft::to_json(c.model);
        m.update(j.at("model"));
        c.model = model_config_from_json(m);
      }
      if (j.contains("model_dir")) c.model_dir = j.at("model_dir").get<std::string>();
      for (const auto& d : j.value("adapter_dirs", std::vector<std::string>{})) c.adapter_dirs.emplace_back(d);
      if (j.contains("page")) {
        const auto& p = j.at("page");
        c.page.page_size = p.value("page_size", c.page.page_size);
        c.page.pool_capacity = p.value("pool_capacity", c.page.pool_capacity);
      }
      c.max_adapters = j.value("max_adapters", c.max_adapters);
      c.e_max = j.value("e_max", c.e_max);
      c.seed = j.value("seed", c.seed);
      if (j.contains("scheduler")) {
        const auto& s = j.at("scheduler");
        c.scheduler.token_budget = s.value("token_budget", c.scheduler.token_budget);
        if (s.contains("clock")) c.scheduler.clock = parse_clock(s.at("clock").get<std::string>());
        c.scheduler.step_cost_fixed = s.value("step_cost_fixed", c.scheduler.step_cost_fixed);
        c.scheduler.step_cost_per_token = s.value("step_cost_per_token", c.scheduler.step_cost_per_token);
      }
      if (j.contains("workload")) {
        const auto& w = j.at("workload");
        c.workload.alpha = w.value("alpha", c.workload.alpha);
        c.workload.rate = w.value("rate", c.workload.rate);
        c.workload.duration = w.value("duration", c.workload.duration);
        c.workload.num_domains = w.value("num_domains", c.workload.num_domains);
        if (w.contains("prompt_len")) {
          const auto v = w.at("prompt_len").get<std::vector<int>>();
          require(v.size() == 2, ErrorKind::kConfig, "prompt_len must be [min, max]");
          c.workload.prompt_len = {v[0], v[1]};
        }
        if (w.contains("output_len")) {
          const auto v = w.at("output_len").get<std::vector<int>>();
          require(v.size() == 2, ErrorKind::kConfig, "output_len must be [min, max]");
          c.workload.output_len = {v[0], v[1]};
        }
      }
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorKind::kConfig, std::string("config: ") + e.what());
    }
    return c;
  }

  static EngineConfig load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(io::read_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
      raise(ErrorKind::kConfig, path.string() + ": " + e.what());
    }
  }
};

}  // namespace esft
