#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>

#include "vlm/adapters.hpp"
#include "vlm/fusion.hpp"
#include "vlm/pipeline.hpp"

namespace vlm::harness {

struct TrainConfig {
  std::size_t steps = 200;
  double lr = 1e-4;
  double warmup_frac = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

struct DataConfig {
  std::size_t n_examples = 32;
  std::size_t image_size = 28;
  bool vary_size = false;
  std::string manifest;  // empty: generate the synthetic corpus
  pipeline::SplitConfig split;
};

struct RunConfig {
  VLMConfig model;
  std::string policy = "lora";  // frozen | lora | dora | full
  adapters::AdapterSpec adapter;
  TrainConfig train;
  DataConfig data;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys are a config error.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

/// Sets a dotted key path ("connector.n_latents") in a config JSON object.
void set_path(nlohmann::json& j, const std::string& dotted, const nlohmann::json& value);

/// 16 hex digits of the FNV-1a hash of the canonical JSON, seed excluded.
std::string config_id(const RunConfig& cfg);
std::uint64_t fnv1a(std::string_view bytes);

}  // namespace vlm::harness
