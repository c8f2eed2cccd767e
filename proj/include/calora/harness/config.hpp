#pragma once

// Experiment configuration: an INI file with sections
//   [experiment] [model] [pretrain] [teacher] [train] [adapters]
//   [compression] [convergence] [ablate] and one [task:<id>] per task.
// Every key has a default; unknown sections or keys are configuration errors.
// The resolved values are dumped canonically and hashed into every output.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "calora/compression/compression.hpp"
#include "calora/tasks/tasks.hpp"
#include "calora/training/training.hpp"

namespace calora {

struct ConvergenceFamily {
  std::string name;
  CompressionSpec spec;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs";
  std::string task;  // downstream task id
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t workers = 1;

  TransformerConfig model;  // vocab_size derived from the tasks
  std::vector<TaskSpec> tasks;
  std::vector<double> task_weights;  // pretraining mixture weights, aligned with tasks

  std::size_t pretrain_size = 40000;  // mixture samples
  TrainConfig pretrain;
  TrainConfig teacher;
  TrainConfig train;
  AdapterConfig adapters;
  CompressionSpec compression;
  // Compression families for the convergence curves, sorted by name.
  std::vector<ConvergenceFamily> families;
  std::vector<std::string> baselines{"lora_lora", "large_lora"};
  std::size_t large_lora_rank = 32;

  // Parses INI text. Throws ConfigError with the offending key.
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  // Applies "section.key=value" on top of the given text before parsing.
  static ExperimentConfig parse_with(const std::string& text, const std::vector<std::string>& overrides);

  // Resolved values in sorted INI form. `out` and `workers` are left out:
  // they do not affect results, so reruns elsewhere or on more threads share
  // a hash. parse(canonical()) reproduces everything else.
  std::string canonical() const;
  // CRC-64 of canonical(), 16 lowercase hex digits.
  std::string hash() const;

  const TaskSpec& task_spec(const std::string& id) const;
  // The downstream task with its prefix setting applied.
  TaskSpec downstream() const;
  TransformerConfig model_config() const;

  // Throws ConfigError on inconsistent settings.
  void validate() const;
};

// Built-in desk-scale configuration used when no file is given.
std::string default_config_text();

}  // namespace calora
