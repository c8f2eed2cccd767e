#pragma once

// Synthetic classification tasks: a symbol sequence followed by a separator;
// the answer is one symbol token read at the final position.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "calora/model/transformer.hpp"
#include "calora/rng.hpp"

namespace calora {

enum class TaskKind { kCopy, kReverse, kSort, kParity, kModAdd };

inline constexpr TaskKind kAllTaskKinds[] = {TaskKind::kCopy, TaskKind::kReverse, TaskKind::kSort,
                                             TaskKind::kParity, TaskKind::kModAdd};

const char* to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

// Shared token layout: PAD, SEP, one prefix token per task kind, symbols.
namespace vocab {
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kSep = 1;
inline constexpr std::size_t kPrefixBase = 2;
inline constexpr std::size_t kSymbolBase = kPrefixBase + std::size(kAllTaskKinds);

inline std::size_t prefix_token(TaskKind k) { return kPrefixBase + static_cast<std::size_t>(k); }
inline std::size_t symbol_token(std::size_t value) { return kSymbolBase + value; }
inline std::size_t symbol_value(std::size_t token) { return token - kSymbolBase; }
inline std::size_t vocab_size(std::size_t n_symbols) { return kSymbolBase + n_symbols; }
}  // namespace vocab

struct TaskSpec {
  std::string id;
  TaskKind kind = TaskKind::kCopy;
  std::size_t min_len = 2;
  std::size_t max_len = 6;
  // Symbol slice [0, n_symbols). Parity uses 2 and modadd uses its modulus.
  std::size_t n_symbols = 10;
  std::size_t modulus = 7;
  std::size_t pretrain_count = 2000;
  std::size_t train_count = 1000;
  std::size_t eval_count = 200;
  std::uint64_t seed = 0;
  // Whether train/eval samples start with the task prefix token.
  bool prefix = false;

  // Symbols the generator draws from.
  std::size_t symbol_count() const;
  // Number of distinct inputs, saturating at SIZE_MAX.
  std::size_t distinct_inputs() const;
  // Throws ConfigError on infeasible specs.
  void validate() const;
};

struct Sample {
  std::vector<std::size_t> input;  // tokens, ends with SEP, unpadded
  std::size_t target = 0;          // symbol token
  std::string task;
};

enum class Split { kPretrain, kTrain, kEval };
const char* to_string(Split split);

struct SyntheticCorpus {
  std::string task;
  std::string split;
  std::vector<Sample> samples;

  std::size_t max_input_len() const;
  friend bool operator==(const SyntheticCorpus&, const SyntheticCorpus&) = default;
};

inline bool operator==(const Sample& a, const Sample& b) {
  return a.input == b.input && a.target == b.target && a.task == b.task;
}

// Closed-form answer (as a symbol value) for symbol values `xs`.
std::size_t task_answer(TaskKind kind, std::span<const std::size_t> xs, std::size_t modulus);

// Deterministic split. Eval is drawn first; train and pretrain reject any
// input present in eval. Samples within a split are distinct. Pretrain
// samples never carry the prefix (the mixture adds it).
SyntheticCorpus generate(const TaskSpec& spec, Split split);

// Interleaves the specs' pretrain corpora with prefix tokens. Task counts
// are largest-remainder quotas of `size` under `weights` (uniform if empty);
// corpora are cycled if a quota exceeds them. Order within a task is kept.
SyntheticCorpus pretrain_mixture(const std::vector<TaskSpec>& specs, const std::vector<double>& weights,
                                 std::size_t size, std::uint64_t seed);

// Left-pads inputs with PAD to `seq_len` so every answer sits at position
// seq_len - 1. Throws DimensionError if an input is longer.
TokenBatch make_batch(const SyntheticCorpus& corpus, std::span<const std::size_t> indices, std::size_t seq_len);
std::vector<std::size_t> batch_targets(const SyntheticCorpus& corpus, std::span<const std::size_t> indices);

// Newline-delimited `task_id \t input tokens \t target token`.
void dump_tsv(const SyntheticCorpus& corpus, const std::filesystem::path& path);
SyntheticCorpus load_tsv(const std::filesystem::path& path, const std::string& split);

}  // namespace calora
