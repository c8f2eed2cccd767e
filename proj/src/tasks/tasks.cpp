#include "calora/tasks/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace calora {

const char* to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kSort: return "sort";
    case TaskKind::kParity: return "parity";
    case TaskKind::kModAdd: return "modadd";
  }
  return "?";
}

TaskKind task_kind_from_string(const std::string& name) {
  for (TaskKind k : kAllTaskKinds)
    if (name == to_string(k)) return k;
  throw ConfigError("unknown task kind '" + name + "'");
}

const char* to_string(Split split) {
  switch (split) {
    case Split::kPretrain: return "pretrain";
    case Split::kTrain: return "train";
    case Split::kEval: return "eval";
  }
  return "?";
}

std::size_t TaskSpec::symbol_count() const {
  switch (kind) {
    case TaskKind::kParity: return 2;
    case TaskKind::kModAdd: return modulus;
    default: return n_symbols;
  }
}

std::size_t TaskSpec::distinct_inputs() const {
  constexpr std::size_t kMax = std::numeric_limits<std::size_t>::max();
  const std::size_t s = symbol_count();
  std::size_t total = 0, power = 1;
  for (std::size_t len = 1; len <= max_len; ++len) {
    power = (s != 0 && power > kMax / s) ? kMax : power * s;
    if (len >= min_len) total = (total > kMax - power) ? kMax : total + power;
  }
  return total;
}

void TaskSpec::validate() const {
  const std::string where = "task '" + id + "'";
  if (id.empty()) throw ConfigError("task id must be non-empty");
  if (min_len == 0 || min_len > max_len) throw ConfigError(where + ": need 1 <= min_len <= max_len");
  if (kind == TaskKind::kModAdd && modulus < 2) throw ConfigError(where + ": modulus must be >= 2");
  if (symbol_count() < 2) throw ConfigError(where + ": needs at least 2 symbols");
  if (eval_count == 0) throw ConfigError(where + ": eval_count must be positive");
  const std::size_t distinct = distinct_inputs();
  if (eval_count > distinct || train_count > distinct - eval_count || pretrain_count > distinct - eval_count) {
    throw ConfigError(where + ": only " + std::to_string(distinct) +
                      " distinct inputs, too few for the requested disjoint splits");
  }
}

std::size_t task_answer(TaskKind kind, std::span<const std::size_t> xs, std::size_t modulus) {
  if (xs.empty()) throw ConfigError("task_answer: empty input");
  switch (kind) {
    case TaskKind::kCopy: return xs.back();
    case TaskKind::kReverse: return xs.front();
    case TaskKind::kSort: return *std::max_element(xs.begin(), xs.end());
    case TaskKind::kParity: {
      std::size_t p = 0;
      for (std::size_t x : xs) p ^= (x & 1U);
      return p;
    }
    case TaskKind::kModAdd: {
      std::size_t s = 0;
      for (std::size_t x : xs) s = (s + x) % modulus;
      return s;
    }
  }
  return 0;
}

std::size_t SyntheticCorpus::max_input_len() const {
  std::size_t n = 0;
  for (const Sample& s : samples) n = std::max(n, s.input.size());
  return n;
}

namespace {

std::vector<std::vector<std::size_t>> draw_inputs(const TaskSpec& spec, Split split, std::size_t count,
                                                  const std::set<std::vector<std::size_t>>& exclude) {
  Rng rng(spec.seed, 16 * static_cast<std::uint64_t>(spec.kind) + static_cast<std::uint64_t>(split) + 1);
  const std::size_t symbols = spec.symbol_count();
  std::set<std::vector<std::size_t>> seen;
  std::vector<std::vector<std::size_t>> out;
  const std::size_t max_attempts = 100 * count + 20 * std::min<std::size_t>(spec.distinct_inputs(), 1 << 20) + 1000;
  for (std::size_t attempt = 0; out.size() < count; ++attempt) {
    if (attempt == max_attempts) {
      throw ConfigError("task '" + spec.id + "': could not draw " + std::to_string(count) + " distinct " +
                        to_string(split) + " inputs");
    }
    const std::size_t len = spec.min_len + rng.uniform_int(spec.max_len - spec.min_len + 1);
    std::vector<std::size_t> xs(len);
    for (std::size_t& x : xs) x = rng.uniform_int(symbols);
    if (exclude.count(xs) || !seen.insert(xs).second) continue;
    out.push_back(std::move(xs));
  }
  return out;
}

Sample make_sample(const TaskSpec& spec, const std::vector<std::size_t>& xs, bool prefix) {
  Sample s;
  s.task = spec.id;
  if (prefix) s.input.push_back(vocab::prefix_token(spec.kind));
  for (std::size_t x : xs) s.input.push_back(vocab::symbol_token(x));
  s.input.push_back(vocab::kSep);
  s.target = vocab::symbol_token(task_answer(spec.kind, xs, spec.modulus));
  return s;
}

}  // namespace

SyntheticCorpus generate(const TaskSpec& spec, Split split) {
  spec.validate();
  const auto eval_inputs = draw_inputs(spec, Split::kEval, spec.eval_count, {});
  std::vector<std::vector<std::size_t>> inputs;
  if (split == Split::kEval) {
    inputs = eval_inputs;
  } else {
    const std::set<std::vector<std::size_t>> exclude(eval_inputs.begin(), eval_inputs.end());
    inputs = draw_inputs(spec, split, split == Split::kTrain ? spec.train_count : spec.pretrain_count, exclude);
  }
  SyntheticCorpus corpus;
  corpus.task = spec.id;
  corpus.split = to_string(split);
  const bool prefix = spec.prefix && split != Split::kPretrain;
  for (const auto& xs : inputs) corpus.samples.push_back(make_sample(spec, xs, prefix));
  return corpus;
}

SyntheticCorpus pretrain_mixture(const std::vector<TaskSpec>& specs, const std::vector<double>& weights,
                                 std::size_t size, std::uint64_t seed) {
  if (specs.empty()) throw ConfigError("pretrain mixture needs at least one task");
  if (!weights.empty() && weights.size() != specs.size()) {
    throw ConfigError("pretrain mixture: one weight per task required");
  }
  std::vector<double> w = weights.empty() ? std::vector<double>(specs.size(), 1.0) : weights;
  double total = 0;
  for (double x : w) {
    if (!(x >= 0)) throw ConfigError("pretrain mixture weights must be non-negative");
    total += x;
  }
  if (!(total > 0)) throw ConfigError("pretrain mixture weights sum to zero");

  std::vector<std::size_t> quota(specs.size());
  std::vector<std::pair<double, std::size_t>> remainder;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const double exact = static_cast<double>(size) * w[i] / total;
    quota[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[i];
    remainder.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainder.begin(), remainder.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < size; ++i, ++assigned) ++quota[remainder[i % remainder.size()].second];

  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < specs.size(); ++i) labels.insert(labels.end(), quota[i], i);
  Rng rng(seed, 0x4D49);
  for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[rng.uniform_int(i)]);

  std::vector<SyntheticCorpus> corpora;
  for (const TaskSpec& s : specs) {
    corpora.push_back(quota[corpora.size()] > 0 ? generate(s, Split::kPretrain) : SyntheticCorpus{});
    if (quota[corpora.size() - 1] > 0 && corpora.back().samples.empty()) {
      throw ConfigError("task '" + s.id + "' has an empty pretrain split");
    }
  }
  SyntheticCorpus out;
  out.task = "mixture";
  out.split = to_string(Split::kPretrain);
  std::vector<std::size_t> cursor(specs.size(), 0);
  for (std::size_t label : labels) {
    const auto& src = corpora[label].samples;
    Sample s = src[cursor[label]++ % src.size()];
    s.input.insert(s.input.begin(), vocab::prefix_token(specs[label].kind));
    out.samples.push_back(std::move(s));
  }
  return out;
}

TokenBatch make_batch(const SyntheticCorpus& corpus, std::span<const std::size_t> indices, std::size_t seq_len) {
  TokenBatch b;
  b.batch = indices.size();
  b.seq = seq_len;
  b.ids.assign(b.batch * seq_len, vocab::kPad);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = corpus.samples.at(indices[i]);
    if (s.input.size() > seq_len) {
      throw DimensionError("sample of length " + std::to_string(s.input.size()) + " exceeds seq_len " +
                           std::to_string(seq_len));
    }
    std::copy(s.input.begin(), s.input.end(), b.ids.begin() + static_cast<std::ptrdiff_t>((i + 1) * seq_len - s.input.size()));
  }
  return b;
}

std::vector<std::size_t> batch_targets(const SyntheticCorpus& corpus, std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(corpus.samples.at(i).target);
  return out;
}

void dump_tsv(const SyntheticCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (const Sample& s : corpus.samples) {
    out << s.task << '\t';
    for (std::size_t i = 0; i < s.input.size(); ++i) out << (i ? " " : "") << s.input[i];
    out << '\t' << s.target << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

SyntheticCorpus load_tsv(const std::filesystem::path& path, const std::string& split) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  SyntheticCorpus corpus;
  corpus.split = split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string task, tokens, target;
    if (!std::getline(ls, task, '\t') || !std::getline(ls, tokens, '\t') || !std::getline(ls, target)) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
    }
    Sample s;
    s.task = task;
    std::stringstream ts(tokens);
    std::size_t tok = 0;
    while (ts >> tok) s.input.push_back(tok);
    try {
      s.target = std::stoul(target);
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad target token");
    }
    if (corpus.task.empty()) corpus.task = task;
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace calora
