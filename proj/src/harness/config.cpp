#include "calora/harness/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "calora/io/checkpoint.hpp"

namespace calora {

namespace pt = boost::property_tree;

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(std::uint64_t v, int) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

std::string join_kinds(const std::vector<SlotKind>& kinds) {
  std::string out;
  for (SlotKind k : kinds) out += (out.empty() ? "" : ",") + std::string(slot_kind_name(k));
  return out;
}

template <typename C>
std::string join(const C& xs) {
  std::string out;
  for (const auto& x : xs) {
    std::ostringstream s;
    s << x;
    out += (out.empty() ? "" : ",") + s.str();
  }
  return out;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto b = item.find_first_not_of(" \t");
    auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

// Reads one section and remembers which keys were used, so leftovers can be
// reported as unknown.
class Section {
 public:
  Section(const pt::ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  std::optional<std::string> raw(const std::string& key) {
    used_.insert(key);
    if (!tree_) return std::nullopt;
    auto it = tree_->find(key);
    if (it == tree_->not_found()) return std::nullopt;
    return it->second.data();
  }

  void get(const std::string& key, std::string& v) {
    if (auto r = raw(key)) v = *r;
  }
  void get(const std::string& key, double& v) {
    if (auto r = raw(key)) v = number<double>(key, *r);
  }
  void get(const std::string& key, std::size_t& v) {
    if (auto r = raw(key)) v = number<std::size_t>(key, *r);
  }
  void get_u64(const std::string& key, std::uint64_t& v) {
    if (auto r = raw(key)) v = number<std::uint64_t>(key, *r);
  }
  void get(const std::string& key, bool& v) {
    if (auto r = raw(key)) {
      if (*r == "true" || *r == "1") v = true;
      else if (*r == "false" || *r == "0") v = false;
      else bad(key, *r);
    }
  }

  void finish() const {
    if (!tree_) return;
    for (const auto& [k, child] : *tree_) {
      if (!used_.count(k)) throw ConfigError("unknown key '" + k + "' in [" + name_ + "]");
      if (!child.empty()) throw ConfigError("nested value under '" + k + "' in [" + name_ + "]");
    }
  }

  [[noreturn]] void bad(const std::string& key, const std::string& value) const {
    throw ConfigError("[" + name_ + "] " + key + ": bad value '" + value + "'");
  }

 private:
  template <typename N>
  N number(const std::string& key, const std::string& s) const {
    N v{};
    const char* b = s.data();
    const char* e = b + s.size();
    if constexpr (std::is_unsigned_v<N>) {
      if (!s.empty() && s[0] == '-') bad(key, s);
    }
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e) bad(key, s);
    return v;
  }

  const pt::ptree* tree_;
  std::string name_;
  std::set<std::string> used_;
};

void read_train(Section& s, TrainConfig& t) {
  s.get("lr", t.lr);
  s.get("batch_size", t.batch_size);
  s.get("max_steps", t.max_steps);
  s.get("weight_decay", t.weight_decay);
  s.get("alpha", t.alpha);
  s.get("eval_interval", t.eval_interval);
  s.get("eval_batch", t.eval_batch);
  std::string target = to_string(t.distill_target);
  s.get("distill_target", target);
  t.distill_target = distill_target_from_string(target);
}

void write_train(std::map<std::string, std::string>& m, const TrainConfig& t) {
  m["lr"] = fmt(t.lr);
  m["batch_size"] = fmt(t.batch_size);
  m["max_steps"] = fmt(t.max_steps);
  m["weight_decay"] = fmt(t.weight_decay);
  m["alpha"] = fmt(t.alpha);
  m["eval_interval"] = fmt(t.eval_interval);
  m["eval_batch"] = fmt(t.eval_batch);
  m["distill_target"] = to_string(t.distill_target);
}

ExperimentConfig from_tree(const pt::ptree& root) {
  ExperimentConfig c;
  std::set<std::string> seen;
  auto section = [&](const std::string& name) {
    seen.insert(name);
    auto it = root.find(name);
    return Section(it == root.not_found() ? nullptr : &it->second, name);
  };

  {
    Section s = section("experiment");
    s.get("name", c.name);
    s.get_u64("seed", c.seed);
    std::string out = c.out.string();
    s.get("out", out);
    c.out = out;
    s.get("task", c.task);
    if (auto r = s.raw("seeds")) {
      c.seeds.clear();
      for (const std::string& x : split_csv(*r)) {
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(x.data(), x.data() + x.size(), v);
        if (ec != std::errc() || p != x.data() + x.size()) s.bad("seeds", *r);
        c.seeds.push_back(v);
      }
    }
    s.get("workers", c.workers);
    s.finish();
  }
  {
    Section s = section("model");
    s.get("n_layers", c.model.n_layers);
    s.get("d_model", c.model.d_model);
    s.get("n_heads", c.model.n_heads);
    s.get("d_ff", c.model.d_ff);
    s.get("max_seq_len", c.model.max_seq_len);
    std::string act = ag::to_string(c.model.activation);
    s.get("activation", act);
    c.model.activation = ag::activation_from_string(act);
    s.finish();
  }
  {
    Section s = section("pretrain");
    s.get("size", c.pretrain_size);
    read_train(s, c.pretrain);
    s.finish();
  }
  {
    Section s = section("teacher");
    read_train(s, c.teacher);
    s.finish();
  }
  {
    Section s = section("train");
    read_train(s, c.train);
    s.finish();
  }
  {
    Section s = section("adapters");
    if (auto r = s.raw("lora_slots")) c.adapters.lora_slots = parse_slot_kinds(*r);
    s.get("lora_rank", c.adapters.lora_rank);
    if (auto r = s.raw("recovery_slots")) c.adapters.recovery_slots = parse_slot_kinds(*r);
    s.get("recovery_rank", c.adapters.recovery_rank);
    std::string sigma = ag::to_string(c.adapters.recovery_sigma);
    s.get("recovery_sigma", sigma);
    c.adapters.recovery_sigma = ag::activation_from_string(sigma);
    s.finish();
  }
  {
    Section s = section("compression");
    std::string spec = c.compression.to_string();
    s.get("spec", spec);
    c.compression = CompressionSpec::parse(spec);
    s.finish();
  }
  {
    // Any key names a family; sorted, like the canonical dump.
    seen.insert("convergence");
    c.families.clear();
    if (auto it = root.find("convergence"); it != root.not_found()) {
      std::map<std::string, std::string> sorted;
      for (const auto& [k, v] : it->second) {
        if (!v.empty()) throw ConfigError("nested value under '" + k + "' in [convergence]");
        if (!sorted.emplace(k, v.data()).second) throw ConfigError("duplicate family '" + k + "'");
      }
      for (const auto& [k, v] : sorted) c.families.push_back({k, CompressionSpec::parse(v)});
    }
  }
  {
    Section s = section("ablate");
    if (auto r = s.raw("baselines")) c.baselines = split_csv(*r);
    s.get("large_lora_rank", c.large_lora_rank);
    s.finish();
  }

  c.tasks.clear();
  c.task_weights.clear();
  for (const auto& [name, tree] : root) {
    if (name.rfind("task:", 0) != 0) {
      if (!seen.count(name)) {
        if (tree.empty()) throw ConfigError("key '" + name + "' outside any section");
        throw ConfigError("unknown section [" + name + "]");
      }
      continue;
    }
    Section s(&tree, name);
    TaskSpec t;
    t.id = name.substr(5);
    std::string kind;
    s.get("kind", kind);
    if (kind.empty()) throw ConfigError("[" + name + "] needs a kind");
    t.kind = task_kind_from_string(kind);
    s.get("min_len", t.min_len);
    s.get("max_len", t.max_len);
    s.get("n_symbols", t.n_symbols);
    s.get("modulus", t.modulus);
    s.get("pretrain_count", t.pretrain_count);
    s.get("train_count", t.train_count);
    s.get("eval_count", t.eval_count);
    s.get_u64("seed", t.seed);
    s.get("prefix", t.prefix);
    double weight = 1.0;
    s.get("weight", weight);
    s.finish();
    for (const TaskSpec& other : c.tasks)
      if (other.id == t.id) throw ConfigError("duplicate task '" + t.id + "'");
    c.tasks.push_back(t);
    c.task_weights.push_back(weight);
  }
  c.validate();
  return c;
}

pt::ptree read_tree(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return tree;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text) { return parse_with(text, {}); }

ExperimentConfig ExperimentConfig::parse_with(const std::string& text, const std::vector<std::string>& overrides) {
  pt::ptree tree = read_tree(text);
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.substr(0, eq).rfind('.');
    if (eq == std::string::npos || dot == std::string::npos || dot == 0 || dot + 1 == eq) {
      throw ConfigError("override '" + o + "' is not section.key=value");
    }
    const std::string sec = o.substr(0, dot), key = o.substr(dot + 1, eq - dot - 1);
    pt::ptree* section = nullptr;
    if (auto it = tree.find(sec); it != tree.not_found()) section = &it->second;
    else section = &tree.push_back({sec, pt::ptree()})->second;
    section->put(pt::ptree::path_type(key, '\0'), o.substr(eq + 1));
  }
  return from_tree(tree);
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ExperimentConfig::canonical() const {
  std::map<std::string, std::map<std::string, std::string>> m;
  auto& e = m["experiment"];
  e["name"] = name;
  e["seed"] = fmt(seed, 0);
  e["task"] = task;
  e["seeds"] = join(seeds);
  auto& mo = m["model"];
  mo["n_layers"] = fmt(model.n_layers);
  mo["d_model"] = fmt(model.d_model);
  mo["n_heads"] = fmt(model.n_heads);
  mo["d_ff"] = fmt(model.d_ff);
  mo["max_seq_len"] = fmt(model.max_seq_len);
  mo["activation"] = ag::to_string(model.activation);
  m["pretrain"]["size"] = fmt(pretrain_size);
  write_train(m["pretrain"], pretrain);
  write_train(m["teacher"], teacher);
  write_train(m["train"], train);
  auto& a = m["adapters"];
  a["lora_slots"] = join_kinds(adapters.lora_slots);
  a["lora_rank"] = fmt(adapters.lora_rank);
  a["recovery_slots"] = join_kinds(adapters.recovery_slots);
  a["recovery_rank"] = fmt(adapters.recovery_rank);
  a["recovery_sigma"] = ag::to_string(adapters.recovery_sigma);
  m["compression"]["spec"] = compression.to_string();
  for (const auto& f : families) m["convergence"][f.name] = f.spec.to_string();
  m["ablate"]["baselines"] = join(baselines);
  m["ablate"]["large_lora_rank"] = fmt(large_lora_rank);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const TaskSpec& t = tasks[i];
    auto& s = m["task:" + t.id];
    s["kind"] = to_string(t.kind);
    s["min_len"] = fmt(t.min_len);
    s["max_len"] = fmt(t.max_len);
    s["n_symbols"] = fmt(t.n_symbols);
    s["modulus"] = fmt(t.modulus);
    s["pretrain_count"] = fmt(t.pretrain_count);
    s["train_count"] = fmt(t.train_count);
    s["eval_count"] = fmt(t.eval_count);
    s["seed"] = fmt(t.seed, 0);
    s["prefix"] = fmt(t.prefix);
    s["weight"] = fmt(task_weights[i]);
  }
  std::string out_text;
  for (const auto& [sec, kv] : m) {
    out_text += "[" + sec + "]\n";
    for (const auto& [k, v] : kv) out_text += k + "=" + v + "\n";
    out_text += "\n";
  }
  return out_text;
}

std::string ExperimentConfig::hash() const {
  const std::string text = canonical();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(crc64(reinterpret_cast<const std::uint8_t*>(text.data()), text.size())));
  return buf;
}

const TaskSpec& ExperimentConfig::task_spec(const std::string& id) const {
  for (const TaskSpec& t : tasks)
    if (t.id == id) return t;
  throw ConfigError("no task '" + id + "' in config");
}

TaskSpec ExperimentConfig::downstream() const { return task_spec(task); }

TransformerConfig ExperimentConfig::model_config() const {
  TransformerConfig m = model;
  std::size_t symbols = 0;
  for (const TaskSpec& t : tasks) symbols = std::max(symbols, t.symbol_count());
  m.vocab_size = vocab::vocab_size(symbols);
  return m;
}

void ExperimentConfig::validate() const {
  if (tasks.empty()) throw ConfigError("config defines no [task:<id>] section");
  if (task.empty()) throw ConfigError("[experiment] task is required");
  task_spec(task);
  if (seeds.empty()) throw ConfigError("[experiment] seeds must list at least one seed");
  if (workers == 0) throw ConfigError("[experiment] workers must be positive");
  model_config().validate();
  for (const TaskSpec& t : tasks) {
    t.validate();
    // prefix + symbols + separator
    if (t.max_len + 2 > model.max_seq_len) {
      throw ConfigError("task '" + t.id + "': inputs of length " + std::to_string(t.max_len + 2) +
                        " exceed max_seq_len " + std::to_string(model.max_seq_len));
    }
  }
  pretrain.validate();
  teacher.validate();
  train.validate();
  if (adapters.lora_rank == 0 || adapters.recovery_rank == 0 || large_lora_rank == 0) {
    throw ConfigError("[adapters] ranks must be positive");
  }
  compression.validate();
  for (const auto& f : families) f.spec.validate();
  for (const std::string& b : baselines) {
    if (b != "lora_lora" && b != "large_lora") throw ConfigError("[ablate] unknown baseline '" + b + "'");
  }
}

std::string default_config_text() {
  return R"([experiment]
name=desk
seed=1
out=runs
task=modadd
seeds=1,2,3,4,5
workers=1

[model]
n_layers=2
d_model=64
n_heads=4
d_ff=256
max_seq_len=16
activation=relu

[pretrain]
size=40000
max_steps=4000
batch_size=32
lr=0.001
eval_interval=500

[teacher]
max_steps=2000
batch_size=16
lr=0.001
eval_interval=100

[train]
max_steps=2000
batch_size=16
lr=0.001
eval_interval=100
alpha=0.05

[adapters]
lora_slots=q,k
lora_rank=8
recovery_slots=q,k,v,o,ffn_in,ffn_out
recovery_rank=8
recovery_sigma=relu

[compression]
spec=quantize(bits=8); prune_unstructured(sparsity=0.5)

[convergence]
Q=quantize(bits=8)
UP=prune_unstructured(sparsity=0.5)
SP=prune_structured(ffn_keep=0.5,heads_keep=1)
M=moefy(experts=8,top_k=4,router=oracle)

[ablate]
baselines=lora_lora,large_lora
large_lora_rank=32

[task:copy]
kind=copy
n_symbols=10
min_len=2
max_len=6
pretrain_count=3000
train_count=1000
eval_count=300
seed=7

[task:reverse]
kind=reverse
n_symbols=10
min_len=2
max_len=6
pretrain_count=3000
train_count=1000
eval_count=300
seed=7

[task:sort]
kind=sort
n_symbols=10
min_len=2
max_len=6
pretrain_count=3000
train_count=1000
eval_count=300
seed=7

[task:parity]
kind=parity
min_len=2
max_len=8
pretrain_count=381
train_count=381
eval_count=127
seed=7

[task:modadd]
kind=modadd
modulus=5
min_len=2
max_len=4
pretrain_count=582
train_count=582
eval_count=193
seed=7
weight=4
prefix=false
)";
}

}  // namespace calora
