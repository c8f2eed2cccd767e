#include "calora/adapters/adapter_set.hpp"

#include <algorithm>
#include <sstream>

namespace calora {

namespace {

template <typename T>
ParamPtr<T> copy_param(const ParamPtr<T>& p) {
  return make_param<T>(p->name, p->value, true);
}

std::string prefix_of(const std::string& task) { return "adapter/" + task + "/"; }

}  // namespace

template <typename T>
std::vector<ParamPtr<T>> AdapterSet<T>::lora_params() const {
  std::vector<ParamPtr<T>> out;
  for (const auto& [path, s] : slots)
    if (s.lora)
      for (const auto& p : s.lora->params()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<ParamPtr<T>> AdapterSet<T>::recovery_params() const {
  std::vector<ParamPtr<T>> out;
  for (const auto& [path, s] : slots)
    if (s.recovery)
      for (const auto& p : s.recovery->params()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<ParamPtr<T>> AdapterSet<T>::params() const {
  std::vector<ParamPtr<T>> out;
  for (const auto& [path, s] : slots) {
    if (s.lora)
      for (const auto& p : s.lora->params()) out.push_back(p);
    if (s.recovery)
      for (const auto& p : s.recovery->params()) out.push_back(p);
  }
  return out;
}

template <typename T>
std::size_t AdapterSet<T>::lora_count() const {
  std::size_t n = 0;
  for (const auto& p : lora_params()) n += p->value.numel();
  return n;
}

template <typename T>
std::size_t AdapterSet<T>::recovery_count() const {
  std::size_t n = 0;
  for (const auto& p : recovery_params()) n += p->value.numel();
  return n;
}

template <typename T>
std::size_t AdapterSet<T>::param_count() const {
  return lora_count() + recovery_count();
}

template <typename T>
AdapterSet<T> AdapterSet<T>::clone() const {
  AdapterSet out;
  out.task = task;
  out.provenance = provenance;
  for (const auto& [path, s] : slots) {
    SlotAdapters<T> c;
    if (s.lora) {
      c.lora = std::make_shared<LoRAAdapter<T>>(copy_param(s.lora->a()), copy_param(s.lora->b()),
                                                s.lora->scaling());
    }
    if (s.recovery) {
      c.recovery = std::make_shared<RecoveryAdapter<T>>(copy_param(s.recovery->down()),
                                                        copy_param(s.recovery->up()), s.recovery->sigma());
    }
    out.slots.emplace(path, std::move(c));
  }
  return out;
}

template <typename T>
void AdapterSet<T>::attach(TransformerModel<T>& model) const {
  for (const auto& [path, s] : slots) {
    if (s.lora) model.attach_adapter(path, s.lora);
    if (s.recovery) model.attach_adapter(path, s.recovery);
  }
}

template <typename T>
AdapterSet<T> make_lora_set(const TransformerModel<T>& model, const std::string& task,
                            const std::vector<SlotKind>& kinds, std::size_t rank, Rng& rng) {
  AdapterSet<T> set;
  set.task = task;
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    for (SlotKind kind : kinds) {
      const LinearSlot<T>& s = model.layer(l).slot(kind);
      set.slots[s.path()].lora =
          LoRAAdapter<T>::init(s.d_in(), s.d_out(), rank, rng, prefix_of(task) + s.path());
    }
  }
  return set;
}

template <typename T>
void add_recovery(AdapterSet<T>& set, const TransformerModel<T>& model,
                  const std::vector<SlotKind>& kinds, std::size_t rank, Rng& rng,
                  ag::Activation sigma) {
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    for (SlotKind kind : kinds) {
      const LinearSlot<T>& s = model.layer(l).slot(kind);
      set.slots[s.path()].recovery =
          RecoveryAdapter<T>::init(s.d_in(), s.d_out(), rank, rng, prefix_of(set.task) + s.path(), sigma);
    }
  }
}

template <typename T>
AdapterSet<T> inherit(const AdapterSet<T>& teacher, const TransformerModel<T>& student,
                      const std::string& checkpoint_id) {
  AdapterSet<T> out;
  out.task = teacher.task;
  out.provenance = "inherited-from:" + checkpoint_id;
  for (const auto& [path, s] : teacher.slots) {
    if (!s.lora) continue;
    const LinearSlot<T>* host = nullptr;
    try {
      host = &student.slot(path);
    } catch (const ConfigError&) {
      throw InheritanceError("cannot inherit LoRA on '" + path + "': slot missing in the student model");
    }
    if (host->d_in() != s.lora->d_in() || host->d_out() != s.lora->d_out()) {
      throw InheritanceError("cannot inherit LoRA on '" + path + "': teacher dims " +
                             std::to_string(s.lora->d_in()) + "->" + std::to_string(s.lora->d_out()) +
                             ", student slot " + std::to_string(host->d_in()) + "->" +
                             std::to_string(host->d_out()));
    }
    out.slots[path].lora = std::make_shared<LoRAAdapter<T>>(copy_param(s.lora->a()),
                                                            copy_param(s.lora->b()), s.lora->scaling());
  }
  return out;
}

template <typename T>
Checkpoint adapters_to_checkpoint(const AdapterSet<T>& set) {
  Checkpoint ck;
  const std::string pre = prefix_of(set.task);
  ck.put_scalar(pre + "provenance/" + set.provenance, 1.0);
  for (const auto& [path, s] : set.slots) {
    if (s.lora) {
      ck.put(pre + path + "/A", s.lora->a()->value);
      ck.put(pre + path + "/B", s.lora->b()->value);
      if (s.lora->scaling() != T{1}) ck.put_scalar(pre + path + "/scaling", s.lora->scaling());
    }
    if (s.recovery) {
      ck.put(pre + path + "/D", s.recovery->down()->value);
      ck.put(pre + path + "/U", s.recovery->up()->value);
      ck.put_scalar(pre + path + "/sigma", static_cast<double>(s.recovery->sigma()));
    }
  }
  return ck;
}

template <typename T>
AdapterSet<T> adapters_from_checkpoint(const Checkpoint& ck, const std::string& task) {
  const std::string pre = prefix_of(task);
  const std::vector<std::string> names = ck.names_with_prefix(pre);
  if (names.empty()) throw IoError("checkpoint has no adapters for task '" + task + "'");
  AdapterSet<T> set;
  set.task = task;
  std::map<std::string, std::map<std::string, std::string>> leaves;
  for (const std::string& name : names) {
    const std::string rest = name.substr(pre.size());
    if (rest.rfind("provenance/", 0) == 0) {
      set.provenance = rest.substr(std::string("provenance/").size());
      continue;
    }
    const auto slash = rest.rfind('/');
    if (slash == std::string::npos) throw IoError("malformed adapter record '" + name + "'");
    leaves[rest.substr(0, slash)][rest.substr(slash + 1)] = name;
  }
  for (const auto& [path, parts] : leaves) {
    auto has = [&](const char* leaf) { return parts.count(leaf) > 0; };
    SlotAdapters<T> s;
    if (has("A") || has("B")) {
      if (!has("A") || !has("B")) throw IoError("adapter '" + path + "' is missing A or B");
      const T scaling = has("scaling") ? static_cast<T>(ck.scalar(parts.at("scaling"))) : T{1};
      try {
        s.lora = std::make_shared<LoRAAdapter<T>>(make_param<T>(pre + path + "/A", ck.tensor<T>(parts.at("A"))),
                                                  make_param<T>(pre + path + "/B", ck.tensor<T>(parts.at("B"))),
                                                  scaling);
      } catch (const DimensionError& e) {
        throw IoError(std::string("adapter '") + path + "': " + e.what());
      }
    }
    if (has("D") || has("U")) {
      if (!has("D") || !has("U")) throw IoError("adapter '" + path + "' is missing D or U");
      ag::Activation sigma = ag::Activation::kRelu;
      if (has("sigma")) {
        const double code = ck.scalar(parts.at("sigma"));
        if (code < 0 || code > static_cast<double>(ag::Activation::kIdentity)) {
          throw IoError("adapter '" + path + "' has unknown sigma");
        }
        sigma = static_cast<ag::Activation>(static_cast<int>(code));
      }
      try {
        s.recovery = std::make_shared<RecoveryAdapter<T>>(
            make_param<T>(pre + path + "/D", ck.tensor<T>(parts.at("D"))),
            make_param<T>(pre + path + "/U", ck.tensor<T>(parts.at("U"))), sigma);
      } catch (const DimensionError& e) {
        throw IoError(std::string("adapter '") + path + "': " + e.what());
      }
    }
    set.slots.emplace(path, std::move(s));
  }
  return set;
}

std::vector<std::string> adapter_tasks(const Checkpoint& ck) {
  std::vector<std::string> out;
  for (const Record& r : ck.records()) {
    if (r.name.rfind("adapter/", 0) != 0) continue;
    const auto end = r.name.find('/', 8);
    if (end == std::string::npos) continue;
    std::string task = r.name.substr(8, end - 8);
    if (std::find(out.begin(), out.end(), task) == out.end()) out.push_back(std::move(task));
  }
  return out;
}

std::vector<SlotKind> parse_slot_kinds(const std::string& csv) {
  std::vector<SlotKind> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    if (item == "all") {
      out.assign(std::begin(kAllSlotKinds), std::end(kAllSlotKinds));
      continue;
    }
    const SlotKind k = slot_kind_from_name(item);
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
  }
  if (out.empty()) throw ConfigError("empty slot kind list '" + csv + "'");
  return out;
}

#define CALORA_INSTANTIATE(T)                                                                   \
  template struct AdapterSet<T>;                                                                \
  template AdapterSet<T> make_lora_set(const TransformerModel<T>&, const std::string&,          \
                                       const std::vector<SlotKind>&, std::size_t, Rng&);        \
  template void add_recovery(AdapterSet<T>&, const TransformerModel<T>&,                        \
                             const std::vector<SlotKind>&, std::size_t, Rng&, ag::Activation);  \
  template AdapterSet<T> inherit(const AdapterSet<T>&, const TransformerModel<T>&,              \
                                 const std::string&);                                          \
  template Checkpoint adapters_to_checkpoint(const AdapterSet<T>&);                             \
  template AdapterSet<T> adapters_from_checkpoint(const Checkpoint&, const std::string&);

CALORA_INSTANTIATE(float)
CALORA_INSTANTIATE(double)
#undef CALORA_INSTANTIATE

}  // namespace calora
