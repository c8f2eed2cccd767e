#pragma once

#include <map>
#include <string>
#include <vector>

#include "calora/adapters/adapter.hpp"
#include "calora/io/checkpoint.hpp"
#include "calora/model/transformer.hpp"

namespace calora {

template <typename T>
struct SlotAdapters {
  std::shared_ptr<LoRAAdapter<T>> lora;
  std::shared_ptr<RecoveryAdapter<T>> recovery;
};

inline const std::string kScratch = "scratch";

// Per-task adapters keyed by slot path.
template <typename T>
struct AdapterSet {
  std::string task;
  std::string provenance = kScratch;  // or "inherited-from:<checkpoint id>"
  std::map<std::string, SlotAdapters<T>> slots;

  std::vector<ParamPtr<T>> params() const;
  std::vector<ParamPtr<T>> lora_params() const;
  std::vector<ParamPtr<T>> recovery_params() const;
  std::size_t param_count() const;
  std::size_t lora_count() const;
  std::size_t recovery_count() const;

  // Deep copy; tensors are fresh and gradient-free.
  AdapterSet clone() const;
  // Attaches LoRA then recovery on each slot. Throws ConfigError on dims.
  void attach(TransformerModel<T>& model) const;
};

// Fresh LoRA on the given slot kinds of every layer.
template <typename T>
AdapterSet<T> make_lora_set(const TransformerModel<T>& model, const std::string& task,
                            const std::vector<SlotKind>& kinds, std::size_t rank, Rng& rng);

// Adds fresh recovery modules on the given slot kinds, sized to the model's
// current (possibly compressed) slot dims.
template <typename T>
void add_recovery(AdapterSet<T>& set, const TransformerModel<T>& model,
                  const std::vector<SlotKind>& kinds, std::size_t rank, Rng& rng,
                  ag::Activation sigma = ag::Activation::kRelu);

// Copies the teacher's LoRA values onto a student. Throws InheritanceError
// naming the first slot that is missing or changed dims. The teacher set is
// not modified.
template <typename T>
AdapterSet<T> inherit(const AdapterSet<T>& teacher, const TransformerModel<T>& student,
                      const std::string& checkpoint_id);

// Records under adapter/<task>/<slot_path>/{A,B,D,U,sigma} plus a
// adapter/<task>/provenance/<tag> marker.
template <typename T>
Checkpoint adapters_to_checkpoint(const AdapterSet<T>& set);
template <typename T>
AdapterSet<T> adapters_from_checkpoint(const Checkpoint& ckpt, const std::string& task);
// Task ids with adapter records, in first-appearance order.
std::vector<std::string> adapter_tasks(const Checkpoint& ckpt);

std::vector<SlotKind> parse_slot_kinds(const std::string& csv);

}  // namespace calora
