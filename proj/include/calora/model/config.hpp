#pragma once

#include <cstddef>
#include <string>

#include "calora/tensor/ops.hpp"

namespace calora {

struct TransformerConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 32;
  // ReLU is required for MoEfication.
  ag::Activation activation = ag::Activation::kRelu;

  std::size_t head_dim() const { return d_model / n_heads; }

  // Throws ConfigError on inconsistent sizes.
  void validate() const;

  friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

// The six projection kinds that carry adapters and compression.
enum class SlotKind { kQuery, kKey, kValue, kOutput, kFfnIn, kFfnOut };

inline constexpr SlotKind kAllSlotKinds[] = {SlotKind::kQuery, SlotKind::kKey,   SlotKind::kValue,
                                             SlotKind::kOutput, SlotKind::kFfnIn, SlotKind::kFfnOut};

const char* slot_kind_name(SlotKind kind);
SlotKind slot_kind_from_name(const std::string& name);

// "layer<i>.<kind>", e.g. "layer0.q".
std::string slot_path(std::size_t layer, SlotKind kind);
// Inverse of slot_path; throws ConfigError on malformed paths.
std::pair<std::size_t, SlotKind> parse_slot_path(const std::string& path);

}  // namespace calora
