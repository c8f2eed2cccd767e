#include "calora/model/config.hpp"

#include <charconv>

namespace calora {

void TransformerConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0) {
    throw ConfigError("transformer sizes must all be positive");
  }
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

const char* slot_kind_name(SlotKind kind) {
  switch (kind) {
    case SlotKind::kQuery: return "q";
    case SlotKind::kKey: return "k";
    case SlotKind::kValue: return "v";
    case SlotKind::kOutput: return "o";
    case SlotKind::kFfnIn: return "ffn_in";
    case SlotKind::kFfnOut: return "ffn_out";
  }
  return "?";
}

SlotKind slot_kind_from_name(const std::string& name) {
  for (SlotKind k : kAllSlotKinds) {
    if (name == slot_kind_name(k)) return k;
  }
  throw ConfigError("unknown slot kind '" + name + "'");
}

std::string slot_path(std::size_t layer, SlotKind kind) {
  return "layer" + std::to_string(layer) + "." + slot_kind_name(kind);
}

std::pair<std::size_t, SlotKind> parse_slot_path(const std::string& path) {
  const std::string prefix = "layer";
  const auto dot = path.find('.');
  if (path.rfind(prefix, 0) != 0 || dot == std::string::npos || dot == prefix.size()) {
    throw ConfigError("malformed slot path '" + path + "'");
  }
  std::size_t layer = 0;
  const char* first = path.data() + prefix.size();
  const char* last = path.data() + dot;
  auto [ptr, ec] = std::from_chars(first, last, layer);
  if (ec != std::errc() || ptr != last) throw ConfigError("malformed slot path '" + path + "'");
  return {layer, slot_kind_from_name(path.substr(dot + 1))};
}

}  // namespace calora
