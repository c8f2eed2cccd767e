#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "calora/model/config.hpp"
#include "calora/model/linear_slot.hpp"

namespace calora {

// Row-major token ids, batch × seq.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::size_t> ids;
};

enum class RouterMode { kOracle, kLearned };

const char* to_string(RouterMode mode);
RouterMode router_mode_from_string(const std::string& name);

// Partition of one FFN's neurons into experts.
template <typename T>
struct MoELayout {
  std::size_t n_experts = 0;
  std::size_t top_k = 0;
  RouterMode router = RouterMode::kOracle;
  std::vector<std::size_t> assignment;  // neuron -> expert
  ParamPtr<T> router_weight;            // n_experts × (d_model + 1), last column bias; learned only

  std::vector<std::vector<std::size_t>> experts() const;
};

// Experts chosen for each row. Oracle mode ranks experts by the sum of
// positive pre-activations `h` of their neurons; learned mode ranks by the
// linear router scores of the FFN input `x`. Ties go to the lower index.
template <typename T>
std::vector<std::vector<std::size_t>> moe_select(const MoELayout<T>& moe, const Tensor<T>& h,
                                                 const Tensor<T>& x);

template <typename T>
struct TransformerLayer {
  ParamPtr<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  LinearSlot<T> q, k, v, o, ffn_in, ffn_out;
  std::vector<bool> head_keep;
  std::optional<MoELayout<T>> moe;

  LinearSlot<T>& slot(SlotKind kind);
  const LinearSlot<T>& slot(SlotKind kind) const;
  std::size_t d_ff() const { return ffn_in.d_out(); }
};

template <typename T>
struct ForwardResult {
  Var<T> logits;  // [batch·seq × vocab]
  Var<T> hidden;  // final normalized hidden state, [batch·seq × d_model]
};

// Decoder-only pre-layernorm transformer whose projections are LinearSlots.
template <typename T>
class TransformerModel {
 public:
  TransformerModel() = default;
  // Random initialization from `rng`.
  TransformerModel(TransformerConfig config, Rng& rng);
  // Zero-initialized parameters of the configured shapes (for loading).
  static TransformerModel zeros(TransformerConfig config);

  const TransformerConfig& config() const { return config_; }
  std::size_t n_layers() const { return layers_.size(); }
  TransformerLayer<T>& layer(std::size_t i) { return layers_.at(i); }
  const TransformerLayer<T>& layer(std::size_t i) const { return layers_.at(i); }

  const ParamPtr<T>& token_embedding() const { return tok_emb_; }
  const ParamPtr<T>& position_embedding() const { return pos_emb_; }
  const ParamPtr<T>& final_gamma() const { return lnf_gamma_; }
  const ParamPtr<T>& final_beta() const { return lnf_beta_; }
  const ParamPtr<T>& head() const { return head_; }

  // Causal forward pass. Throws IndexError on out-of-vocabulary ids and
  // DimensionError on sequences longer than max_seq_len.
  ForwardResult<T> forward(Tape<T>& tape, const TokenBatch& tokens) const;
  // Inference helper: logits shaped [batch × seq × vocab].
  Tensor<T> logits(const TokenBatch& tokens) const;

  std::vector<std::string> slot_paths() const;
  // Throws ConfigError for unknown paths.
  LinearSlot<T>& slot(const std::string& path);
  const LinearSlot<T>& slot(const std::string& path) const;

  // Throws ConfigError if the slot does not exist or dims differ.
  void attach_adapter(const std::string& path, AdapterPtr<T> adapter);
  void detach_adapters();
  bool has_adapters() const;

  // Every backbone tensor, in a fixed order.
  std::vector<ParamPtr<T>> backbone_params() const;
  // Unique adapter tensors currently attached, in slot order.
  std::vector<ParamPtr<T>> adapter_params() const;
  // Quantized weights and routers stay frozen regardless of `trainable`.
  void set_backbone_trainable(bool trainable);

  // Exact element count over backbone and attached adapters.
  std::size_t param_count(bool trainable_only) const;

  // Independent deep copy of the backbone, without adapters.
  TransformerModel clone() const;

 private:
  TransformerConfig config_;
  ParamPtr<T> tok_emb_, pos_emb_;
  std::vector<TransformerLayer<T>> layers_;
  ParamPtr<T> lnf_gamma_, lnf_beta_;
  ParamPtr<T> head_;
};

}  // namespace calora
