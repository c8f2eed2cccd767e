#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "calora/model/transformer.hpp"

namespace calora {

struct QuantizeStep {
  int bits = 8;
};
struct PruneUnstructuredStep {
  double sparsity = 0.5;
};
struct PruneStructuredStep {
  double ffn_keep = 1.0;
  double heads_keep = 1.0;
};
struct MoEfyStep {
  std::size_t n_experts = 4;
  std::size_t top_k = 1;
  RouterMode router = RouterMode::kOracle;
};

using CompressionStep = std::variant<QuantizeStep, PruneUnstructuredStep, PruneStructuredStep, MoEfyStep>;

std::string step_to_string(const CompressionStep& step);

// Ordered pipeline. Text form: steps separated by ';', each
//   quantize(bits=8) | prune_unstructured(sparsity=0.5)
//   | prune_structured(ffn_keep=0.5,heads_keep=0.75)
//   | moefy(experts=4,top_k=1,router=oracle)
// "none" or an empty string is the empty pipeline.
struct CompressionSpec {
  std::vector<CompressionStep> steps;

  // Throws ConfigError on out-of-range arguments and on Quantize listed
  // before MoEfy (experts must be formed before the FFN is quantized).
  void validate() const;
  static CompressionSpec parse(const std::string& text);
  std::string to_string() const;
  bool empty() const { return steps.empty(); }
};

// Per-output-channel symmetric quantization of a weight matrix:
// scale[row] = max|W[row]| / (2^(bits-1) - 1), codes rounded to nearest with
// ties to even, and |W - code·scale| <= scale/2 for every element.
QuantizedWeight quantize_weight(const Tensor<float>& w, int bits);
QuantizedWeight quantize_weight(const Tensor<double>& w, int bits);

// Throws ConfigError if the slot is already quantized or bits is not 8 or 4.
template <typename T>
void quantize_slot(LinearSlot<T>& slot, int bits);

// Masks exactly floor(sparsity·N) of the N slot weights of the whole model,
// smallest |w| first, ties broken by (slot order, element index).
template <typename T>
void prune_unstructured(TransformerModel<T>& model, double sparsity);

// Keep counts are round(fraction·n); a count of 0 throws ConfigError.
// FFN neurons are removed physically; heads are masked so attention dims
// stay intact. A fraction of 1 leaves the model untouched.
template <typename T>
void prune_structured(TransformerModel<T>& model, double ffn_keep, double heads_keep);

// Importance scores used by prune_structured, exposed for testing.
template <typename T>
std::vector<double> ffn_neuron_importance(const TransformerLayer<T>& layer);
template <typename T>
std::vector<double> head_importance(const TransformerLayer<T>& layer, std::size_t n_heads);

// Balanced cosine k-means over W_in rows (at most 50 iterations, seeded);
// returns neuron -> expert with exactly d_ff/E neurons per expert.
template <typename T>
std::vector<std::size_t> balanced_cluster(const Tensor<T>& w_in, std::size_t n_experts, Rng& rng,
                                          std::size_t max_iters = 50);

template <typename T>
void moefy(TransformerModel<T>& model, std::size_t n_experts, std::size_t top_k, RouterMode router,
           Rng& rng);

struct StepReport {
  std::string step;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::size_t bytes_before = 0;
  std::size_t bytes_after = 0;
  double mac_fraction = 1.0;  // MACs after / MACs before this step
};

struct CompressionReport {
  std::vector<StepReport> steps;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::size_t bytes_before = 0;
  std::size_t bytes_after = 0;
  double mac_fraction = 1.0;  // product over steps

  double size_ratio() const {
    return bytes_before == 0 ? 1.0 : static_cast<double>(bytes_after) / static_cast<double>(bytes_before);
  }
  double ideal_speedup() const { return 1.0 / mac_fraction; }
  std::string to_json() const;
};

// Parameters that still carry information: stored elements minus masked ones.
template <typename T>
std::size_t effective_param_count(const TransformerModel<T>& model);

// Weight storage relative to a 16-bit baseline: 2 bytes per float element,
// 1 byte per quantized code plus 4 bytes per row scale. Routing metadata is
// not counted.
template <typename T>
std::size_t storage_bytes16(const TransformerModel<T>& model);

// Multiply-accumulates of the linear slots for one token, in 16-bit MAC
// units: d_in·d_out·density, times bits/16 when quantized, times top_k/E for
// MoE FFN slots.
template <typename T>
double mac_cost(const TransformerModel<T>& model);

// Applies the steps in order. Errors are rethrown with the step index.
template <typename T>
CompressionReport compress(TransformerModel<T>& model, const CompressionSpec& spec, std::uint64_t seed);

}  // namespace calora
