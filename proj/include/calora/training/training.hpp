#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "calora/adapters/adapter_set.hpp"
#include "calora/tasks/tasks.hpp"
#include "calora/tensor/optim.hpp"

namespace calora {

enum class DistillTarget { kLogits, kHidden };
const char* to_string(DistillTarget t);
DistillTarget distill_target_from_string(const std::string& name);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t max_steps = 2000;
  double weight_decay = 1e-2;
  double alpha = 0.05;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 100;  // 0 evaluates only at the start and end
  DistillTarget distill_target = DistillTarget::kLogits;
  std::size_t eval_batch = 256;

  // Throws ConfigError on negative alpha, zero batch, non-finite lr.
  void validate() const;
};

struct LossReport {
  long step = 0;
  double task_loss = 0;
  double distill_loss = 0;
  // task_loss + alpha·distill_loss, evaluated in double from the components.
  double combined_loss = 0;
  std::optional<double> eval_metric;
};

struct EvalPoint {
  long step = 0;
  double metric = 0;
};

struct Mechanisms {
  bool inherit = false;
  bool recover = false;
  bool distill = false;

  // "none", or a '+'-joined subset of inherit, recover, distill.
  std::string label() const;
  friend bool operator==(const Mechanisms&, const Mechanisms&) = default;
};

// The eight cells in the ablation table's row order.
std::vector<Mechanisms> ablation_cells();

struct RunRecord {
  std::string method;
  std::string task;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string config_text;
  std::string provenance = kScratch;
  Mechanisms mechanisms;
  std::size_t trainable_params = 0;
  std::vector<LossReport> losses;
  std::vector<EvalPoint> curve;  // step 0, every eval_interval, and the last step
  double final_metric = 0;
  std::string status = "ok";

  std::string to_json() const;
  static RunRecord from_json(const std::string& text);
};

// Where the loop sends per-step reports (e.g. a CSV writer); may be empty.
using LossSink = std::function<void(const LossReport&)>;

// Writes `step,task_loss,distill_loss,combined_loss,eval_metric` rows.
class LossCsvWriter {
 public:
  explicit LossCsvWriter(std::ostream& out);
  void operator()(const LossReport& r);

 private:
  std::ostream* out_;
};

struct TaskData {
  SyntheticCorpus train;
  SyntheticCorpus eval;
  std::size_t seq_len = 0;  // common padded length
};

TaskData make_task_data(SyntheticCorpus train, SyntheticCorpus eval);

// Cross entropy at the final position of every sequence.
template <typename T>
Var<T> task_loss(const ForwardResult<T>& out, const TokenBatch& batch, std::span<const std::size_t> targets);

// Exact-match accuracy of the argmax over the vocabulary at the final
// position (ties to the lower token id).
template <typename T>
double evaluate(const TransformerModel<T>& model, const SyntheticCorpus& eval, std::size_t seq_len,
                std::size_t eval_batch = 256);

// Attaches `set`, evaluates, detaches.
template <typename T>
double evaluate_with(TransformerModel<T>& model, const AdapterSet<T>& set, const SyntheticCorpus& eval,
                     std::size_t seq_len);

// Mean squared difference between a student output and a fixed teacher
// output, over every element. Throws DimensionError on shape mismatch.
template <typename T>
Var<T> distill_loss(const Var<T>& student_out, const Tensor<T>& teacher_out);

// Teacher model output for the batch on a grad-free tape.
template <typename T>
Tensor<T> teacher_output(const TransformerModel<T>& teacher, const TokenBatch& batch, DistillTarget target);

// All trainable backbone parameters (quantized weights stay frozen).
template <typename T>
RunRecord full_finetune(TransformerModel<T>& model, const TaskData& data, const TrainConfig& cfg,
                        const LossSink& sink = {});

// Trains only `set` on a frozen backbone; the backbone is verified bitwise
// unchanged afterwards (ContractError otherwise). Adapters are detached on return.
template <typename T>
RunRecord train_lora(TransformerModel<T>& model, AdapterSet<T>& set, const TaskData& data,
                     const TrainConfig& cfg, const LossSink& sink = {});

struct AdapterConfig {
  std::vector<SlotKind> lora_slots{SlotKind::kQuery, SlotKind::kKey};
  std::size_t lora_rank = 8;
  std::vector<SlotKind> recovery_slots{std::begin(kAllSlotKinds), std::end(kAllSlotKinds)};
  std::size_t recovery_rank = 8;
  ag::Activation recovery_sigma = ag::Activation::kRelu;
};

// Fixed RNG sub-streams so that runs differing only in mechanisms share the
// same LoRA initialization and batch order.
inline constexpr std::uint64_t kLoraInitStream = 11;
inline constexpr std::uint64_t kRecoveryInitStream = 12;
inline constexpr std::uint64_t kBatchStream = 13;

template <typename T>
AdapterSet<T> fresh_lora(const TransformerModel<T>& model, const std::string& task, const AdapterConfig& acfg,
                         std::uint64_t seed);

// Uncompressed model with its trained adapters, used for inheritance and as
// the distillation target. The model must have the adapters attached.
template <typename T>
struct Teacher {
  const TransformerModel<T>* model = nullptr;
  const AdapterSet<T>* adapters = nullptr;
  std::string checkpoint_id = "teacher";
};

// Joint objective task + alpha·distill over the student's LoRA (inherited or
// fresh) and, with `recover`, recovery modules on the configured slots. The
// student backbone stays frozen and is verified bitwise unchanged. Throws
// ConfigError when distill or inherit is requested without a teacher.
template <typename T>
RunRecord train_calora(const Teacher<T>* teacher, TransformerModel<T>& student, const TaskData& data,
                       const TrainConfig& cfg, const AdapterConfig& acfg, Mechanisms mech,
                       AdapterSet<T>* trained = nullptr, const LossSink& sink = {});

// Metric of the compressed model with the teacher's LoRA copied onto it,
// without any training.
template <typename T>
double zero_shot_transfer_eval(const AdapterSet<T>& teacher_set, TransformerModel<T>& compressed,
                               const SyntheticCorpus& eval, std::size_t seq_len);

}  // namespace calora
