#include "calora/training/training.hpp"

#include <cmath>
#include <iomanip>

#include "json.hpp"

namespace calora {

const char* to_string(DistillTarget t) { return t == DistillTarget::kLogits ? "logits" : "hidden"; }

DistillTarget distill_target_from_string(const std::string& name) {
  if (name == "logits") return DistillTarget::kLogits;
  if (name == "hidden") return DistillTarget::kHidden;
  throw ConfigError("unknown distill target '" + name + "'");
}

void TrainConfig::validate() const {
  if (!std::isfinite(lr) || lr < 0) throw ConfigError("lr must be finite and non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!std::isfinite(alpha) || alpha < 0) throw ConfigError("alpha must be >= 0");
  if (!std::isfinite(weight_decay) || weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (eval_batch == 0) throw ConfigError("eval_batch must be positive");
}

std::string Mechanisms::label() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (on) out += (out.empty() ? "" : "+") + std::string(name);
  };
  add(inherit, "inherit");
  add(recover, "recover");
  add(distill, "distill");
  return out.empty() ? "none" : out;
}

std::vector<Mechanisms> ablation_cells() {
  return {{false, false, false}, {true, false, false}, {false, true, false}, {false, false, true},
          {true, true, false},   {true, false, true},  {false, true, true},  {true, true, true}};
}

std::string RunRecord::to_json() const {
  nlohmann::ordered_json j;
  j["method"] = method;
  j["task"] = task;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["config"] = config_text;
  j["provenance"] = provenance;
  j["mechanisms"] = {{"inherit", mechanisms.inherit}, {"recover", mechanisms.recover}, {"distill", mechanisms.distill}};
  j["trainable_params"] = trainable_params;
  j["status"] = status;
  j["final_metric"] = final_metric;
  auto& curve_j = j["curve"] = nlohmann::ordered_json::array();
  for (const EvalPoint& p : curve) curve_j.push_back({{"step", p.step}, {"metric", p.metric}});
  auto& losses_j = j["losses"] = nlohmann::ordered_json::array();
  for (const LossReport& r : losses) {
    nlohmann::ordered_json o{{"step", r.step},
                             {"task_loss", r.task_loss},
                             {"distill_loss", r.distill_loss},
                             {"combined_loss", r.combined_loss}};
    o["eval_metric"] = r.eval_metric ? nlohmann::ordered_json(*r.eval_metric) : nlohmann::ordered_json();
    losses_j.push_back(std::move(o));
  }
  return j.dump(1);
}

RunRecord RunRecord::from_json(const std::string& text) {
  RunRecord r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.method = j.at("method").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.config_text = j.at("config").get<std::string>();
    r.provenance = j.at("provenance").get<std::string>();
    r.mechanisms.inherit = j.at("mechanisms").at("inherit").get<bool>();
    r.mechanisms.recover = j.at("mechanisms").at("recover").get<bool>();
    r.mechanisms.distill = j.at("mechanisms").at("distill").get<bool>();
    r.trainable_params = j.at("trainable_params").get<std::size_t>();
    r.status = j.at("status").get<std::string>();
    r.final_metric = j.at("final_metric").get<double>();
    for (const auto& p : j.at("curve")) r.curve.push_back({p.at("step").get<long>(), p.at("metric").get<double>()});
    for (const auto& o : j.at("losses")) {
      LossReport l;
      l.step = o.at("step").get<long>();
      l.task_loss = o.at("task_loss").get<double>();
      l.distill_loss = o.at("distill_loss").get<double>();
      l.combined_loss = o.at("combined_loss").get<double>();
      if (!o.at("eval_metric").is_null()) l.eval_metric = o.at("eval_metric").get<double>();
      r.losses.push_back(l);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed run record: ") + e.what());
  }
  return r;
}

LossCsvWriter::LossCsvWriter(std::ostream& out) : out_(&out) {
  *out_ << "step,task_loss,distill_loss,combined_loss,eval_metric\n";
}

void LossCsvWriter::operator()(const LossReport& r) {
  *out_ << r.step << ',' << std::setprecision(17) << r.task_loss << ',' << r.distill_loss << ','
        << r.combined_loss << ',';
  if (r.eval_metric) *out_ << *r.eval_metric;
  *out_ << '\n';
}

TaskData make_task_data(SyntheticCorpus train, SyntheticCorpus eval) {
  if (train.samples.empty()) throw ConfigError("training corpus is empty");
  if (eval.samples.empty()) throw ConfigError("eval corpus is empty");
  TaskData d;
  d.seq_len = std::max(train.max_input_len(), eval.max_input_len());
  d.train = std::move(train);
  d.eval = std::move(eval);
  return d;
}

namespace {

std::vector<std::size_t> last_rows(const TokenBatch& b) {
  std::vector<std::size_t> rows(b.batch);
  for (std::size_t i = 0; i < b.batch; ++i) rows[i] = (i + 1) * b.seq - 1;
  return rows;
}

template <typename T>
std::vector<Tensor<T>> snapshot(const std::vector<ParamPtr<T>>& params) {
  std::vector<Tensor<T>> out;
  for (const auto& p : params) out.push_back(p->value);
  return out;
}

template <typename T>
void verify_unchanged(const std::vector<ParamPtr<T>>& params, const std::vector<Tensor<T>>& before) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!bitwise_equal(params[i]->value, before[i])) {
      throw ContractError("frozen backbone tensor '" + params[i]->name + "' changed during adapter training");
    }
  }
}

template <typename T>
struct AdapterGuard {
  TransformerModel<T>& model;
  ~AdapterGuard() { model.detach_adapters(); }
};

struct LoopInputs {
  const TaskData* data;
  const TrainConfig* cfg;
  const LossSink* sink;
};

// Shared optimization loop. `teacher` is non-null when distilling.
template <typename T>
void run_loop(TransformerModel<T>& model, std::vector<ParamPtr<T>> params, const LoopInputs& in,
              const TransformerModel<T>* teacher, RunRecord& record) {
  const TaskData& data = *in.data;
  const TrainConfig& cfg = *in.cfg;
  cfg.validate();
  record.seed = cfg.seed;
  record.task = data.train.task;
  for (const auto& p : params) p->zero_grad();
  AdamW<T> opt(std::move(params), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(cfg.seed, kBatchStream);
  const std::size_t n_train = data.train.samples.size();
  std::vector<std::size_t> idx(cfg.batch_size);

  auto eval_now = [&](long step) {
    const double m = evaluate(model, data.eval, data.seq_len, cfg.eval_batch);
    record.curve.push_back({step, m});
    return m;
  };
  eval_now(0);
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    for (std::size_t& i : idx) i = rng.uniform_int(n_train);
    const TokenBatch batch = make_batch(data.train, idx, data.seq_len);
    const std::vector<std::size_t> targets = batch_targets(data.train, idx);
    Tape<T> tape;
    const ForwardResult<T> out = model.forward(tape, batch);
    Var<T> tl = task_loss(out, batch, targets);
    Var<T> combined = tl;
    double dl_value = 0.0;
    if (teacher != nullptr) {
      const Tensor<T> target = teacher_output(*teacher, batch, cfg.distill_target);
      Var<T> dl = distill_loss(cfg.distill_target == DistillTarget::kLogits ? out.logits : out.hidden, target);
      combined = ag::add(tl, ag::scale(dl, static_cast<T>(cfg.alpha)));
      dl_value = static_cast<double>(dl.value().item());
    }
    const double tl_value = static_cast<double>(tl.value().item());
    const double combined_tape = static_cast<double>(combined.value().item());
    if (!std::isfinite(combined_tape)) {
      throw TrainingError(static_cast<long>(step), "non-finite loss");
    }
    LossReport r;
    r.step = static_cast<long>(step);
    r.task_loss = tl_value;
    r.distill_loss = dl_value;
    r.combined_loss = tl_value + cfg.alpha * dl_value;
    if (std::abs(r.combined_loss - combined_tape) > 1e-5 * std::max(1.0, std::abs(combined_tape))) {
      throw InternalError("combined objective on the tape disagrees with its components");
    }
    tape.backward(combined);
    opt.step();
    opt.zero_grad();
    const bool at_interval = cfg.eval_interval != 0 && step % cfg.eval_interval == 0;
    if (at_interval || step == cfg.max_steps) r.eval_metric = eval_now(r.step);
    if (*in.sink) (*in.sink)(r);
    record.losses.push_back(r);
  }
  record.final_metric = record.curve.back().metric;
}

}  // namespace

template <typename T>
Var<T> task_loss(const ForwardResult<T>& out, const TokenBatch& batch, std::span<const std::size_t> targets) {
  if (targets.size() != batch.batch) throw DimensionError("one target per sequence required");
  const std::vector<std::size_t> rows = last_rows(batch);
  return ag::softmax_cross_entropy(ag::select_rows(out.logits, rows), targets);
}

template <typename T>
double evaluate(const TransformerModel<T>& model, const SyntheticCorpus& eval, std::size_t seq_len,
                std::size_t eval_batch) {
  if (eval.samples.empty()) throw ConfigError("evaluate: eval corpus is empty");
  const std::size_t vocab = model.config().vocab_size;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < eval.samples.size(); start += eval_batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(eval.samples.size(), start + eval_batch); ++i) idx.push_back(i);
    const TokenBatch batch = make_batch(eval, idx, seq_len);
    Tape<T> tape(false);
    const Tensor<T>& logits = model.forward(tape, batch).logits.value();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const T* row = &logits[((b + 1) * seq_len - 1) * vocab];
      std::size_t best = 0;
      for (std::size_t v = 1; v < vocab; ++v)
        if (row[v] > row[best]) best = v;
      correct += best == eval.samples[idx[b]].target;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(eval.samples.size());
}

template <typename T>
double evaluate_with(TransformerModel<T>& model, const AdapterSet<T>& set, const SyntheticCorpus& eval,
                     std::size_t seq_len) {
  if (model.has_adapters()) throw ConfigError("evaluate_with: model already has adapters attached");
  AdapterGuard<T> guard{model};
  set.attach(model);
  return evaluate(model, eval, seq_len);
}

template <typename T>
Var<T> distill_loss(const Var<T>& student_out, const Tensor<T>& teacher_out) {
  if (student_out.shape() != teacher_out.shape()) {
    throw DimensionError("distillation: student output " + shape_to_string(student_out.shape()) +
                         " vs teacher output " + shape_to_string(teacher_out.shape()));
  }
  return ag::mse(student_out, student_out.tape().constant(teacher_out));
}

template <typename T>
Tensor<T> teacher_output(const TransformerModel<T>& teacher, const TokenBatch& batch, DistillTarget target) {
  Tape<T> tape(false);
  const ForwardResult<T> out = teacher.forward(tape, batch);
  return target == DistillTarget::kLogits ? out.logits.value() : out.hidden.value();
}

template <typename T>
RunRecord full_finetune(TransformerModel<T>& model, const TaskData& data, const TrainConfig& cfg,
                        const LossSink& sink) {
  model.set_backbone_trainable(true);
  std::vector<ParamPtr<T>> params;
  for (const auto& p : model.backbone_params())
    if (p->requires_grad) params.push_back(p);
  RunRecord record;
  record.method = "full-finetune";
  record.trainable_params = model.param_count(true);
  run_loop(model, std::move(params), {&data, &cfg, &sink}, static_cast<const TransformerModel<T>*>(nullptr), record);
  return record;
}

template <typename T>
RunRecord train_lora(TransformerModel<T>& model, AdapterSet<T>& set, const TaskData& data, const TrainConfig& cfg,
                     const LossSink& sink) {
  if (model.has_adapters()) throw ConfigError("train_lora: model already has adapters attached");
  model.set_backbone_trainable(false);
  const std::vector<ParamPtr<T>> backbone = model.backbone_params();
  const std::vector<Tensor<T>> before = snapshot(backbone);
  AdapterGuard<T> guard{model};
  set.attach(model);
  for (const auto& p : set.params()) p->requires_grad = true;
  RunRecord record;
  record.method = "lora";
  record.provenance = set.provenance;
  record.trainable_params = model.param_count(true);
  run_loop(model, set.params(), {&data, &cfg, &sink}, static_cast<const TransformerModel<T>*>(nullptr), record);
  verify_unchanged(backbone, before);
  return record;
}

template <typename T>
AdapterSet<T> fresh_lora(const TransformerModel<T>& model, const std::string& task, const AdapterConfig& acfg,
                         std::uint64_t seed) {
  Rng rng(seed, kLoraInitStream);
  return make_lora_set(model, task, acfg.lora_slots, acfg.lora_rank, rng);
}

template <typename T>
RunRecord train_calora(const Teacher<T>* teacher, TransformerModel<T>& student, const TaskData& data,
                       const TrainConfig& cfg, const AdapterConfig& acfg, Mechanisms mech, AdapterSet<T>* trained,
                       const LossSink& sink) {
  const bool has_teacher = teacher != nullptr && teacher->model != nullptr;
  if (mech.distill && !has_teacher) throw ConfigError("distillation requested without a teacher model");
  if (mech.inherit && (teacher == nullptr || teacher->adapters == nullptr)) {
    throw ConfigError("inheritance requested without teacher adapters");
  }
  if (student.has_adapters()) throw ConfigError("train_calora: student already has adapters attached");
  if (has_teacher && teacher->model == &student) throw ConfigError("teacher and student must be distinct models");

  AdapterSet<T> set = mech.inherit ? inherit(*teacher->adapters, student, teacher->checkpoint_id)
                                   : fresh_lora(student, data.train.task, acfg, cfg.seed);
  set.task = data.train.task;
  if (mech.recover) {
    Rng rng(cfg.seed, kRecoveryInitStream);
    add_recovery(set, student, acfg.recovery_slots, acfg.recovery_rank, rng, acfg.recovery_sigma);
  }
  student.set_backbone_trainable(false);
  const std::vector<ParamPtr<T>> backbone = student.backbone_params();
  const std::vector<Tensor<T>> before = snapshot(backbone);
  std::vector<Tensor<T>> teacher_before;
  if (has_teacher) teacher_before = snapshot(teacher->model->backbone_params());

  RunRecord record;
  {
    AdapterGuard<T> guard{student};
    set.attach(student);
    record.method = "calora";
    record.mechanisms = mech;
    record.provenance = set.provenance;
    record.trainable_params = student.param_count(true);
    run_loop(student, set.params(), {&data, &cfg, &sink}, mech.distill ? teacher->model : nullptr, record);
  }
  verify_unchanged(backbone, before);
  if (has_teacher) verify_unchanged(teacher->model->backbone_params(), teacher_before);
  if (trained != nullptr) *trained = std::move(set);
  return record;
}

template <typename T>
double zero_shot_transfer_eval(const AdapterSet<T>& teacher_set, TransformerModel<T>& compressed,
                               const SyntheticCorpus& eval, std::size_t seq_len) {
  const AdapterSet<T> copied = inherit(teacher_set, compressed, "zero-shot");
  return evaluate_with(compressed, copied, eval, seq_len);
}

#define CALORA_INSTANTIATE(T)                                                                                  \
  template Var<T> task_loss(const ForwardResult<T>&, const TokenBatch&, std::span<const std::size_t>);        \
  template double evaluate(const TransformerModel<T>&, const SyntheticCorpus&, std::size_t, std::size_t);     \
  template double evaluate_with(TransformerModel<T>&, const AdapterSet<T>&, const SyntheticCorpus&,           \
                                std::size_t);                                                                 \
  template Var<T> distill_loss(const Var<T>&, const Tensor<T>&);                                              \
  template Tensor<T> teacher_output(const TransformerModel<T>&, const TokenBatch&, DistillTarget);            \
  template RunRecord full_finetune(TransformerModel<T>&, const TaskData&, const TrainConfig&, const LossSink&); \
  template RunRecord train_lora(TransformerModel<T>&, AdapterSet<T>&, const TaskData&, const TrainConfig&,    \
                                const LossSink&);                                                             \
  template AdapterSet<T> fresh_lora(const TransformerModel<T>&, const std::string&, const AdapterConfig&,      \
                                    std::uint64_t);                                                           \
  template RunRecord train_calora(const Teacher<T>*, TransformerModel<T>&, const TaskData&, const TrainConfig&, \
                                  const AdapterConfig&, Mechanisms, AdapterSet<T>*, const LossSink&);         \
  template double zero_shot_transfer_eval(const AdapterSet<T>&, TransformerModel<T>&, const SyntheticCorpus&,  \
                                          std::size_t);

CALORA_INSTANTIATE(float)
CALORA_INSTANTIATE(double)
#undef CALORA_INSTANTIATE

}  // namespace calora
