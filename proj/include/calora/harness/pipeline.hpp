#pragma once

// End-to-end experiment steps behind the CLI. Every step reads and writes
// artifacts under the config's output directory:
//
//   backbone.calr  pretrain_log.csv         pretrain
//   teacher.calr   teacher_log.csv          train-teacher-lora
//   compressed.calr compressed_<F>.calr     compress (main spec, families)
//   compression_report.json
//   runs/*.json    runs.jsonl               every command (append-only index)
//   ablation.md  ablation.json  ablate/     ablate
//   convergence.csv  convergence/           convergence
//   storage.json  storage.md  storage/      storage-report

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "calora/compression/compression.hpp"
#include "calora/harness/config.hpp"
#include "calora/training/training.hpp"

namespace calora {

using Model = TransformerModel<float>;
using Adapters = AdapterSet<float>;

inline const std::string kTeacherId = "teacher.calr";

struct Workspace {
  ExperimentConfig config;
  std::filesystem::path dir;

  explicit Workspace(ExperimentConfig cfg);
  std::filesystem::path path(const std::string& name) const { return dir / name; }
  // Fills config hash/text and task into the record, writes runs/<name>.json
  // and appends one line to runs.jsonl.
  void save_record(RunRecord& record, const std::string& name) const;
  void stamp(RunRecord& record) const;
};

// Common padded length: every task's longest prefixed input.
std::size_t context_len(const ExperimentConfig& cfg);
TaskData downstream_data(const ExperimentConfig& cfg);
TaskData pretrain_data(const ExperimentConfig& cfg);

RunRecord run_pretrain(const Workspace& ws);
Model load_model(const std::filesystem::path& path);

RunRecord run_teacher(const Workspace& ws);
// Backbone with the teacher LoRA loaded (not attached).
struct TeacherArtifacts {
  Model model;
  Adapters adapters;
};
TeacherArtifacts load_teacher(const Workspace& ws);

struct CompressOutcome {
  CompressionReport report;
  double metric_before = 0;  // backbone alone on the downstream eval split
  double metric_after = 0;
};
// Compresses the backbone with `spec` and saves it to `file`.
CompressOutcome run_compress(const Workspace& ws, const CompressionSpec& spec, const std::string& file);
// The main spec plus every convergence family.
std::vector<CompressOutcome> run_compress_all(const Workspace& ws);

// Teacher LoRA copied onto the compressed model, evaluated without training.
RunRecord run_inherit_eval(const Workspace& ws, const std::string& compressed_file = "compressed.calr");

// Named training variants on top of the mechanism flags.
struct Variant {
  std::string name;  // file stem, e.g. "inherit+recover+distill" or "lora+lora"
  std::string method;
  Mechanisms mech;
  AdapterConfig adapters;
};
Variant mechanism_variant(const ExperimentConfig& cfg, Mechanisms mech);
// "lora_lora" or "large_lora".
Variant baseline_variant(const ExperimentConfig& cfg, const std::string& which);

// One run on a fresh copy of the student and teacher. Adapters trained are
// returned through `trained` when given.
RunRecord run_variant(const ExperimentConfig& cfg, const TeacherArtifacts& teacher, const Model& student,
                      const TaskData& data, const Variant& v, std::uint64_t seed, const LossSink& sink = {},
                      Adapters* trained = nullptr);

RunRecord run_train_calora(const Workspace& ws, Mechanisms mech, std::uint64_t seed);

// Backbone from `model_file`, optionally with adapters for the task from
// `adapter_file` attached.
RunRecord run_eval(const Workspace& ws, const std::filesystem::path& model_file,
                   const std::optional<std::filesystem::path>& adapter_file, const std::string& task);

struct Job {
  std::string name;
  Variant variant;
  std::uint64_t seed = 0;
};

// Called after each finished job (serialized; order follows completion).
using JobProgress = std::function<void(std::size_t done, std::size_t total, const Job&, const RunRecord&)>;

// Runs jobs on a bounded pool of `workers` threads (each single-threaded in
// the kernels). A job that throws yields a record with status "failed: ...".
// Results come back in job order.
std::vector<RunRecord> run_jobs(const ExperimentConfig& cfg, const TeacherArtifacts& teacher, const Model& student,
                                const TaskData& data, const std::vector<Job>& jobs, std::size_t workers,
                                const JobProgress& progress = {});

double median(std::vector<double> xs);

struct AblationRow {
  std::string name;
  std::optional<Mechanisms> mech;  // empty for the baselines
  std::vector<RunRecord> runs;

  std::size_t failed() const;
  // Median final metric over successful seeds; nullopt if none succeeded.
  std::optional<double> headline() const;
};

struct AblationResult {
  std::string task;
  std::vector<AblationRow> cells;      // table order
  std::vector<AblationRow> baselines;  // configured order
  std::string to_markdown() const;
  std::string to_json() const;
};

AblationResult run_ablate(const Workspace& ws, const JobProgress& progress = {});

struct CurveRow {
  std::string family;
  std::string method;
  std::uint64_t seed = 0;
  long step = 0;
  double metric = 0;
  friend bool operator==(const CurveRow&, const CurveRow&) = default;
};

std::string curves_to_csv(const std::vector<CurveRow>& rows);
// Throws IoError on malformed input.
std::vector<CurveRow> curves_from_csv(const std::string& text);

// vanilla (no mechanisms), inherited (inherit only), calora (all three), for
// every family in the config, same budget and seeds.
std::vector<CurveRow> run_convergence(const Workspace& ws, const JobProgress& progress = {});

struct StorageStrategy {
  std::string name;
  std::size_t base_bytes = 0;
  std::vector<std::size_t> per_task_bytes;
  std::size_t total_bytes = 0;
};

struct StorageReport {
  std::size_t n_tasks = 0;
  std::size_t backbone_bytes = 0;     // f32 backbone file
  std::size_t backbone_q8_bytes = 0;  // same backbone, linear slots 8-bit
  std::size_t compressed_bytes = 0;   // the configured compressed backbone
  std::size_t lora_bytes = 0;         // one task's LoRA file
  std::size_t calora_bytes = 0;       // one task's LoRA + recovery file
  std::vector<StorageStrategy> strategies;

  const StorageStrategy& strategy(const std::string& name) const;
  std::string to_json() const;
  std::string to_markdown() const;
};

// Byte counts measured from files: the backbone and compressed checkpoints,
// an 8-bit copy of the backbone, and one adapter file per task with the
// configured shapes. Missing inputs raise IoError.
StorageReport run_storage_report(const Workspace& ws, std::size_t n_tasks);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace calora
