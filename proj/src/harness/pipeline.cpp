#include "calora/harness/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "calora/model/serialize.hpp"
#include "calora/tensor/kernels.hpp"
#include "json.hpp"

namespace calora {

namespace fs = std::filesystem;
using nlohmann::json;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw IoError("cannot append to '" + path.string() + "'");
  out << line << '\n';
}

void require(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing artifact '" + path.string() + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::size_t file_bytes(const fs::path& path) {
  require(path);
  return static_cast<std::size_t>(fs::file_size(path));
}

}  // namespace

Workspace::Workspace(ExperimentConfig cfg) : config(std::move(cfg)), dir(config.out) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

void Workspace::stamp(RunRecord& record) const {
  record.config_hash = config.hash();
  record.config_text = config.canonical();
}

void Workspace::save_record(RunRecord& record, const std::string& name) const {
  stamp(record);
  const std::string file = "runs/" + name + ".json";
  write_text(path(file), record.to_json());
  json line = {{"file", file},
               {"method", record.method},
               {"task", record.task},
               {"seed", record.seed},
               {"mechanisms", record.mechanisms.label()},
               {"config_hash", record.config_hash},
               {"final_metric", record.final_metric},
               {"status", record.status}};
  append_line(path("runs.jsonl"), line.dump());
}

std::size_t context_len(const ExperimentConfig& cfg) {
  std::size_t n = 0;
  for (const TaskSpec& t : cfg.tasks) n = std::max(n, t.max_len + 2);
  return n;
}

TaskData downstream_data(const ExperimentConfig& cfg) {
  const TaskSpec spec = cfg.downstream();
  TaskData d = make_task_data(generate(spec, Split::kTrain), generate(spec, Split::kEval));
  if (d.train.samples.empty()) throw ConfigError("task '" + spec.id + "' has an empty train split");
  d.seq_len = context_len(cfg);
  return d;
}

TaskData pretrain_data(const ExperimentConfig& cfg) {
  SyntheticCorpus mix = pretrain_mixture(cfg.tasks, cfg.task_weights, cfg.pretrain_size, cfg.seed);
  SyntheticCorpus eval;
  eval.task = "mixture";
  eval.split = to_string(Split::kEval);
  for (TaskSpec t : cfg.tasks) {
    t.prefix = true;  // the mixture always carries task prefixes
    for (Sample& s : generate(t, Split::kEval).samples) eval.samples.push_back(std::move(s));
  }
  TaskData d = make_task_data(std::move(mix), std::move(eval));
  d.seq_len = context_len(cfg);
  return d;
}

Model load_model(const fs::path& path) { return model_from_checkpoint<float>(Checkpoint::load(path)); }

RunRecord run_pretrain(const Workspace& ws) {
  const ExperimentConfig& cfg = ws.config;
  Rng rng(cfg.seed);
  Model model(cfg.model_config(), rng);
  const TaskData data = pretrain_data(cfg);
  TrainConfig tc = cfg.pretrain;
  tc.seed = cfg.seed;
  std::ostringstream log;
  LossCsvWriter writer(log);
  RunRecord r = full_finetune(model, data, tc, std::ref(writer));
  r.method = "pretrain";
  model_to_checkpoint(model).save(ws.path("backbone.calr"));
  write_text(ws.path("pretrain_log.csv"), log.str());
  ws.save_record(r, "pretrain");
  return r;
}

RunRecord run_teacher(const Workspace& ws) {
  const ExperimentConfig& cfg = ws.config;
  Model model = load_model(ws.path("backbone.calr"));
  const TaskData data = downstream_data(cfg);
  Adapters set = fresh_lora(model, cfg.task, cfg.adapters, cfg.seed);
  TrainConfig tc = cfg.teacher;
  tc.seed = cfg.seed;
  std::ostringstream log;
  LossCsvWriter writer(log);
  RunRecord r = train_lora(model, set, data, tc, std::ref(writer));
  r.method = "teacher-lora";
  Checkpoint ckpt = adapters_to_checkpoint(set);
  ckpt.put_scalar("teacher/final_metric", r.final_metric);
  ckpt.save(ws.path(kTeacherId));
  write_text(ws.path("teacher_log.csv"), log.str());
  ws.save_record(r, "teacher-lora");
  return r;
}

TeacherArtifacts load_teacher(const Workspace& ws) {
  require(ws.path("backbone.calr"));
  require(ws.path(kTeacherId));
  TeacherArtifacts t{load_model(ws.path("backbone.calr")),
                     adapters_from_checkpoint<float>(Checkpoint::load(ws.path(kTeacherId)), ws.config.task)};
  return t;
}

CompressOutcome run_compress(const Workspace& ws, const CompressionSpec& spec, const std::string& file) {
  const ExperimentConfig& cfg = ws.config;
  Model model = load_model(ws.path("backbone.calr"));
  const TaskData data = downstream_data(cfg);
  CompressOutcome out;
  out.metric_before = evaluate(model, data.eval, data.seq_len, cfg.train.eval_batch);
  out.report = compress(model, spec, cfg.seed);
  out.metric_after = evaluate(model, data.eval, data.seq_len, cfg.train.eval_batch);
  model_to_checkpoint(model).save(ws.path(file));

  const std::string stem = fs::path(file).stem().string();
  json j = {{"file", file},
            {"spec", spec.to_string()},
            {"report", json::parse(out.report.to_json())},
            {"size_ratio", out.report.size_ratio()},
            {"ideal_speedup", out.report.ideal_speedup()},
            {"file_bytes", file_bytes(ws.path(file))},
            {"metric_before", out.metric_before},
            {"metric_after", out.metric_after}};
  write_text(ws.path(stem == "compressed" ? "compression_report.json" : "compression_report_" + stem.substr(11) + ".json"),
             j.dump(2) + "\n");

  RunRecord r;
  r.method = "compress";
  r.task = cfg.task;
  r.seed = cfg.seed;
  r.curve = {{0, out.metric_after}};
  r.final_metric = out.metric_after;
  ws.save_record(r, stem);
  return out;
}

std::vector<CompressOutcome> run_compress_all(const Workspace& ws) {
  std::vector<CompressOutcome> out{run_compress(ws, ws.config.compression, "compressed.calr")};
  for (const auto& f : ws.config.families) out.push_back(run_compress(ws, f.spec, "compressed_" + f.name + ".calr"));
  return out;
}

RunRecord run_inherit_eval(const Workspace& ws, const std::string& compressed_file) {
  const ExperimentConfig& cfg = ws.config;
  TeacherArtifacts teacher = load_teacher(ws);
  require(ws.path(compressed_file));
  Model student = load_model(ws.path(compressed_file));
  const TaskData data = downstream_data(cfg);
  RunRecord r;
  r.method = "inherit-eval";
  r.task = cfg.task;
  r.seed = cfg.seed;
  r.provenance = "inherited-from:" + kTeacherId;
  r.mechanisms.inherit = true;
  r.final_metric = zero_shot_transfer_eval(teacher.adapters, student, data.eval, data.seq_len);
  r.curve = {{0, r.final_metric}};
  ws.save_record(r, "inherit-eval_" + fs::path(compressed_file).stem().string());
  return r;
}

Variant mechanism_variant(const ExperimentConfig& cfg, Mechanisms mech) {
  return {mech.label(), "calora", mech, cfg.adapters};
}

Variant baseline_variant(const ExperimentConfig& cfg, const std::string& which) {
  Variant v;
  v.adapters = cfg.adapters;
  if (which == "lora_lora") {
    // The extra LoRA sits in the recovery position: x·D·U with identity
    // activation is a plain low-rank linear bypass.
    v.name = "lora+lora";
    v.method = "lora+lora";
    v.mech = {true, true, true};
    v.adapters.recovery_sigma = ag::Activation::kIdentity;
    v.adapters.recovery_rank = cfg.adapters.lora_rank;
    v.adapters.recovery_slots.assign(std::begin(kAllSlotKinds), std::end(kAllSlotKinds));
  } else if (which == "large_lora") {
    v.name = "large-lora";
    v.method = "large-lora";
    v.mech = {};
    v.adapters.lora_rank = cfg.large_lora_rank;
  } else {
    throw ConfigError("unknown baseline '" + which + "'");
  }
  return v;
}

RunRecord run_variant(const ExperimentConfig& cfg, const TeacherArtifacts& teacher, const Model& student,
                      const TaskData& data, const Variant& v, std::uint64_t seed, const LossSink& sink,
                      Adapters* trained) {
  Model t = teacher.model.clone();
  const Adapters tset = teacher.adapters.clone();
  tset.attach(t);
  const Teacher<float> handle{&t, &tset, kTeacherId};
  Model s = student.clone();
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  RunRecord r = train_calora(&handle, s, data, tc, v.adapters, v.mech, trained, sink);
  r.method = v.method;
  return r;
}

RunRecord run_train_calora(const Workspace& ws, Mechanisms mech, std::uint64_t seed) {
  const ExperimentConfig& cfg = ws.config;
  TeacherArtifacts teacher = load_teacher(ws);
  require(ws.path("compressed.calr"));
  const Model student = load_model(ws.path("compressed.calr"));
  const TaskData data = downstream_data(cfg);
  const Variant v = mechanism_variant(cfg, mech);
  std::ostringstream log;
  LossCsvWriter writer(log);
  Adapters trained;
  RunRecord r = run_variant(cfg, teacher, student, data, v, seed, std::ref(writer), &trained);
  const std::string name = "calora_" + v.name + "_s" + std::to_string(seed);
  write_text(ws.path("runs/" + name + "_loss.csv"), log.str());
  adapters_to_checkpoint(trained).save(ws.path("runs/" + name + ".calr"));
  ws.save_record(r, name);
  return r;
}

RunRecord run_eval(const Workspace& ws, const fs::path& model_file, const std::optional<fs::path>& adapter_file,
                   const std::string& task) {
  ExperimentConfig cfg = ws.config;
  cfg.task = task;
  cfg.validate();
  Model model = load_model(model_file);
  const TaskData data = downstream_data(cfg);
  RunRecord r;
  r.method = "eval";
  r.task = task;
  r.seed = cfg.seed;
  std::string name = "eval_" + model_file.stem().string();
  if (adapter_file) {
    const Adapters set = adapters_from_checkpoint<float>(Checkpoint::load(*adapter_file), task);
    r.provenance = set.provenance;
    r.final_metric = evaluate_with(model, set, data.eval, data.seq_len);
    name += "_" + adapter_file->stem().string();
  } else {
    r.final_metric = evaluate(model, data.eval, data.seq_len, cfg.train.eval_batch);
  }
  r.curve = {{0, r.final_metric}};
  ws.save_record(r, name + "_" + task);
  return r;
}

std::vector<RunRecord> run_jobs(const ExperimentConfig& cfg, const TeacherArtifacts& teacher, const Model& student,
                                const TaskData& data, const std::vector<Job>& jobs, std::size_t workers,
                                const JobProgress& progress) {
  std::vector<RunRecord> results(jobs.size());
  std::mutex progress_mutex;
  std::size_t done = 0;
  auto run_one = [&](std::size_t i) {
    const Job& job = jobs[i];
    try {
      results[i] = run_variant(cfg, teacher, student, data, job.variant, job.seed);
    } catch (const std::exception& e) {
      RunRecord r;
      r.method = job.variant.method;
      r.task = cfg.task;
      r.seed = job.seed;
      r.mechanisms = job.variant.mech;
      r.status = std::string("failed: ") + e.what();
      results[i] = std::move(r);
    }
    if (progress) {
      std::lock_guard<std::mutex> lock(progress_mutex);
      progress(++done, jobs.size(), job, results[i]);
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, jobs.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run_one(i);
    return results;
  }
  // Each worker writes only its own result slots; kernels stay single-threaded
  // inside workers so OpenMP teams do not nest.
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      kernels::parallel::set_threads(1);
      for (std::size_t i = next++; i < jobs.size(); i = next++) run_one(i);
    });
  }
  for (auto& t : pool) t.join();
  return results;
}

double median(std::vector<double> xs) {
  if (xs.empty()) throw ConfigError("median of an empty set");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

std::size_t AblationRow::failed() const {
  return static_cast<std::size_t>(
      std::count_if(runs.begin(), runs.end(), [](const RunRecord& r) { return r.status != "ok"; }));
}

std::optional<double> AblationRow::headline() const {
  std::vector<double> ok;
  for (const RunRecord& r : runs)
    if (r.status == "ok") ok.push_back(r.final_metric);
  if (ok.empty()) return std::nullopt;
  return median(ok);
}

namespace {

std::string cell_text(const AblationRow& row) {
  std::ostringstream s;
  if (auto h = row.headline()) {
    s << std::fixed << std::setprecision(2) << 100.0 * *h;
  } else {
    s << "failed";
  }
  if (row.failed() > 0) s << " (" << row.failed() << "/" << row.runs.size() << " failed)";
  return s.str();
}

json row_json(const AblationRow& row) {
  json j;
  j["name"] = row.name;
  if (row.mech) {
    j["inherit"] = row.mech->inherit;
    j["recover"] = row.mech->recover;
    j["distill"] = row.mech->distill;
  }
  if (auto h = row.headline()) j["median"] = *h;
  else j["median"] = nullptr;
  json runs = json::array();
  for (const RunRecord& r : row.runs) {
    runs.push_back({{"seed", r.seed},
                    {"final_metric", r.final_metric},
                    {"status", r.status},
                    {"trainable_params", r.trainable_params}});
  }
  j["runs"] = runs;
  return j;
}

}  // namespace

std::string AblationResult::to_markdown() const {
  std::ostringstream s;
  s << "| Inherit | Recover | Distill | " << task << " Acc |\n";
  s << "|:---:|:---:|:---:|:---:|\n";
  auto mark = [](bool b) { return b ? "✓" : " "; };
  for (const AblationRow& row : cells) {
    s << "| " << mark(row.mech->inherit) << " | " << mark(row.mech->recover) << " | " << mark(row.mech->distill)
      << " | " << cell_text(row) << " |\n";
  }
  if (!baselines.empty()) {
    s << "\n| Method | Trainable params | " << task << " Acc |\n";
    s << "|:---|---:|:---:|\n";
    for (const AblationRow& row : baselines) {
      const std::size_t params = row.runs.empty() ? 0 : row.runs.front().trainable_params;
      s << "| " << row.name << " | " << params << " | " << cell_text(row) << " |\n";
    }
  }
  const std::size_t seeds = cells.empty() ? 0 : cells.front().runs.size();
  s << "\nAccuracy in %, median over " << seeds << " seeds.\n";
  return s.str();
}

std::string AblationResult::to_json() const {
  json j;
  j["task"] = task;
  j["cells"] = json::array();
  for (const auto& row : cells) j["cells"].push_back(row_json(row));
  j["baselines"] = json::array();
  for (const auto& row : baselines) j["baselines"].push_back(row_json(row));
  return j.dump(2) + "\n";
}

AblationResult run_ablate(const Workspace& ws, const JobProgress& progress) {
  const ExperimentConfig& cfg = ws.config;
  require(ws.path("compressed.calr"));
  const TeacherArtifacts teacher = load_teacher(ws);
  const Model student = load_model(ws.path("compressed.calr"));
  const TaskData data = downstream_data(cfg);

  std::vector<Job> jobs;
  std::vector<Variant> variants;
  for (const Mechanisms& m : ablation_cells()) variants.push_back(mechanism_variant(cfg, m));
  for (const std::string& b : cfg.baselines) variants.push_back(baseline_variant(cfg, b));
  for (const Variant& v : variants)
    for (std::uint64_t seed : cfg.seeds) jobs.push_back({v.name + "_s" + std::to_string(seed), v, seed});

  std::vector<RunRecord> records = run_jobs(cfg, teacher, student, data, jobs, cfg.workers, progress);

  AblationResult result;
  result.task = cfg.task;
  const std::size_t n_cells = ablation_cells().size();
  for (std::size_t vi = 0, k = 0; vi < variants.size(); ++vi) {
    AblationRow row;
    row.name = variants[vi].name;
    if (vi < n_cells) row.mech = variants[vi].mech;
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s, ++k) {
      ws.save_record(records[k], "ablate/" + jobs[k].name);
      row.runs.push_back(records[k]);
    }
    (vi < n_cells ? result.cells : result.baselines).push_back(std::move(row));
  }
  write_text(ws.path("ablation.md"), result.to_markdown());
  write_text(ws.path("ablation.json"), result.to_json());
  return result;
}

std::string curves_to_csv(const std::vector<CurveRow>& rows) {
  std::string out = "family,method,seed,step,metric\n";
  for (const CurveRow& r : rows) {
    out += r.family + "," + r.method + "," + std::to_string(r.seed) + "," + std::to_string(r.step) + "," +
           fmt_double(r.metric) + "\n";
  }
  return out;
}

std::vector<CurveRow> curves_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "family,method,seed,step,metric") {
    throw IoError("convergence CSV: bad header");
  }
  std::vector<CurveRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) f.push_back(field);
    auto bad = [&] { return IoError("convergence CSV line " + std::to_string(lineno) + ": malformed"); };
    if (f.size() != 5) throw bad();
    CurveRow r;
    r.family = f[0];
    r.method = f[1];
    auto num = [&](const std::string& s, auto& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) throw bad();
    };
    num(f[2], r.seed);
    num(f[3], r.step);
    num(f[4], r.metric);
    rows.push_back(r);
  }
  return rows;
}

std::vector<CurveRow> run_convergence(const Workspace& ws, const JobProgress& progress) {
  const ExperimentConfig& cfg = ws.config;
  const TeacherArtifacts teacher = load_teacher(ws);
  const TaskData data = downstream_data(cfg);
  const std::pair<const char*, Mechanisms> methods[] = {
      {"vanilla", {false, false, false}}, {"inherited", {true, false, false}}, {"calora", {true, true, true}}};

  std::vector<CurveRow> rows;
  for (const auto& family : cfg.families) {
    const std::string file = "compressed_" + family.name + ".calr";
    require(ws.path(file));
    const Model student = load_model(ws.path(file));
    std::vector<Job> jobs;
    for (const auto& [method, mech] : methods) {
      Variant v = mechanism_variant(cfg, mech);
      v.method = method;
      for (std::uint64_t seed : cfg.seeds)
        jobs.push_back({family.name + "_" + method + "_s" + std::to_string(seed), v, seed});
    }
    std::vector<RunRecord> records = run_jobs(cfg, teacher, student, data, jobs, cfg.workers, progress);
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      ws.save_record(records[i], "convergence/" + jobs[i].name);
      for (const EvalPoint& p : records[i].curve)
        rows.push_back({family.name, jobs[i].variant.method, jobs[i].seed, p.step, p.metric});
    }
  }
  write_text(ws.path("convergence.csv"), curves_to_csv(rows));
  return rows;
}

const StorageStrategy& StorageReport::strategy(const std::string& name) const {
  for (const auto& s : strategies)
    if (s.name == name) return s;
  throw ConfigError("no storage strategy '" + name + "'");
}

std::string StorageReport::to_json() const {
  json j;
  j["n_tasks"] = n_tasks;
  j["backbone_bytes"] = backbone_bytes;
  j["backbone_q8_bytes"] = backbone_q8_bytes;
  j["compressed_bytes"] = compressed_bytes;
  j["lora_bytes"] = lora_bytes;
  j["calora_bytes"] = calora_bytes;
  j["strategies"] = json::array();
  for (const auto& s : strategies) {
    j["strategies"].push_back(
        {{"name", s.name}, {"base_bytes", s.base_bytes}, {"per_task_bytes", s.per_task_bytes}, {"total_bytes", s.total_bytes}});
  }
  return j.dump(2) + "\n";
}

std::string StorageReport::to_markdown() const {
  std::ostringstream s;
  s << "| Strategy | Base bytes | Per-task bytes | Total bytes (" << n_tasks << " tasks) |\n";
  s << "|:---|---:|---:|---:|\n";
  for (const auto& st : strategies) {
    s << "| " << st.name << " | " << st.base_bytes << " | "
      << (st.per_task_bytes.empty() ? std::string("-") : std::to_string(st.per_task_bytes.front())) << " | "
      << st.total_bytes << " |\n";
  }
  s << "\n8-bit backbone file: " << backbone_q8_bytes << " bytes (" << std::fixed << std::setprecision(2)
    << 100.0 * static_cast<double>(backbone_q8_bytes) / static_cast<double>(backbone_bytes)
    << "% of the f32 file).\n";
  return s.str();
}

StorageReport run_storage_report(const Workspace& ws, std::size_t n_tasks) {
  const ExperimentConfig& cfg = ws.config;
  const fs::path backbone_path = ws.path("backbone.calr");
  const fs::path compressed_path = ws.path("compressed.calr");
  require(backbone_path);
  require(compressed_path);
  const Model backbone = load_model(backbone_path);
  const Model compressed = load_model(compressed_path);

  StorageReport rep;
  rep.n_tasks = n_tasks;
  rep.backbone_bytes = file_bytes(backbone_path);
  rep.compressed_bytes = file_bytes(compressed_path);
  {
    Model q8 = backbone.clone();
    compress(q8, CompressionSpec::parse("quantize(bits=8)"), cfg.seed);
    model_to_checkpoint(q8).save(ws.path("storage/backbone_q8.calr"));
    rep.backbone_q8_bytes = file_bytes(ws.path("storage/backbone_q8.calr"));
  }

  // One adapter file per task, shaped as configured. Values do not change
  // sizes, so fresh adapters stand in for trained ones.
  auto task_id = [&](std::size_t i) { return i < cfg.tasks.size() ? cfg.tasks[i].id : "task" + std::to_string(i); };
  auto lora_file = [&](const std::string& id) {
    const fs::path p = ws.path("storage/lora_" + id + ".calr");
    adapters_to_checkpoint(fresh_lora(backbone, id, cfg.adapters, cfg.seed)).save(p);
    return file_bytes(p);
  };
  auto calora_file = [&](const std::string& id) {
    const fs::path p = ws.path("storage/calora_" + id + ".calr");
    Adapters set = fresh_lora(compressed, id, cfg.adapters, cfg.seed);
    Rng rng(cfg.seed, kRecoveryInitStream);
    add_recovery(set, compressed, cfg.adapters.recovery_slots, cfg.adapters.recovery_rank, rng,
                 cfg.adapters.recovery_sigma);
    adapters_to_checkpoint(set).save(p);
    return file_bytes(p);
  };

  StorageStrategy full{"full-ft", rep.backbone_bytes, {}, 0};
  StorageStrategy lora{"backbone+lora", rep.backbone_bytes, {}, 0};
  StorageStrategy calora{"compressed+calora", rep.compressed_bytes, {}, 0};
  for (std::size_t i = 0; i < n_tasks; ++i) {
    full.per_task_bytes.push_back(rep.backbone_bytes);
    lora.per_task_bytes.push_back(lora_file(task_id(i)));
    calora.per_task_bytes.push_back(calora_file(task_id(i)));
  }
  rep.lora_bytes = n_tasks ? lora.per_task_bytes.front() : lora_file(task_id(0));
  rep.calora_bytes = n_tasks ? calora.per_task_bytes.front() : calora_file(task_id(0));
  for (StorageStrategy* s : {&full, &lora, &calora}) {
    s->total_bytes = s->base_bytes;
    for (std::size_t b : s->per_task_bytes) s->total_bytes += b;
    rep.strategies.push_back(*s);
  }
  write_text(ws.path("storage.json"), rep.to_json());
  write_text(ws.path("storage.md"), rep.to_markdown());
  return rep;
}

}  // namespace calora
