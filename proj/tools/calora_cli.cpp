// calora: command-line driver for the experiment pipeline.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "calora/harness/pipeline.hpp"

using namespace calora;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "INI experiment config (built-in desk config if omitted)");
  cmd->add_option("--seed", c.seed, "master seed: backbone init, data mixture, compression, teacher");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--set", c.sets, "override, section.key=value (repeatable)");
}

ExperimentConfig resolve(const Common& c, std::vector<std::string> extra = {}) {
  const std::string text = c.config.empty() ? default_config_text() : read_text(c.config);
  std::vector<std::string> sets = c.sets;
  if (c.seed) sets.push_back("experiment.seed=" + std::to_string(*c.seed));
  if (!c.out.empty()) sets.push_back("experiment.out=" + c.out);
  sets.insert(sets.end(), extra.begin(), extra.end());
  return ExperimentConfig::parse_with(text, sets);
}

void report_progress(std::size_t done, std::size_t total, const Job& job, const RunRecord& r) {
  std::cerr << "[" << done << "/" << total << "] " << job.name << " " << r.final_metric
            << (r.status == "ok" ? "" : " " + r.status) << "\n";
}

void print_record(const RunRecord& r) {
  std::cout << r.method << " task=" << r.task << " seed=" << r.seed << " metric=" << r.final_metric
            << " status=" << r.status << " config=" << r.config_hash << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compression-aware LoRA experiments on a toy transformer"};
  app.require_subcommand(1);

  Common common;
  std::string task;
  std::optional<std::uint64_t> run_seed;
  bool inherit = true, recover = true, distill = true;
  std::string checkpoint, adapters;
  std::size_t n_tasks = 5;
  std::optional<std::size_t> workers;
  std::optional<std::string> baselines;
  std::string compressed_file = "compressed.calr";

  auto* pretrain = app.add_subcommand("pretrain", "pretrain the backbone on the task mixture");
  auto* teacher = app.add_subcommand("train-teacher-lora", "train the teacher LoRA on the uncompressed backbone");
  auto* compress = app.add_subcommand("compress", "compress the backbone (main spec and convergence families)");
  auto* inherit_eval = app.add_subcommand("inherit-eval", "evaluate the teacher LoRA copied onto a compressed model");
  auto* calora = app.add_subcommand("train-calora", "train adapters on the compressed model");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint, optionally with adapters");
  auto* ablate = app.add_subcommand("ablate", "run the mechanism ablation grid and baselines");
  auto* convergence = app.add_subcommand("convergence", "eval-metric curves per compression family");
  auto* storage = app.add_subcommand("storage-report", "byte accounting per deployment strategy");

  for (auto* cmd : {pretrain, teacher, compress, inherit_eval, calora, eval, ablate, convergence, storage})
    add_common(cmd, common);
  for (auto* cmd : {teacher, compress, inherit_eval, calora, eval, ablate, convergence})
    cmd->add_option("--task", task, "downstream task id");
  inherit_eval->add_option("--compressed", compressed_file, "compressed checkpoint name inside the output directory");
  calora->add_flag("--inherit,!--no-inherit", inherit, "initialize LoRA from the teacher");
  calora->add_flag("--recover,!--no-recover", recover, "add recovery modules");
  calora->add_flag("--distill,!--no-distill", distill, "add the distillation loss");
  calora->add_option("--run-seed", run_seed, "seed of this run (default: first configured seed)");
  eval->add_option("--checkpoint", checkpoint, "backbone checkpoint")->required();
  eval->add_option("--adapters", adapters, "adapter checkpoint to attach");
  for (auto* cmd : {ablate, convergence}) cmd->add_option("--workers", workers, "parallel runs");
  ablate->add_option("--baselines", baselines, "comma-separated: lora_lora, large_lora (empty for none)");
  ablate->add_flag_callback("--no-baselines", [&] { baselines = ""; }, "skip the parameter-control baselines");
  storage->add_option("--n-tasks", n_tasks, "number of tasks to account for");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code(ErrorKind::kConfig);
  }

  try {
    std::vector<std::string> extra;
    if (!task.empty()) extra.push_back("experiment.task=" + task);
    if (workers) extra.push_back("experiment.workers=" + std::to_string(*workers));
    if (baselines) extra.push_back("ablate.baselines=" + *baselines);
    const Workspace ws(resolve(common, extra));
    std::cerr << "config " << ws.config.hash() << " -> " << ws.dir.string() << "\n";

    if (pretrain->parsed()) {
      print_record(run_pretrain(ws));
    } else if (teacher->parsed()) {
      print_record(run_teacher(ws));
    } else if (compress->parsed()) {
      for (const CompressOutcome& o : run_compress_all(ws)) {
        std::cout << "size_ratio=" << o.report.size_ratio() << " ideal_speedup=" << o.report.ideal_speedup()
                  << " metric " << o.metric_before << " -> " << o.metric_after << "\n";
      }
    } else if (inherit_eval->parsed()) {
      print_record(run_inherit_eval(ws, compressed_file));
    } else if (calora->parsed()) {
      print_record(run_train_calora(ws, {inherit, recover, distill}, run_seed.value_or(ws.config.seeds.front())));
    } else if (eval->parsed()) {
      std::optional<std::filesystem::path> a;
      if (!adapters.empty()) a = adapters;
      print_record(run_eval(ws, checkpoint, a, ws.config.task));
    } else if (ablate->parsed()) {
      const AblationResult r = run_ablate(ws, report_progress);
      std::cout << r.to_markdown();
      for (const auto* rows : {&r.cells, &r.baselines})
        for (const auto& row : *rows)
          if (row.failed() == row.runs.size()) return exit_code(ErrorKind::kTraining);
    } else if (convergence->parsed()) {
      const auto rows = run_convergence(ws, report_progress);
      std::cout << rows.size() << " curve points written to " << ws.path("convergence.csv").string() << "\n";
    } else if (storage->parsed()) {
      std::cout << run_storage_report(ws, n_tasks).to_markdown();
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(ErrorKind::kInternal);
  }
  return 0;
}
