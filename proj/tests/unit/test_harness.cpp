#include <cstdlib>
#include <sys/wait.h>

#include "calora/harness/pipeline.hpp"
#include "calora/model/serialize.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace calora;
namespace fs = std::filesystem;

namespace {

// Small enough that a full pipeline takes about a second.
const char* kTinyConfig = R"([experiment]
name=tiny
seed=3
task=modadd
seeds=1,2,3

[model]
n_layers=1
d_model=16
n_heads=2
d_ff=32
max_seq_len=8

[pretrain]
size=400
max_steps=30
batch_size=8
lr=0.003
eval_interval=10

[teacher]
max_steps=20
batch_size=8
lr=0.003
eval_interval=5

[train]
max_steps=20
batch_size=8
lr=0.003
eval_interval=5

[adapters]
lora_rank=2
recovery_rank=2

[compression]
spec=quantize(bits=8); prune_unstructured(sparsity=0.5)

[convergence]
Q=quantize(bits=8)
SP=prune_structured(ffn_keep=0.5,heads_keep=1)

[ablate]
large_lora_rank=4

[task:copy]
kind=copy
n_symbols=5
max_len=3
pretrain_count=100
train_count=40
eval_count=30

[task:modadd]
kind=modadd
modulus=5
max_len=3
pretrain_count=80
train_count=60
eval_count=40
weight=2
prefix=true
)";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("calora_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny(const fs::path& out, std::vector<std::string> sets = {}) {
  sets.push_back("experiment.out=" + out.string());
  return ExperimentConfig::parse_with(kTinyConfig, sets);
}

// Pretrain, teacher and compression for the tiny config, once per directory.
Workspace prepared(const std::string& name, std::vector<std::string> sets = {}) {
  Workspace ws(tiny(scratch(name), std::move(sets)));
  run_pretrain(ws);
  run_teacher(ws);
  run_compress_all(ws);
  return ws;
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) {
  const std::string s = read_text(p);
  return {s.begin(), s.end()};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CALORA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults parse and validate") {
    const ExperimentConfig c = ExperimentConfig::parse(default_config_text());
    CHECK(c.task == "modadd");
    CHECK(c.tasks.size() == 5);
    CHECK(c.seeds.size() == 5);
    CHECK(c.families.size() == 4);
    CHECK(c.model_config().vocab_size == vocab::vocab_size(10));
  }

  TEST_CASE("shipped desk config equals the built-in default") {
    CHECK(ExperimentConfig::load(CALORA_SOURCE_DIR "/configs/desk.ini").hash() ==
          ExperimentConfig::parse(default_config_text()).hash());
  }

  TEST_CASE("canonical form round-trips and fixes the hash") {
    const ExperimentConfig a = ExperimentConfig::parse(kTinyConfig);
    const ExperimentConfig b = ExperimentConfig::parse(a.canonical());
    CHECK(b.canonical() == a.canonical());
    CHECK(b.hash() == a.hash());
    CHECK(a.hash().size() == 16);
    // key order and whitespace in the source do not matter
    std::string shuffled = kTinyConfig;
    shuffled.replace(shuffled.find("seed=3\ntask=modadd"), 18, "task = modadd\nseed = 3");
    CHECK(ExperimentConfig::parse(shuffled).hash() == a.hash());
    // output location and worker count do not change results, so not the hash
    CHECK(tiny("/tmp/elsewhere", {"experiment.workers=4"}).hash() == a.hash());
  }

  TEST_CASE("every result-affecting key moves the hash") {
    const std::string base = ExperimentConfig::parse(kTinyConfig).hash();
    for (const char* o : {"train.lr=0.002", "train.alpha=0.1", "experiment.seed=4", "experiment.seeds=1,2",
                          "model.d_ff=64", "task:modadd.prefix=false", "adapters.recovery_sigma=identity",
                          "compression.spec=quantize(bits=4)", "ablate.baselines=large_lora"}) {
      CAPTURE(o);
      CHECK(ExperimentConfig::parse_with(kTinyConfig, {o}).hash() != base);
    }
  }

  TEST_CASE("bad configs raise ConfigError naming the problem") {
    auto err = [](std::vector<std::string> sets) -> std::string {
      try {
        ExperimentConfig::parse_with(kTinyConfig, sets);
      } catch (const ConfigError& e) {
        return e.what();
      }
      return "";
    };
    CHECK(err({"model.bogus=1"}).find("bogus") != std::string::npos);
    CHECK(err({"mystery.key=1"}).find("mystery") != std::string::npos);
    CHECK(err({"train.lr=fast"}).find("lr") != std::string::npos);
    CHECK(err({"train.batch_size=-1"}).find("batch_size") != std::string::npos);
    CHECK(err({"experiment.task=nope"}).find("nope") != std::string::npos);
    CHECK(err({"experiment.seeds="}).find("seed") != std::string::npos);
    CHECK(err({"model.n_heads=3"}) != "");
    CHECK(err({"task:copy.max_len=9"}).find("max_seq_len") != std::string::npos);
    CHECK(err({"compression.spec=quantize(bits=8); moefy(experts=2,top_k=1)"}) != "");
    CHECK(err({"ablate.baselines=huge_lora"}).find("huge_lora") != std::string::npos);
    CHECK(err({"noequals"}) != "");
    CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/calora.ini"), IoError);
  }

  TEST_CASE("median") {
    CHECK(median({3, 1, 2}) == 2);
    CHECK(median({4, 1, 3, 2}) == 2.5);
    CHECK_THROWS_AS(median({}), ConfigError);
  }
}

TEST_SUITE("pipeline") {
  TEST_CASE("pretrain is bitwise reproducible and the checkpoint round-trips") {
    Workspace a(tiny(scratch("pre_a")));
    Workspace b(tiny(scratch("pre_b")));
    run_pretrain(a);
    run_pretrain(b);
    CHECK(bytes_of(a.path("backbone.calr")) == bytes_of(b.path("backbone.calr")));
    CHECK(read_text(a.path("pretrain_log.csv")) == read_text(b.path("pretrain_log.csv")));
    CHECK(read_text(a.path("runs/pretrain.json")) == read_text(b.path("runs/pretrain.json")));

    const Model m = load_model(a.path("backbone.calr"));
    CHECK(model_to_checkpoint(m).encode() == bytes_of(a.path("backbone.calr")));

    std::vector<std::uint8_t> bytes = bytes_of(a.path("backbone.calr"));
    bytes[bytes.size() / 2] ^= 0x01;
    CHECK_THROWS_AS(Checkpoint::decode(bytes), IoError);
  }

  TEST_CASE("records carry the config hash and the index is append-only") {
    Workspace ws = prepared("index");
    const std::string before = read_text(ws.path("runs.jsonl"));
    RunRecord r = run_inherit_eval(ws);
    CHECK(r.config_hash == ws.config.hash());
    CHECK(ExperimentConfig::parse(r.config_text).hash() == r.config_hash);
    const std::string after = read_text(ws.path("runs.jsonl"));
    CHECK(after.size() > before.size());
    CHECK(after.compare(0, before.size(), before) == 0);
    CHECK(RunRecord::from_json(read_text(ws.path("runs/inherit-eval_compressed.json"))).final_metric ==
          r.final_metric);
  }

  TEST_CASE("empty compression spec leaves the eval metric unchanged") {
    Workspace ws(tiny(scratch("empty_spec")));
    run_pretrain(ws);
    const CompressOutcome o = run_compress(ws, CompressionSpec{}, "compressed.calr");
    CHECK(o.metric_after == o.metric_before);
    CHECK(bytes_of(ws.path("compressed.calr")) == bytes_of(ws.path("backbone.calr")));
  }

  TEST_CASE("train-calora with every mechanism off reproduces plain LoRA") {
    Workspace ws = prepared("reduction");
    const RunRecord off = run_train_calora(ws, {}, 2);
    Model student = load_model(ws.path("compressed.calr"));
    Adapters set = fresh_lora(student, ws.config.task, ws.config.adapters, 2);
    TrainConfig tc = ws.config.train;
    tc.seed = 2;
    const RunRecord plain = train_lora(student, set, downstream_data(ws.config), tc);
    REQUIRE(off.curve.size() == plain.curve.size());
    for (std::size_t i = 0; i < off.curve.size(); ++i) CHECK(off.curve[i].metric == plain.curve[i].metric);
    REQUIRE(off.losses.size() == plain.losses.size());
    for (std::size_t i = 0; i < off.losses.size(); ++i) CHECK(off.losses[i].task_loss == plain.losses[i].task_loss);
  }

  TEST_CASE("eval is deterministic across invocations") {
    Workspace ws = prepared("eval");
    const auto a = run_eval(ws, ws.path("backbone.calr"), ws.path(kTeacherId), "modadd");
    const auto b = run_eval(ws, ws.path("backbone.calr"), ws.path(kTeacherId), "modadd");
    CHECK(a.final_metric == b.final_metric);
    const double teacher_final = Checkpoint::load(ws.path(kTeacherId)).scalar("teacher/final_metric");
    CHECK(a.final_metric == teacher_final);
  }

  TEST_CASE("ablate: table shape, reduction cell, baselines, partial failure, determinism") {
    Workspace ws = prepared("ablate");
    const AblationResult r = run_ablate(ws);
    REQUIRE(r.cells.size() == 8);
    CHECK(r.cells.front().name == "none");
    CHECK(r.cells.back().name == "inherit+recover+distill");
    for (std::size_t i = 0; i < 8; ++i) CHECK(*r.cells[i].mech == ablation_cells()[i]);
    REQUIRE(r.baselines.size() == 2);
    CHECK(r.baselines[0].name == "lora+lora");
    CHECK(r.baselines[1].name == "large-lora");
    for (const auto& row : r.cells) CHECK(row.runs.size() == 3);

    // Parameter control: LoRA+LoRA carries a rank-r LoRA on every slot on
    // top of Q,K; Large LoRA has 4x the rank on Q,K.
    const std::size_t d = 16, ff = 32, rq = 2;
    const std::size_t base_lora = 2 * rq * (d + d);
    CHECK(r.cells[0].runs[0].trainable_params == base_lora);
    CHECK(r.baselines[0].runs[0].trainable_params == base_lora + rq * (4 * (d + d) + (d + ff) + (ff + d)));
    CHECK(r.baselines[1].runs[0].trainable_params == 2 * 4 * (d + d));

    const std::string md = read_text(ws.path("ablation.md"));
    std::size_t rows = 0;
    for (std::size_t pos = md.find("\n|"); pos != std::string::npos && md.compare(pos + 1, 8, "| Method") != 0;
         pos = md.find("\n|", pos + 1))
      ++rows;
    CHECK(rows == 1 + 8);  // separator plus 8 cells
    CHECK(md.find("| Inherit | Recover | Distill | modadd Acc |") == 0);

    // the all-false cell is the same code path as train-calora with all flags off
    const RunRecord single = run_train_calora(ws, {}, 1);
    CHECK(single.final_metric == r.cells[0].runs[0].final_metric);
    CHECK(single.to_json() == RunRecord::from_json(read_text(ws.path("runs/ablate/none_s1.json"))).to_json());

    // rerun with more workers: identical records
    ExperimentConfig cfg2 = ws.config;
    cfg2.out = ws.dir / "again";
    cfg2.workers = 3;
    Workspace ws2(cfg2);
    fs::copy(ws.path("backbone.calr"), ws2.path("backbone.calr"));
    fs::copy(ws.path(kTeacherId), ws2.path(kTeacherId));
    fs::copy(ws.path("compressed.calr"), ws2.path("compressed.calr"));
    const AblationResult r2 = run_ablate(ws2);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t s = 0; s < 3; ++s) CHECK(r2.cells[i].runs[s].to_json() == r.cells[i].runs[s].to_json());
    CHECK(read_text(ws2.path("ablation.md")) == read_text(ws.path("ablation.md")));
  }

  TEST_CASE("ablate keeps completed cells when some fail") {
    // lr so large that the first update overflows: every cell fails with a
    // training error, and the report still lists all of them
    Workspace ws = prepared("ablate_fail", {"train.lr=1e30", "experiment.seeds=1", "ablate.baselines="});
    const AblationResult r = run_ablate(ws);
    REQUIRE(r.cells.size() == 8);
    for (const auto& row : r.cells) {
      CHECK(row.failed() == 1);
      CHECK(!row.headline());
      CHECK(row.runs[0].status.find("failed") == 0);
    }
    CHECK(read_text(ws.path("ablation.md")).find("failed") != std::string::npos);
    CHECK_THROWS_AS(run_ablate(Workspace(tiny(scratch("ablate_missing")))), IoError);
  }

  TEST_CASE("convergence curves: lengths, shared start, CSV round trip") {
    Workspace ws = prepared("convergence", {"experiment.seeds=1,2"});
    const auto rows = run_convergence(ws);
    const std::size_t points = ws.config.train.max_steps / ws.config.train.eval_interval + 1;
    CHECK(rows.size() == 2 /*families*/ * 3 /*methods*/ * 2 /*seeds*/ * points);
    std::map<std::tuple<std::string, std::string, std::uint64_t>, std::vector<CurveRow>> curves;
    for (const auto& r : rows) curves[{r.family, r.method, r.seed}].push_back(r);
    for (const auto& [key, c] : curves) {
      REQUIRE(c.size() == points);
      CHECK(c.front().step == 0);
    }
    // inherited and full CA-LoRA start from the same zero-shot point
    for (const char* f : {"Q", "SP"}) {
      CHECK(curves[{f, "inherited", 1}].front().metric == curves[{f, "calora", 1}].front().metric);
      const double zero_shot = run_inherit_eval(ws, std::string("compressed_") + f + ".calr").final_metric;
      CHECK(curves[{f, "inherited", 1}].front().metric == zero_shot);
    }
    CHECK(curves_from_csv(read_text(ws.path("convergence.csv"))) == rows);
    CHECK_THROWS_AS(curves_from_csv("family,method\n"), IoError);
    CHECK_THROWS_AS(curves_from_csv("family,method,seed,step,metric\nQ,x,1,0\n"), IoError);
  }

  TEST_CASE("storage report accounting") {
    Workspace ws = prepared("storage");
    const StorageReport zero = run_storage_report(ws, 0);
    for (const auto& s : zero.strategies) CHECK(s.total_bytes == s.base_bytes);
    CHECK(zero.strategy("full-ft").total_bytes == zero.backbone_bytes);
    CHECK(zero.strategy("backbone+lora").total_bytes == zero.backbone_bytes);
    CHECK(zero.strategy("compressed+calora").total_bytes == zero.compressed_bytes);

    std::vector<StorageReport> reps;
    for (std::size_t n = 1; n <= 4; ++n) reps.push_back(run_storage_report(ws, n));
    for (const auto& rep : reps) {
      const auto& lora = rep.strategy("backbone+lora");
      std::size_t sum = 0;
      for (std::size_t i = 0; i < rep.n_tasks; ++i)
        sum += fs::file_size(ws.path("storage/lora_" + (i < 2 ? ws.config.tasks[i].id : "task" + std::to_string(i)) + ".calr"));
      CHECK(lora.total_bytes == fs::file_size(ws.path("backbone.calr")) + sum);
    }
    // linear growth: full copies grow by the backbone file each task
    for (std::size_t i = 1; i < reps.size(); ++i)
      CHECK(reps[i].strategy("full-ft").total_bytes - reps[i - 1].strategy("full-ft").total_bytes ==
            reps[0].backbone_bytes);
    const std::string json = read_text(ws.path("storage.json"));
    CHECK(json.find("\"compressed+calora\"") != std::string::npos);
    CHECK_THROWS_AS(run_storage_report(Workspace(tiny(scratch("storage_missing"))), 1), IoError);
  }
}

TEST_CASE("CLI exit codes per error class") {
  const fs::path dir = scratch("cli");
  const std::string tiny_ini = (dir / "tiny.ini").string();
  write_text(tiny_ini, kTinyConfig);
  const std::string cfg = "--config " + tiny_ini;
  const std::string base = cfg + " --out " + dir.string();

  CHECK(run_cli("pretrain " + base) == 0);
  CHECK(run_cli("pretrain " + base + " --set model.bogus=1") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("eval " + base + " --checkpoint " + (dir / "missing.calr").string()) == 6);
  CHECK(run_cli("pretrain " + cfg + " --out " + (dir / "nan").string() + " --set pretrain.lr=1e30") == 5);

  // a backbone whose vocabulary is too small for another config's task
  const std::string small = cfg + " --out " + (dir / "small").string() + " --set task:modadd.modulus=2" +
                            " --set task:modadd.pretrain_count=8 --set task:modadd.train_count=8"
                            " --set task:modadd.eval_count=4" +
                            " --set task:copy.n_symbols=2 --set task:copy.pretrain_count=6 --set task:copy.train_count=4"
                            " --set task:copy.eval_count=4";
  CHECK(run_cli("pretrain " + small) == 0);
  CHECK(run_cli("eval " + base + " --task copy --checkpoint " + (dir / "small" / "backbone.calr").string()) == 3);

  // LoRA on the FFN input cannot be inherited once the FFN is pruned
  const std::string ffn = cfg + " --out " + (dir / "ffn").string() + " --set adapters.lora_slots=q,k,ffn_in" +
                          " --set 'compression.spec=prune_structured(ffn_keep=0.5,heads_keep=1)'";
  CHECK(run_cli("pretrain " + ffn) == 0);
  CHECK(run_cli("train-teacher-lora " + ffn) == 0);
  CHECK(run_cli("compress " + ffn) == 0);
  CHECK(run_cli("inherit-eval " + ffn) == 4);
  CHECK(run_cli("train-calora " + ffn + " --no-inherit --no-distill") == 0);
}
