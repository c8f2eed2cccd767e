// Serial reference vs OpenMP kernels, plus one full training step.

#include <benchmark/benchmark.h>

#include <vector>

#include "calora/rng.hpp"
#include "calora/tasks/tasks.hpp"
#include "calora/tensor/kernels.hpp"
#include "calora/training/training.hpp"

using namespace calora;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.normal());
  return v;
}

template <auto Gemm>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    Gemm(n, n, n, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

void gemm_nt_serial(std::size_t m, std::size_t k, std::size_t n, std::span<const float> a, std::span<const float> b,
                    std::span<float> c, bool acc) {
  kernels::serial::gemm_nt(m, k, n, a, b, c, acc);
}
void gemm_nt_parallel(std::size_t m, std::size_t k, std::size_t n, std::span<const float> a,
                      std::span<const float> b, std::span<float> c, bool acc) {
  kernels::parallel::gemm_nt(m, k, n, a, b, c, acc);
}
void gemm_nn_serial(std::size_t m, std::size_t k, std::size_t n, std::span<const float> a, std::span<const float> b,
                    std::span<float> c, bool acc) {
  kernels::serial::gemm_nn(m, k, n, a, b, c, acc);
}
void gemm_nn_parallel(std::size_t m, std::size_t k, std::size_t n, std::span<const float> a,
                      std::span<const float> b, std::span<float> c, bool acc) {
  kernels::parallel::gemm_nn(m, k, n, a, b, c, acc);
}

BENCHMARK(BM_gemm<gemm_nt_serial>)->Name("gemm_nt/serial")->RangeMultiplier(2)->Range(64, 512);
BENCHMARK(BM_gemm<gemm_nt_parallel>)->Name("gemm_nt/parallel")->RangeMultiplier(2)->Range(64, 512);
BENCHMARK(BM_gemm<gemm_nn_serial>)->Name("gemm_nn/serial")->RangeMultiplier(2)->Range(64, 512);
BENCHMARK(BM_gemm<gemm_nn_parallel>)->Name("gemm_nn/parallel")->RangeMultiplier(2)->Range(64, 512);

// Full fine-tuning of the desk-scale model, 10 steps per iteration.
void BM_train_steps(benchmark::State& state) {
  TaskSpec spec;
  spec.id = "modadd";
  spec.kind = TaskKind::kModAdd;
  spec.modulus = 5;
  spec.max_len = 4;
  spec.train_count = 400;
  spec.eval_count = 50;
  spec.pretrain_count = 0;
  TaskData data = make_task_data(generate(spec, Split::kTrain), generate(spec, Split::kEval));
  TransformerConfig mc;
  mc.vocab_size = vocab::vocab_size(5);
  mc.max_seq_len = 16;
  TrainConfig tc;
  tc.batch_size = 32;
  tc.max_steps = 10;
  tc.eval_interval = 0;
  for (auto _ : state) {
    state.PauseTiming();
    Rng rng(1);
    TransformerModel<float> model(mc, rng);
    state.ResumeTiming();
    benchmark::DoNotOptimize(full_finetune(model, data, tc).final_metric);
  }
}
BENCHMARK(BM_train_steps)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
