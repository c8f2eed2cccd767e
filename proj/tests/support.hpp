#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "calora/adapters/adapter_set.hpp"
#include "calora/compression/compression.hpp"
#include "calora/rng.hpp"
#include "calora/tensor/ops.hpp"
#include "calora/training/training.hpp"

namespace calora::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& x : t.data()) x = rng.normal(0.0, stddev);
  return t;
}

inline Tensor<float> random_tensor_f(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<float> t(std::move(shape));
  for (float& x : t.data()) x = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

// Largest elementwise relative error between two gradients. Elements are
// compared relative to max(|a|, |b|), floored at 1e-3 of the tensor's
// largest magnitude so that near-zero entries do not dominate, and at 1e-7
// absolute: some gradients are exactly zero (a key bias shifts every score of
// a query equally) and finite differences only return rounding noise there.
inline double max_rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  double scale = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-3 * scale, 1e-7});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// Builds the scalar loss on a fresh tape.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

// Analytic gradient of every parameter via backward().
inline std::vector<Tensor<double>> analytic_grads(const LossBuilder& loss,
                                                  const std::vector<ParamPtr<double>>& params) {
  for (const auto& p : params) p->zero_grad();
  Tape<double> tape;
  tape.backward(loss(tape));
  std::vector<Tensor<double>> out;
  for (const auto& p : params) out.push_back(p->has_grad() ? p->grad : Tensor<double>(p->value.shape()));
  return out;
}

// Central finite differences of the loss w.r.t. each parameter element.
inline std::vector<Tensor<double>> numeric_grads(const LossBuilder& loss,
                                                 const std::vector<ParamPtr<double>>& params,
                                                 double eps) {
  auto eval = [&] {
    Tape<double> tape(false);
    return loss(tape).value().item();
  };
  std::vector<Tensor<double>> out;
  for (const auto& p : params) {
    Tensor<double> g(p->value.shape());
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + eps;
      const double up = eval();
      p->value[i] = orig - eps;
      const double down = eval();
      p->value[i] = orig;
      g[i] = (up - down) / (2 * eps);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// Worst relative error over all parameters.
inline double gradcheck(const LossBuilder& loss, const std::vector<ParamPtr<double>>& params,
                        double eps = 1e-6) {
  const auto a = analytic_grads(loss, params);
  const auto n = numeric_grads(loss, params, eps);
  double worst = 0;
  for (std::size_t i = 0; i < params.size(); ++i) worst = std::max(worst, max_rel_error(a[i], n[i]));
  return worst;
}

inline TransformerConfig tiny_config(std::size_t vocab = 12) {
  TransformerConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = vocab;
  c.max_seq_len = 6;
  return c;
}

inline TokenBatch random_tokens(std::size_t batch, std::size_t seq, std::size_t vocab, Rng& rng) {
  TokenBatch b{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) b.ids.push_back(rng.uniform_int(vocab));
  return b;
}

// Overwrites every adapter tensor with random values so that no gradient is
// trivially zero (fresh B and U are zero).
template <typename T>
void randomize(const AdapterSet<T>& set, Rng& rng, double stddev = 0.3) {
  for (const auto& p : set.params())
    for (auto& x : p->value.data()) x = static_cast<T>(rng.normal(0.0, stddev));
}

// Student for the full CA-LoRA gradient check: MoEfied, 8-bit quantized and
// 50% pruned, frozen, with LoRA on Q,K and recovery on every slot.
struct CaloraFixture {
  TransformerModel<double> teacher;
  TransformerModel<double> student;
  AdapterSet<double> teacher_set;
  AdapterSet<double> set;
  TokenBatch batch;
  std::vector<std::size_t> targets;
};

inline CaloraFixture make_calora_fixture(std::uint64_t seed) {
  Rng rng(seed);
  CaloraFixture f;
  f.teacher = TransformerModel<double>(tiny_config(), rng);
  f.student = f.teacher.clone();
  compress(f.student,
           CompressionSpec::parse("moefy(experts=4,top_k=2,router=oracle); quantize(bits=8); "
                                  "prune_unstructured(sparsity=0.5)"),
           seed);
  f.teacher.set_backbone_trainable(false);
  f.student.set_backbone_trainable(false);
  const std::vector<SlotKind> qk{SlotKind::kQuery, SlotKind::kKey};
  const std::vector<SlotKind> all(std::begin(kAllSlotKinds), std::end(kAllSlotKinds));
  f.teacher_set = make_lora_set(f.teacher, "t", qk, 2, rng);
  randomize(f.teacher_set, rng);
  f.teacher_set.attach(f.teacher);
  f.set = inherit(f.teacher_set, f.student, "fixture");
  add_recovery(f.set, f.student, all, 2, rng);
  randomize(f.set, rng);
  f.set.attach(f.student);
  f.batch = random_tokens(3, 5, f.student.config().vocab_size, rng);
  for (std::size_t i = 0; i < f.batch.batch; ++i) f.targets.push_back(rng.uniform_int(f.student.config().vocab_size));
  return f;
}

// Joint loss task + alpha·distill on the fixture, as the training loop builds it.
inline Var<double> calora_loss(CaloraFixture& f, Tape<double>& tape, double alpha = 0.05) {
  const Tensor<double> target = teacher_output(f.teacher, f.batch, DistillTarget::kLogits);
  const ForwardResult<double> out = f.student.forward(tape, f.batch);
  Var<double> loss = task_loss(out, f.batch, std::span<const std::size_t>(f.targets));
  return ag::add(loss, ag::scale(distill_loss(out.logits, target), alpha));
}

// Loop-level reference forward pass in double, written independently of the
// tape ops. MoE layers use the masked-dense rule: score experts by positive
// pre-activation mass (oracle) and zero every neuron outside the top_k.
// Adapters are applied through their dense maps.
template <typename T>
std::vector<double> reference_logits(const TransformerModel<T>& m, const TokenBatch& b) {
  const auto& c = m.config();
  const std::size_t n = b.batch * b.seq, d = c.d_model;
  using Mat = std::vector<std::vector<double>>;
  auto val = [](const ParamPtr<T>& p, std::size_t i) { return static_cast<double>(p->value[i]); };
  auto layer_norm = [&](const Mat& x, const ParamPtr<T>& g, const ParamPtr<T>& be) {
    Mat y = x;
    for (auto& row : y) {
      double mu = 0, var = 0;
      for (double v : row) mu += v;
      mu /= static_cast<double>(row.size());
      for (double v : row) var += (v - mu) * (v - mu);
      var /= static_cast<double>(row.size());
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * val(g, j) + val(be, j);
    }
    return y;
  };
  auto slot = [&](const LinearSlot<T>& s, const Mat& x) {
    const std::size_t di = s.d_in(), dout = s.d_out();
    Mat y(x.size(), std::vector<double>(dout, 0.0));
    for (std::size_t r = 0; r < x.size(); ++r) {
      for (std::size_t o = 0; o < dout; ++o) {
        double acc = s.bias() ? val(s.bias(), o) : 0.0;
        for (std::size_t i = 0; i < di; ++i) acc += static_cast<double>(s.effective_weight()[o * di + i]) * x[r][i];
        y[r][o] = acc;
      }
      for (const auto& a : s.adapters()) {
        if (auto l = std::dynamic_pointer_cast<LoRAAdapter<T>>(a)) {
          const std::size_t rk = l->rank();
          std::vector<double> z(rk, 0.0);
          for (std::size_t k = 0; k < rk; ++k)
            for (std::size_t i = 0; i < di; ++i) z[k] += val(l->a(), k * di + i) * x[r][i];
          for (std::size_t o = 0; o < dout; ++o)
            for (std::size_t k = 0; k < rk; ++k) y[r][o] += static_cast<double>(l->scaling()) * val(l->b(), o * rk + k) * z[k];
        } else if (auto rc = std::dynamic_pointer_cast<RecoveryAdapter<T>>(a)) {
          const std::size_t rk = rc->rank();
          std::vector<double> z(rk, 0.0);
          for (std::size_t k = 0; k < rk; ++k) {
            for (std::size_t i = 0; i < di; ++i) z[k] += x[r][i] * val(rc->down(), i * rk + k);
            z[k] = ag::activate(rc->sigma(), z[k]);
          }
          for (std::size_t o = 0; o < dout; ++o)
            for (std::size_t k = 0; k < rk; ++k) y[r][o] += z[k] * val(rc->up(), k * dout + o);
        }
      }
    }
    return y;
  };
  Mat x(n, std::vector<double>(d));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j)
      x[r][j] = val(m.token_embedding(), b.ids[r] * d + j) + val(m.position_embedding(), (r % b.seq) * d + j);
  const std::size_t H = c.n_heads, dh = d / H;
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    const auto& L = m.layer(l);
    Mat h = layer_norm(x, L.ln1_gamma, L.ln1_beta);
    Mat q = slot(L.q, h), k = slot(L.k, h), v = slot(L.v, h);
    Mat att(n, std::vector<double>(d, 0.0));
    for (std::size_t bi = 0; bi < b.batch; ++bi)
      for (std::size_t hd = 0; hd < H; ++hd) {
        if (!L.head_keep[hd]) continue;
        for (std::size_t t = 0; t < b.seq; ++t) {
          std::vector<double> sc(t + 1);
          double mx = -1e300;
          for (std::size_t s2 = 0; s2 <= t; ++s2) {
            double dot = 0;
            for (std::size_t j = 0; j < dh; ++j) dot += q[bi * b.seq + t][hd * dh + j] * k[bi * b.seq + s2][hd * dh + j];
            sc[s2] = dot / std::sqrt(static_cast<double>(dh));
            mx = std::max(mx, sc[s2]);
          }
          double z = 0;
          for (double& e : sc) z += (e = std::exp(e - mx));
          for (std::size_t s2 = 0; s2 <= t; ++s2)
            for (std::size_t j = 0; j < dh; ++j) att[bi * b.seq + t][hd * dh + j] += sc[s2] / z * v[bi * b.seq + s2][hd * dh + j];
        }
      }
    Mat o = slot(L.o, att);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) x[r][j] += o[r][j];
    Mat h2 = layer_norm(x, L.ln2_gamma, L.ln2_beta);
    Mat pre = slot(L.ffn_in, h2);
    if (L.moe) {
      const auto& moe = *L.moe;
      for (auto& row : pre) {
        std::vector<double> score(moe.n_experts, 0.0);
        for (std::size_t j = 0; j < row.size(); ++j)
          if (row[j] > 0) score[moe.assignment[j]] += row[j];
        std::vector<bool> chosen(moe.n_experts, false);
        for (std::size_t pick = 0; pick < moe.top_k; ++pick) {
          std::size_t best = moe.n_experts;
          for (std::size_t e = 0; e < moe.n_experts; ++e)
            if (!chosen[e] && (best == moe.n_experts || score[e] > score[best])) best = e;
          chosen[best] = true;
        }
        for (std::size_t j = 0; j < row.size(); ++j)
          if (!chosen[moe.assignment[j]]) row[j] = 0;
      }
    }
    for (auto& row : pre)
      for (double& e : row) e = ag::activate(c.activation, e);
    Mat f = slot(L.ffn_out, pre);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) x[r][j] += f[r][j];
  }
  Mat hf = layer_norm(x, m.final_gamma(), m.final_beta());
  std::vector<double> out;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t vv = 0; vv < c.vocab_size; ++vv) {
      double acc = 0;
      for (std::size_t j = 0; j < d; ++j) acc += val(m.head(), vv * d + j) * hf[r][j];
      out.push_back(acc);
    }
  return out;
}

}  // namespace calora::testing
