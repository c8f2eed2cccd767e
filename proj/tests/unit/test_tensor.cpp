#include <cmath>
#include <numbers>

#include "doctest.h"

#include "calora/tensor/kernels.hpp"
#include "calora/tensor/ops.hpp"
#include "calora/tensor/optim.hpp"
#include "support.hpp"

using namespace calora;
using calora::testing::gradcheck;
using calora::testing::random_tensor;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor<double>(Shape{r, c}, std::move(v));
}

// Keeps every element at least `gap` away from zero (activation kinks).
Tensor<double> away_from_zero(Tensor<double> t, double gap = 1e-2) {
  for (double& x : t.data())
    if (std::abs(x) < gap) x = x < 0 ? -gap - std::abs(x) : gap + x;
  return t;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("tensor rejects inconsistent shapes") {
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 0}), DimensionError);
  CHECK(Tensor<float>(Shape{2, 3}).numel() == 6);
  CHECK_THROWS_AS(Tensor<float>(Shape{2}).item(), ContractError);
}

TEST_CASE("bitwise_equal distinguishes signed zero") {
  Tensor<double> a(Shape{1}, {0.0}), b(Shape{1}, {-0.0});
  CHECK(a == b);
  CHECK_FALSE(bitwise_equal(a, b));
}

TEST_CASE("matmul hand examples") {
  Tape<double> tape;
  Tensor<double> eye = mat(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(1);
  Tensor<double> b = random_tensor({3, 5}, rng);
  auto out = ag::matmul(tape.constant(eye), tape.constant(b));
  CHECK(bitwise_equal(out.value(), b));

  auto r = ag::matmul(tape.constant(mat(2, 2, {1, 2, 3, 4})), tape.constant(mat(2, 1, {0, 1})));
  CHECK(r.value() == mat(2, 1, {2, 4}));

  CHECK_THROWS_AS(ag::matmul(tape.constant(mat(2, 2, {1, 2, 3, 4})), tape.constant(b)),
                  DimensionError);
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(2);
  auto a = make_param("a", random_tensor({4, 5}, rng));
  auto b = make_param("b", random_tensor({5, 3}, rng));
  const double err = gradcheck(
      [&](Tape<double>& t) { return ag::sum(ag::matmul(t.parameter(a), t.parameter(b))); }, {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("linear gradient vs finite differences") {
  Rng rng(3);
  auto x = make_param("x", random_tensor({6, 5}, rng));
  auto w = make_param("w", random_tensor({4, 5}, rng));
  auto bias = make_param("b", random_tensor({4}, rng));
  auto probe = random_tensor({6, 4}, rng);
  const double err = gradcheck(
      [&](Tape<double>& t) {
        auto y = ag::linear(t.parameter(x), t.parameter(w), t.parameter(bias));
        return ag::sum(ag::mul(y, t.constant(probe)));
      },
      {x, w, bias});
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise examples") {
  Tape<double> tape;
  auto r = ag::relu(tape.constant(Tensor<double>(Shape{3}, {-1, 0, 2})));
  CHECK(r.value() == Tensor<double>(Shape{3}, {0, 0, 2}));
  CHECK(ag::activate(ag::Activation::kGelu, 0.0) == 0.0);
  CHECK(ag::activate_grad(ag::Activation::kRelu, 0.0) == 0.0);
  CHECK(ag::activate_grad(ag::Activation::kRelu, 1.0) == 1.0);

  auto a = tape.constant(mat(2, 3, {1, 2, 3, 4, 5, 6}));
  auto row = tape.constant(Tensor<double>(Shape{3}, {10, 20, 30}));
  CHECK(ag::add(a, row).value() == mat(2, 3, {11, 22, 33, 14, 25, 36}));
  CHECK(ag::sub(a, tape.constant(Tensor<double>::scalar(1))).value() == mat(2, 3, {0, 1, 2, 3, 4, 5}));
  CHECK(ag::scale(a, 2.0).value() == mat(2, 3, {2, 4, 6, 8, 10, 12}));
  CHECK_THROWS_AS(ag::add(a, tape.constant(Tensor<double>(Shape{2}, {1, 2}))), DimensionError);
}

TEST_CASE("elementwise gradients vs finite differences") {
  Rng rng(4);
  auto x = make_param("x", away_from_zero(random_tensor({3, 4}, rng)));
  auto y = make_param("y", random_tensor({3, 4}, rng));
  auto row = make_param("row", random_tensor({4}, rng));
  auto s = make_param("s", random_tensor({}, rng));
  using ag::Activation;
  for (Activation act : {Activation::kRelu, Activation::kGelu, Activation::kTanh, Activation::kIdentity}) {
    CAPTURE(ag::to_string(act));
    const double err = gradcheck(
        [&](Tape<double>& t) { return ag::sum(ag::mul(ag::activation(t.parameter(x), act), t.parameter(y))); },
        {x, y});
    CHECK(err < 1e-5);
  }
  const double err = gradcheck(
      [&](Tape<double>& t) {
        auto a = ag::add(t.parameter(x), t.parameter(row));
        auto b = ag::sub(a, t.parameter(s));
        auto c = ag::mul(b, t.parameter(row));
        return ag::mean(ag::mul(ag::scale(c, 0.5), t.parameter(y)));
      },
      {x, y, row, s});
  CHECK(err < 1e-6);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(5);
  Tape<double> tape;
  auto p = ag::softmax(tape.constant(random_tensor({7, 11}, rng, 5.0)));
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 11; ++c) s += p.value().at(r, c);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax cross entropy") {
  Tape<double> tape;
  std::vector<std::size_t> t1{0, 3};
  auto uniform = ag::softmax_cross_entropy(tape.constant(Tensor<double>(Shape{2, 4})), std::span<const std::size_t>(t1));
  CHECK(uniform.value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  double prev = 1e9;
  for (double margin : {1.0, 10.0, 100.0, 1000.0}) {
    std::vector<std::size_t> t{1};
    auto l = ag::softmax_cross_entropy(tape.constant(Tensor<double>(Shape{1, 3}, {0, margin, 0})),
                                       std::span<const std::size_t>(t));
    CHECK(l.value().item() <= prev);
    CHECK(std::isfinite(l.value().item()));
    prev = l.value().item();
  }
  CHECK(prev < 1e-12);

  Rng rng(6);
  Tensor<double> logits = random_tensor({8, 10}, rng, 2.0);
  std::vector<std::size_t> targets;
  for (int i = 0; i < 8; ++i) targets.push_back(rng.uniform_int(10));
  double naive = 0;
  for (std::size_t r = 0; r < 8; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 10; ++c) z += std::exp(logits.at(r, c));
    naive += -std::log(std::exp(logits.at(r, targets[r])) / z);
  }
  naive /= 8;
  auto l = ag::softmax_cross_entropy(tape.constant(logits), std::span<const std::size_t>(targets));
  CHECK(std::abs(l.value().item() - naive) < 1e-8);

  std::vector<std::size_t> bad{0, 4};
  CHECK_THROWS_AS(ag::softmax_cross_entropy(tape.constant(Tensor<double>(Shape{2, 4})), std::span<const std::size_t>(bad)),
                  IndexError);

  auto lp = make_param("l", logits);
  const double err = gradcheck(
      [&](Tape<double>& t) { return ag::softmax_cross_entropy(t.parameter(lp), std::span<const std::size_t>(targets)); },
      {lp});
  CHECK(err < 1e-5);
}

TEST_CASE("mse") {
  Tape<double> tape;
  Rng rng(7);
  Tensor<double> a = random_tensor({3, 4}, rng);
  CHECK(ag::mse(tape.constant(a), tape.constant(a)).value().item() == 0.0);
  CHECK(ag::mse(tape.constant(Tensor<double>(Shape{2})), tape.constant(Tensor<double>::full(Shape{2}, 1.0)))
            .value()
            .item() == 1.0);
  CHECK_THROWS_AS(ag::mse(tape.constant(a), tape.constant(Tensor<double>(Shape{4, 3}))), DimensionError);

  auto pa = make_param("a", a);
  auto pb = make_param("b", random_tensor({3, 4}, rng));
  CHECK(gradcheck([&](Tape<double>& t) { return ag::mse(t.parameter(pa), t.parameter(pb)); }, {pa, pb}) < 1e-6);
}

TEST_CASE("layer norm, embedding, select_rows, reshape, softmax gradients") {
  Rng rng(8);
  auto x = make_param("x", random_tensor({5, 6}, rng));
  auto g = make_param("g", random_tensor({6}, rng));
  auto b = make_param("b", random_tensor({6}, rng));
  auto probe = random_tensor({5, 6}, rng);
  CHECK(gradcheck(
            [&](Tape<double>& t) {
              auto y = ag::layer_norm(t.parameter(x), t.parameter(g), t.parameter(b));
              return ag::sum(ag::mul(y, t.constant(probe)));
            },
            {x, g, b}) < 1e-6);

  auto table = make_param("table", random_tensor({9, 4}, rng));
  std::vector<std::size_t> ids{3, 0, 3, 8, 1};
  auto probe2 = random_tensor({5, 4}, rng);
  CHECK(gradcheck(
            [&](Tape<double>& t) {
              auto e = ag::embedding(t.parameter(table), std::span<const std::size_t>(ids));
              return ag::sum(ag::mul(e, t.constant(probe2)));
            },
            {table}) < 1e-6);
  {
    Tape<double> t;
    std::vector<std::size_t> oob{9};
    CHECK_THROWS_AS(ag::embedding(t.parameter(table), std::span<const std::size_t>(oob)), IndexError);
  }

  std::vector<std::size_t> rows{4, 1};
  auto probe3 = random_tensor({2, 6}, rng);
  CHECK(gradcheck(
            [&](Tape<double>& t) {
              auto s = ag::softmax(ag::select_rows(t.parameter(x), std::span<const std::size_t>(rows)));
              return ag::sum(ag::mul(s, t.constant(probe3)));
            },
            {x}) < 1e-6);

  auto probe4 = random_tensor({3, 10}, rng);
  CHECK(gradcheck(
            [&](Tape<double>& t) {
              return ag::sum(ag::mul(ag::reshape(t.parameter(x), {3, 10}), t.constant(probe4)));
            },
            {x}) < 1e-6);
}

TEST_CASE("causal attention gradient and causality") {
  Rng rng(9);
  const std::size_t batch = 2, seq = 3, d = 8, heads = 2;
  auto q = make_param("q", random_tensor({batch * seq, d}, rng));
  auto k = make_param("k", random_tensor({batch * seq, d}, rng));
  auto v = make_param("v", random_tensor({batch * seq, d}, rng));
  auto probe = random_tensor({batch * seq, d}, rng);
  for (std::vector<bool> keep : {std::vector<bool>{true, true}, std::vector<bool>{false, true}}) {
    CHECK(gradcheck(
              [&](Tape<double>& t) {
                auto o = ag::causal_attention(t.parameter(q), t.parameter(k), t.parameter(v), batch, seq,
                                              heads, keep);
                return ag::sum(ag::mul(o, t.constant(probe)));
              },
              {q, k, v}) < 1e-6);
  }
  // Changing the last position of a sequence leaves earlier outputs alone.
  Tape<double> t1, t2;
  std::vector<bool> keep{true, true};
  auto o1 = ag::causal_attention(t1.parameter(q), t1.parameter(k), t1.parameter(v), batch, seq, heads, keep);
  Tensor<double> v2 = v->value;
  for (std::size_t c = 0; c < d; ++c) v2.at(seq - 1, c) += 1.0;
  auto o2 = ag::causal_attention(t2.parameter(q), t2.parameter(k), t2.constant(v2), batch, seq, heads, keep);
  for (std::size_t r = 0; r < seq - 1; ++r)
    for (std::size_t c = 0; c < d; ++c) CHECK(o1.value().at(r, c) == o2.value().at(r, c));
  // A dropped head writes zeros.
  Tape<double> t3;
  auto o3 = ag::causal_attention(t3.parameter(q), t3.parameter(k), t3.parameter(v), batch, seq, heads,
                                 {false, true});
  for (std::size_t r = 0; r < batch * seq; ++r)
    for (std::size_t c = 0; c < d / heads; ++c) CHECK(o3.value().at(r, c) == 0.0);
}

TEST_CASE("backward examples") {
  auto x = make_param("x", Tensor<double>::scalar(1.5));
  {
    Tape<double> t;
    t.backward(ag::scale(t.parameter(x), 3.0));
    CHECK(x->grad.item() == 3.0);
  }
  x->zero_grad();
  {
    Tape<double> t;
    auto v = t.parameter(x);
    t.backward(ag::add(v, v));
    CHECK(x->grad.item() == 2.0);
  }
  {
    Tape<double> t;
    auto m = make_param("m", Tensor<double>(Shape{2, 2}));
    CHECK_THROWS_AS(t.backward(t.parameter(m)), ContractError);
  }
}

TEST_CASE("backward visits each node once") {
  auto x = make_param("x", Tensor<double>(Shape{3}, {1, 2, 3}));
  Tape<double> t;
  auto v = t.parameter(x);
  auto a = ag::mul(v, v);
  auto b = ag::add(a, a);
  auto c = ag::add(b, a);
  auto root = ag::sum(c);
  t.backward(root);
  CHECK(t.last_backward_visits() == t.size());
}

TEST_CASE("shared subexpression equals expanded graph") {
  Rng rng(10);
  auto x = make_param("x", random_tensor({4, 3}, rng));
  auto w = make_param("w", random_tensor({3, 3}, rng));
  {
    Tape<double> t;
    auto h = ag::tanh(ag::matmul(t.parameter(x), t.parameter(w)));
    t.backward(ag::sum(ag::mul(h, h)));
  }
  const Tensor<double> gx = x->grad, gw = w->grad;
  x->zero_grad();
  w->zero_grad();
  {
    Tape<double> t;
    auto h1 = ag::tanh(ag::matmul(t.parameter(x), t.parameter(w)));
    auto h2 = ag::tanh(ag::matmul(t.parameter(x), t.parameter(w)));
    t.backward(ag::sum(ag::mul(h1, h2)));
  }
  CHECK(calora::testing::max_rel_error(gx, x->grad) < 1e-12);
  CHECK(calora::testing::max_rel_error(gw, w->grad) < 1e-12);
}

TEST_CASE("grad-disabled tape records constants") {
  auto x = make_param("x", Tensor<double>::scalar(2.0));
  Tape<double> t(false);
  auto y = ag::scale(t.parameter(x), 3.0);
  CHECK_FALSE(y.requires_grad());
  t.backward(y);
  CHECK_FALSE(x->has_grad());
}

TEST_CASE("adamw") {
  SUBCASE("zero grad and zero decay leaves params unchanged") {
    auto p = make_param("p", Tensor<double>(Shape{3}, {1, -2, 3}));
    p->grad = Tensor<double>(Shape{3});
    AdamWState<double> st;
    adamw_step<double>({p}, st, {.lr = 0.1, .weight_decay = 0.0});
    CHECK(p->value == Tensor<double>(Shape{3}, {1, -2, 3}));
    CHECK(st.step == 1);
  }
  SUBCASE("hand oracle over two steps") {
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.1;
    auto p = make_param("p", Tensor<double>::scalar(0.5));
    AdamWState<double> st;
    double w = 0.5, m = 0, v = 0;
    for (int step = 1; step <= 2; ++step) {
      const double g = step == 1 ? 0.3 : -0.7;
      p->grad = Tensor<double>::scalar(g);
      adamw_step<double>({p}, st, {.lr = lr, .beta1 = b1, .beta2 = b2, .eps = eps, .weight_decay = wd});
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g * g;
      const double mh = m / (1 - std::pow(b1, step)), vh = v / (1 - std::pow(b2, step));
      w = w - lr * (mh / (std::sqrt(vh) + eps) + wd * w);
      CHECK(std::abs(p->value.item() - w) < 1e-12);
      CHECK(std::abs(st.m[0].item() - m) < 1e-12);
      CHECK(std::abs(st.v[0].item() - v) < 1e-12);
    }
  }
  SUBCASE("decay on a grad-free param") {
    const double lr = 0.05, w0 = 2.0;
    auto p = make_param("p", Tensor<double>::scalar(w0));
    AdamWState<double> st;
    adamw_step<double>({p}, st, {.lr = lr, .weight_decay = 1e-2});
    CHECK(std::abs((w0 - p->value.item()) - lr * 1e-2 * w0) < 1e-15);
  }
  SUBCASE("non-finite gradient raises with step index") {
    auto p = make_param("p", Tensor<double>::scalar(1.0));
    AdamWState<double> st;
    p->grad = Tensor<double>::scalar(0.1);
    adamw_step<double>({p}, st, {});
    p->grad = Tensor<double>::scalar(std::nan(""));
    try {
      adamw_step<double>({p}, st, {});
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(e.step() == 2);
    }
  }
}

TEST_CASE("rng determinism and ranges") {
  Rng a(42, 3), b(42, 3), c(42, 4);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
  // mt19937_64 default-seeded 10000th output is fixed by the standard; the
  // mixed seed path is checked against a recorded draw instead.
  std::mt19937_64 ref;
  ref.discard(9999);
  CHECK(ref() == 9981545732273789042ULL);

  Rng r(7);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    CHECK(r.uniform_int(7) < 7);
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);

  Rng f1 = Rng(5).fork(1), f2 = Rng(5).fork(1);
  CHECK(f1.next_u64() == f2.next_u64());
}

TEST_CASE("serial and parallel kernels agree bitwise") {
  Rng rng(11);
  const int saved = kernels::parallel::max_threads();
  kernels::parallel::set_threads(4);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{3, 4, 5}, {67, 45, 33}, {129, 64, 70}}) {
    auto a = calora::testing::random_tensor_f({m, k}, rng);
    auto b = calora::testing::random_tensor_f({k, n}, rng);
    auto bt = calora::testing::random_tensor_f({n, k}, rng);
    auto at = calora::testing::random_tensor_f({k, m}, rng);
    auto init = calora::testing::random_tensor_f({m, n}, rng);
    for (bool acc : {false, true}) {
      Tensor<float> s = init, p = init;
      kernels::serial::gemm_nn(m, k, n, a.data(), b.data(), s.data(), acc);
      kernels::parallel::gemm_nn(m, k, n, a.data(), b.data(), p.data(), acc);
      CHECK(bitwise_equal(s, p));
      s = init;
      p = init;
      kernels::serial::gemm_nt(m, k, n, a.data(), bt.data(), s.data(), acc);
      kernels::parallel::gemm_nt(m, k, n, a.data(), bt.data(), p.data(), acc);
      CHECK(bitwise_equal(s, p));
      s = init;
      p = init;
      kernels::serial::gemm_tn(m, k, n, at.data(), b.data(), s.data(), acc);
      kernels::parallel::gemm_tn(m, k, n, at.data(), b.data(), p.data(), acc);
      CHECK(bitwise_equal(s, p));
    }
  }
  auto x = calora::testing::random_tensor({40000}, rng);
  auto y = calora::testing::random_tensor({40000}, rng);
  Tensor<double> ys = y, yp = y, hs(Shape{40000}), hp(Shape{40000});
  kernels::serial::axpy(0.37, x.data(), ys.data());
  kernels::parallel::axpy(0.37, x.data(), yp.data());
  CHECK(bitwise_equal(ys, yp));
  kernels::serial::hadamard(x.data(), y.data(), hs.data());
  kernels::parallel::hadamard(x.data(), y.data(), hp.data());
  CHECK(bitwise_equal(hs, hp));
  kernels::parallel::set_threads(saved);
}

TEST_CASE("gemm matches naive product") {
  Rng rng(12);
  auto a = random_tensor({5, 7}, rng);
  auto b = random_tensor({7, 3}, rng);
  Tensor<double> c(Shape{5, 3});
  kernels::serial::gemm_nn(5, 7, 3, a.data(), b.data(), c.data(), false);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t l = 0; l < 7; ++l) s += a.at(i, l) * b.at(l, j);
      CHECK(std::abs(c.at(i, j) - s) < 1e-12);
    }
}

}  // TEST_SUITE
