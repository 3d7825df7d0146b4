#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "vpt/adam.hpp"
#include "vpt/errors.hpp"
#include "vpt/rng.hpp"
#include "vpt/tensor.hpp"

using namespace vptlab;
using vptest::DTensor;
using vptest::DTape;
using vptest::gradcheck;
using vptest::probe_loss;
using vptest::random_input;
using vptest::random_probe;

namespace {
constexpr double kGradTol = 1e-4;
constexpr int kGradSeeds = 22;
}  // namespace

TEST_CASE("matmul identity and hand fixtures") {
  auto i2 = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
  auto a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  auto out = matmul<float>(nullptr, i2, a);
  for (int i = 0; i < 4; ++i) CHECK((*out.data)[i] == (*a.data)[i]);

  auto row = Tensor::from_vector({1, 2}, {1, 2});
  auto col = Tensor::from_vector({2, 1}, {3, 4});
  auto prod = matmul<float>(nullptr, row, col);
  CHECK(prod.value() == doctest::Approx(11.0).epsilon(1e-9));
}

TEST_CASE("matmul random against naive triple-loop oracle") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(900 + seed);
    auto a = random_input({3, 4}, rng);
    auto b = random_input({4, 2}, rng);
    auto out = matmul<double>(nullptr, a, b);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 2; ++j) {
        double want = 0;
        for (int k = 0; k < 4; ++k) want += a.at(i, k) * b.at(k, j);
        CHECK(out.at(i, j) == doctest::Approx(want).epsilon(1e-12));
      }
    }
    // matmul_nt(a, b^T-layout) equals matmul(a, b)
    auto bt = DTensor::zeros({2, 4});
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 2; ++j) bt.at(j, i) = b.at(i, j);
    }
    auto out2 = matmul_nt<double>(nullptr, a, bt);
    for (size_t i = 0; i < out.data->size(); ++i) {
      CHECK((*out2.data)[i] == doctest::Approx((*out.data)[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("softmax fixtures") {
  auto u = Tensor::from_vector({1, 3}, {1, 1, 1});
  auto su = softmax<float>(nullptr, u);
  for (int j = 0; j < 3; ++j) CHECK(su.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-6));

  auto v = Tensor::from_vector({1, 2}, {0.0f, std::log(2.0f)});
  auto sv = softmax<float>(nullptr, v);
  CHECK(sv.at(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-6));
  CHECK(sv.at(0, 1) == doctest::Approx(2.0 / 3).epsilon(1e-6));

  auto big = Tensor::from_vector({1, 2}, {1000, 1001});
  auto small = Tensor::from_vector({1, 2}, {0, 1});
  auto sbig = softmax<float>(nullptr, big);
  auto ssmall = softmax<float>(nullptr, small);
  CHECK(sbig.all_finite());
  for (int j = 0; j < 2; ++j) CHECK(sbig.at(0, j) == ssmall.at(0, j));
}

TEST_CASE("softmax rows sum to one on random input") {
  Rng rng(7);
  auto x = random_input({5, 8}, rng, -4.0, 4.0);
  auto s0 = softmax<double>(nullptr, x, 1);
  for (int i = 0; i < 5; ++i) {
    double sum = 0;
    for (int j = 0; j < 8; ++j) {
      sum += s0.at(i, j);
      CHECK(s0.at(i, j) >= 0.0);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
  auto s1 = softmax<double>(nullptr, x, 0);
  for (int j = 0; j < 8; ++j) {
    double sum = 0;
    for (int i = 0; i < 5; ++i) sum += s1.at(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("cross entropy fixtures") {
  auto uniform = Tensor::zeros({1, 4});
  auto loss = cross_entropy<float>(nullptr, uniform, {2}, 0 /*pad_id; target is 2*/);
  CHECK(loss.value() == doctest::Approx(std::log(4.0)).epsilon(1e-6));

  // margin pushes the loss toward 0
  auto sharp = Tensor::from_vector({1, 3}, {0, 40, 0});
  auto sharp_loss = cross_entropy<float>(nullptr, sharp, {1}, 0);
  CHECK(sharp_loss.value() < 1e-6);

  // random instance vs per-position -log p oracle, pads skipped
  Rng rng(11);
  auto logits = random_input({4, 6}, rng, -2.0, 2.0);
  std::vector<int> targets = {3, 0, 5, 0};  // pad_id 0 at positions 1 and 3
  auto got = cross_entropy<double>(nullptr, logits, targets, 0);
  double want = 0;
  int n_valid = 0;
  for (int t = 0; t < 4; ++t) {
    if (targets[t] == 0) continue;
    double denom = 0;
    for (int j = 0; j < 6; ++j) denom += std::exp(logits.at(t, j));
    want -= std::log(std::exp(logits.at(t, targets[t])) / denom);
    n_valid++;
  }
  CHECK(got.value() == doctest::Approx(want / n_valid).epsilon(1e-9));

  CHECK_THROWS_AS(cross_entropy<float>(nullptr, uniform, {7}, 0), std::out_of_range);
  CHECK_THROWS_AS(cross_entropy<float>(nullptr, uniform, {0}, 0), usage_error);
}

TEST_CASE("backward basics") {
  DTape tape;
  auto p = DTensor::from_vector({2, 2}, {1, 2, 3, 4}, true);
  auto s = sum_all(&tape, p);
  tape.backward(s);
  for (int i = 0; i < 4; ++i) CHECK((*p.grad)[i] == doctest::Approx(1.0));

  DTape tape2;
  p.zero_grad();
  auto half_sq = scale(&tape2, sum_all(&tape2, mul(&tape2, p, p)), 0.5);
  tape2.backward(half_sq);
  for (int i = 0; i < 4; ++i) CHECK((*p.grad)[i] == doctest::Approx((*p.data)[i]));

  DTape empty;
  auto loose = DTensor::scalar(1.0);
  CHECK_THROWS_AS(empty.backward(loose), usage_error);
}

TEST_CASE("gradcheck: matmul and matmul_nt") {
  for (uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(1000 + seed);
    const int m = 1 + static_cast<int>(rng.randint(7));
    const int k = 1 + static_cast<int>(rng.randint(7));
    const int n = 1 + static_cast<int>(rng.randint(7));
    auto a = random_input({m, k}, rng);
    auto b = random_input({k, n}, rng);
    auto w = random_probe({m, n}, rng);
    auto rep = gradcheck(
        [&](DTape* t) { return probe_loss(t, matmul(t, a, b), w); }, {a, b});
    CHECK(rep.max_rel_err < kGradTol);

    auto bt = random_input({n, k}, rng);
    auto rep2 = gradcheck(
        [&](DTape* t) { return probe_loss(t, matmul_nt(t, a, bt), w); }, {a, bt});
    CHECK(rep2.max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck: add, add_bias, mul, scale") {
  for (uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(2000 + seed);
    const int m = 1 + static_cast<int>(rng.randint(7));
    const int n = 1 + static_cast<int>(rng.randint(7));
    auto a = random_input({m, n}, rng);
    auto b = random_input({m, n}, rng);
    auto bias = random_input({1, n}, rng);
    auto w = random_probe({m, n}, rng);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, add(t, a, b), w); }, {a, b}).max_rel_err <
          kGradTol);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, add_bias(t, a, bias), w); }, {a, bias})
              .max_rel_err < kGradTol);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, mul(t, a, b), w); }, {a, b}).max_rel_err <
          kGradTol);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, scale(t, a, 1.7), w); }, {a}).max_rel_err <
          kGradTol);
  }
}

TEST_CASE("gradcheck: concat, slice, reshape, embedding") {
  for (uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(3000 + seed);
    const int m = 2 + static_cast<int>(rng.randint(5));
    const int n = 2 + static_cast<int>(rng.randint(5));
    auto a = random_input({m, n}, rng);
    auto b = random_input({m, n}, rng);
    auto wr = random_probe({2 * m, n}, rng);
    auto wc = random_probe({m, 2 * n}, rng);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, concat_rows(t, a, b), wr); }, {a, b})
              .max_rel_err < kGradTol);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, concat_cols(t, a, b), wc); }, {a, b})
              .max_rel_err < kGradTol);

    const int r0 = static_cast<int>(rng.randint(m));
    const int rl = 1 + static_cast<int>(rng.randint(m - r0));
    auto wsr = random_probe({rl, n}, rng);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, slice_rows(t, a, r0, rl), wsr); }, {a})
              .max_rel_err < kGradTol);

    const int c0 = static_cast<int>(rng.randint(n));
    const int cl = 1 + static_cast<int>(rng.randint(n - c0));
    auto wsc = random_probe({m, cl}, rng);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, slice_cols(t, a, c0, cl), wsc); }, {a})
              .max_rel_err < kGradTol);

    auto wre = random_probe({n, m}, rng);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, reshape(t, a, {n, m}), wre); }, {a})
              .max_rel_err < kGradTol);

    // embedding with a repeated id exercises scatter-add accumulation
    auto table = random_input({5, n}, rng);
    std::vector<int> ids = {0, 3, 3, static_cast<int>(rng.randint(5))};
    auto we = random_probe({4, n}, rng);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, embedding_rows(t, table, ids), we); },
                    {table})
              .max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck: gelu, softplus, softmax") {
  for (uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(4000 + seed);
    const int m = 1 + static_cast<int>(rng.randint(7));
    const int n = 1 + static_cast<int>(rng.randint(7));
    auto a = random_input({m, n}, rng, -2.0, 2.0);
    auto w = random_probe({m, n}, rng);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, gelu(t, a), w); }, {a}).max_rel_err <
          kGradTol);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, softplus(t, a), w); }, {a}).max_rel_err <
          kGradTol);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, softmax(t, a, 1), w); }, {a}).max_rel_err <
          kGradTol);
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, softmax(t, a, 0), w); }, {a}).max_rel_err <
          kGradTol);
  }
}

TEST_CASE("gradcheck: layer_norm and batch_norm") {
  for (uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(5000 + seed);
    const int m = 2 + static_cast<int>(rng.randint(6));
    const int n = 2 + static_cast<int>(rng.randint(6));
    auto x = random_input({m, n}, rng);
    auto gamma = random_input({1, n}, rng, 0.5, 1.5);
    auto beta = random_input({1, n}, rng);
    auto w = random_probe({m, n}, rng);
    // h = 1e-4 here: normalization curvature near low-variance rows makes
    // h = 1e-3 central differences exceed their own truncation budget
    CHECK(gradcheck([&](DTape* t) { return probe_loss(t, layer_norm(t, x, gamma, beta), w); },
                    {x, gamma, beta}, 1e-4)
              .max_rel_err < kGradTol);

    CHECK(gradcheck(
              [&](DTape* t) {
                BatchNormStateT<double> fresh(n);
                return probe_loss(t, batch_norm(t, x, gamma, beta, fresh, true), w);
              },
              {x, gamma, beta}, 1e-4)
              .max_rel_err < kGradTol);

    // eval mode against fixed running stats
    BatchNormStateT<double> state(n);
    for (int j = 0; j < n; ++j) {
      state.running_mean[j] = rng.uniform(-0.5, 0.5);
      state.running_var[j] = rng.uniform(0.5, 1.5);
    }
    CHECK(gradcheck(
              [&](DTape* t) {
                return probe_loss(t, batch_norm(t, x, gamma, beta, state, false), w);
              },
              {x, gamma, beta}, 1e-4)
              .max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck: dropout with frozen mask") {
  for (uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(6000 + seed);
    auto x = random_input({4, 5}, rng);
    auto w = random_probe({4, 5}, rng);
    const uint64_t mask_seed = 77 + seed;
    CHECK(gradcheck(
              [&](DTape* t) {
                Rng r(mask_seed);
                return probe_loss(t, dropout(t, x, 0.3, r, true), w);
              },
              {x})
              .max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck: cross_entropy and kl_gaussian") {
  for (uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(7000 + seed);
    const int steps = 2 + static_cast<int>(rng.randint(5));
    const int vocab = 3 + static_cast<int>(rng.randint(5));
    auto logits = random_input({steps, vocab}, rng, -2.0, 2.0);
    std::vector<int> targets(steps);
    for (int t = 0; t < steps; ++t) targets[t] = static_cast<int>(rng.randint(vocab));
    targets[steps - 1] = 0;  // one pad position
    bool has_valid = false;
    for (int t : targets) has_valid = has_valid || t != 0;
    if (!has_valid) targets[0] = 1;
    CHECK(gradcheck([&](DTape* t) { return cross_entropy(t, logits, targets, 0); }, {logits})
              .max_rel_err < kGradTol);

    const int dim = 1 + static_cast<int>(rng.randint(7));
    auto mu_q = random_input({2, dim}, rng);
    auto sigma_q = random_input({2, dim}, rng, 0.4, 1.8);
    auto mu_p = random_input({2, dim}, rng);
    CHECK(gradcheck([&](DTape* t) { return kl_gaussian(t, mu_q, sigma_q, mu_p, 2); },
                    {mu_q, sigma_q, mu_p})
              .max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck: sum_all and mean_all") {
  for (uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(8000 + seed);
    auto a = random_input({3, 4}, rng);
    CHECK(gradcheck([&](DTape* t) { return sum_all(t, a); }, {a}).max_rel_err < kGradTol);
    CHECK(gradcheck([&](DTape* t) { return mean_all(t, a); }, {a}).max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck: composite transformer-style block") {
  for (uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(9000 + seed);
    const int len = 3, d = 4;
    auto x = random_input({len, d}, rng);
    auto wq = random_input({d, d}, rng, -0.5, 0.5);
    auto wk = random_input({d, d}, rng, -0.5, 0.5);
    auto wv = random_input({d, d}, rng, -0.5, 0.5);
    auto gamma = random_input({1, d}, rng, 0.8, 1.2);
    auto beta = random_input({1, d}, rng, -0.1, 0.1);
    auto w = random_probe({len, d}, rng);
    auto block = [&](DTape* t) {
      auto ln = layer_norm(t, x, gamma, beta);
      auto q = matmul(t, ln, wq);
      auto k = matmul(t, ln, wk);
      auto v = matmul(t, ln, wv);
      auto att = softmax(t, scale(t, matmul_nt(t, q, k), 0.5), 1);
      auto ctx = matmul(t, att, v);
      auto res = add(t, x, gelu(t, ctx));
      return probe_loss(t, res, w);
    };
    CHECK(gradcheck(block, {x, wq, wk, wv, gamma, beta}).max_rel_err < kGradTol);
  }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  auto p = DTensor::from_vector({2, 2}, {1, 2, 3, 4}, true);
  AdamT<double> opt({.lr = 0.1});
  ParamListT<double> params = {{"p", &p}};
  opt.step(params);
  CHECK((*p.data)[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((*p.data)[3] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("adam: first-step update equals -lr*g/(|g|+eps)") {
  auto p = DTensor::from_vector({1, 2}, {1.0, -2.0}, true);
  (*p.grad)[0] = 2.0;
  (*p.grad)[1] = -0.5;
  AdamT<double> opt({.lr = 0.1});
  ParamListT<double> params = {{"p", &p}};
  opt.step(params);
  CHECK((*p.data)[0] == doctest::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));
  CHECK((*p.data)[1] == doctest::Approx(-2.0 + 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam: quadratic bowl converges below 1e-3 in 100 steps") {
  // oracle: scalar reference run of the same recurrence gives p = 0.0029367,
  // f = 8.624e-6
  auto p = DTensor::from_vector({1, 1}, {1.0}, true);
  AdamT<double> opt({.lr = 0.1});
  ParamListT<double> params = {{"p", &p}};
  for (int step = 0; step < 100; ++step) {
    p.zero_grad();
    (*p.grad)[0] = 2.0 * (*p.data)[0];
    opt.step(params);
  }
  const double f = (*p.data)[0] * (*p.data)[0];
  CHECK(f < 1e-3);
  CHECK((*p.data)[0] == doctest::Approx(0.002936675681102549).epsilon(1e-9));
}

TEST_CASE("adam: NaN gradient raises numeric error") {
  auto p = DTensor::from_vector({1, 1}, {1.0}, true);
  (*p.grad)[0] = std::numeric_limits<double>::quiet_NaN();
  AdamT<double> opt;
  ParamListT<double> params = {{"p", &p}};
  CHECK_THROWS_AS(opt.step(params), numeric_error);
}

TEST_CASE("determinism: identical seed and inputs give identical outputs") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto x = random_input({4, 4}, rng);
    auto w = random_input({4, 4}, rng);
    Rng drop_rng(seed + 1);
    auto y = dropout<double>(nullptr, gelu<double>(nullptr, matmul<double>(nullptr, x, w)), 0.2,
                             drop_rng, true);
    return *y.data;
  };
  auto a = run(42);
  auto b = run(42);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("rng: box-muller moments and fork independence") {
  Rng rng(1234);
  double sum = 0, sum_sq = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sum_sq += v * v;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(0.02));
  CHECK(sum_sq / n == doctest::Approx(1.0).epsilon(0.02));

  Rng base(9);
  Rng f1 = base.fork(1);
  Rng f2 = base.fork(2);
  Rng f1b = Rng(9).fork(1);
  CHECK(f1.next_u64() != f2.next_u64());
  CHECK(Rng(9).fork(1).next_u64() == f1b.next_u64());
}

TEST_CASE("dropout semantics") {
  Rng rng(5);
  auto x = Tensor::full({100, 10}, 1.0f);
  auto eval_out = dropout<float>(nullptr, x, 0.4f, rng, false);
  CHECK(eval_out.data == x.data);  // identity pass-through

  auto train_out = dropout<float>(nullptr, x, 0.4f, rng, true);
  int zeros = 0;
  double total = 0;
  for (float v : *train_out.data) {
    if (v == 0.0f) {
      zeros++;
    } else {
      CHECK(v == doctest::Approx(1.0f / 0.6f).epsilon(1e-6));
    }
    total += v;
  }
  CHECK(zeros / 1000.0 == doctest::Approx(0.4).epsilon(0.05));
  CHECK(total / 1000.0 == doctest::Approx(1.0).epsilon(0.05));
  CHECK_THROWS_AS(dropout<float>(nullptr, x, 1.0f, rng, true), usage_error);
}

TEST_CASE("shape errors are reported") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(matmul<float>(nullptr, a, b), shape_error);
  CHECK_THROWS_AS(add<float>(nullptr, a, Tensor::zeros({3, 2})), shape_error);
  CHECK_THROWS_AS(slice_rows<float>(nullptr, a, 1, 5), shape_error);
  CHECK_THROWS_AS(reshape<float>(nullptr, a, {4, 4}), shape_error);
  CHECK_THROWS_AS(Tensor::from_vector({2, 2}, {1, 2, 3}), shape_error);
}

TEST_CASE("finite check surfaces NaN") {
  auto t = Tensor::from_vector({1, 2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  CHECK_THROWS_AS(check_finite(t, "probe"), numeric_error);
}
