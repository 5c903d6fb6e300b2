#include "doctest.h"

#include <cmath>

#include "leaf/numerics.hpp"
#include "test_util.hpp"

using namespace leaf;
using leaf::testing::random_stochastic;
using leaf::testing::random_tensor;

namespace {

Tensor2 triple_loop_matmul(const Tensor2& a, const Tensor2& b) {
  Tensor2 c = Tensor2::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) acc += static_cast<double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<float>(acc);
    }
  return c;
}

// Weighted sum of outputs: gives every output entry a distinct upstream.
double weighted(const Tensor2& y, const Tensor2& w) { return y.cast<double>().cwiseProduct(w.cast<double>()).sum(); }

}  // namespace

TEST_CASE("matmul matches hand cases and the triple-loop oracle") {
  Tensor2 eye = Tensor2::Identity(2, 2);
  Tensor2 m(2, 2);
  m << 1, 2, 3, 4;
  CHECK(matmul(eye, m) == m);

  Tensor2 a(1, 2), b(2, 1);
  a << 1, 0;
  b << 0, 5;
  CHECK(matmul(a, b)(0, 0) == 0.0f);

  Rng rng(7);
  const Tensor2 x = random_tensor(3, 4, rng);
  const Tensor2 y = random_tensor(4, 2, rng);
  CHECK((matmul(x, y) - triple_loop_matmul(x, y)).cwiseAbs().maxCoeff() <= 1e-6f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Tensor2 a = Tensor2::Zero(2, 3);
  const Tensor2 b = Tensor2::Zero(2, 3);
  try {
    (void)matmul(a, b);
    FAIL("expected a dimension error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Dimension);
    CHECK(std::string(e.what()).find("(2x3) x (2x3)") != std::string::npos);
  }
}

TEST_CASE("softmax rows") {
  Tensor2 x(3, 3);
  x << 0, 0, 0, 1000, 1000, 1000, 1, 2, 3;
  const Tensor2 y = softmax_rows(x);
  CHECK(y(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-7));
  for (int c = 0; c < 3; ++c) CHECK(y(1, c) == doctest::Approx(1.0 / 3).epsilon(1e-7));
  const double z = std::exp(-2.0) + std::exp(-1.0) + 1.0;
  CHECK(std::abs(y(2, 0) - std::exp(-2.0) / z) <= 1e-7);
  CHECK(std::abs(y(2, 1) - std::exp(-1.0) / z) <= 1e-7);
  CHECK(std::abs(y(2, 2) - 1.0 / z) <= 1e-7);

  Tensor2 pair(1, 2);
  pair << 0, 0;
  CHECK(softmax_rows(pair)(0, 1) == 0.5f);
}

TEST_CASE("softmax property: stochastic rows, shift invariant") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor2 x = random_tensor(4, 6, rng, 20.0);
    const Tensor2 y = softmax_rows(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      CHECK(std::abs(y.row(r).cast<double>().sum() - 1.0) <= 1e-6);
      CHECK((y.row(r).array() >= 0).all());
    }
    Tensor2 shifted = x;
    shifted.row(2).array() += static_cast<float>(rng.uniform(-50, 50));
    CHECK((softmax_rows(shifted) - y).cwiseAbs().maxCoeff() <= 1e-6f);
  }
}

TEST_CASE("masked mean rows") {
  Tensor2 x(2, 2);
  x << 2, 2, 4, 4;
  Mask both(2), first(2);
  both << true, true;
  first << true, false;
  CHECK(masked_mean_rows(x, both) == RowVec::Constant(2, 3.0f));
  x.row(1).setConstant(99);
  CHECK(masked_mean_rows(x, first) == RowVec::Constant(2, 2.0f));

  Rng rng(3);
  const Tensor2 r = random_tensor(5, 4, rng);
  Mask m(5);
  m << true, false, true, false, true;
  const RowVec oracle = (r.row(0) + r.row(2) + r.row(4)) / 3.0f;
  CHECK((masked_mean_rows(r, m) - oracle).cwiseAbs().maxCoeff() <= 1e-6f);

  Mask none = Mask::Constant(5, false);
  CHECK_THROWS_AS((void)masked_mean_rows(r, none), Error);
  try {
    (void)masked_mean_rows(r, none);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptyPool);
  }
}

TEST_CASE("kl divergence rows") {
  Tensor2 p(1, 2), q(1, 2);
  p << 0.5, 0.5;
  CHECK(kl_div_rows(p, p)(0) == 0.0);
  p << 1, 0;
  q << 0.5, 0.5;
  CHECK(kl_div_rows(p, q)(0) == doctest::Approx(std::log(2.0)).epsilon(1e-9));

  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor2 a = random_stochastic(3, 5, rng);
    const Tensor2 b = random_stochastic(3, 5, rng);
    CHECK((kl_div_rows(a, b).array() >= 0).all());
    CHECK((kl_div_rows(a, a).array() == 0).all());
  }

  Tensor2 bad(1, 2);
  bad << 0.7, 0.7;
  try {
    (void)kl_div_rows(bad, q);
    FAIL("expected a distribution error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Distribution);
  }
}

TEST_CASE("l2 normalize rows yields unit norm") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor2 x = random_tensor(4, 7, rng, 10.0);
    const Tensor2 y = l2_normalize_rows(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) CHECK(std::abs(y.row(r).cast<double>().norm() - 1.0) <= 1e-6);
  }
}

TEST_CASE("cosine, mse, gelu basics") {
  Tensor2 a(3, 2), b(3, 2);
  a << 1, 0, 1, 1, 2, 0;
  b << 3, 0, -1, 1, -1, 0;
  const auto c = cosine_sim_rows(a, b);
  CHECK(c(0) == doctest::Approx(1.0));
  CHECK(c(1) == doctest::Approx(0.0));
  CHECK(c(2) == doctest::Approx(-1.0));
  CHECK(mse(a, a) == 0.0);
  CHECK(mse(a, b) == doctest::Approx((4.0 + 4.0 + 9.0) / 6.0));
  Tensor2 z = Tensor2::Zero(1, 1);
  CHECK(gelu(z)(0, 0) == 0.0f);
}

TEST_CASE("gradient_check on a quadratic") {
  Rng rng(1);
  Parameter theta(random_tensor(4, 5, rng));
  Parameter* params[] = {&theta};
  const Objective f = [&](bool with_grad) {
    if (with_grad) theta.grad += 2.0f * theta.value;
    return theta.value.cast<double>().squaredNorm();
  };
  const GradCheckReport report = gradient_check(f, params);
  CHECK(report.max_rel_error <= 1e-3);
  CHECK(report.coordinates == 20);
}

TEST_CASE("gradient_check rejects non-finite objectives") {
  Parameter theta(Tensor2::Ones(1, 1));
  Parameter* params[] = {&theta};
  const Objective f = [](bool) { return std::nan(""); };
  try {
    (void)gradient_check(f, params);
    FAIL("expected an evaluation error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Evaluation);
  }
}

TEST_CASE("every backward kernel passes the finite-difference check") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::Index rows = 2 + static_cast<Eigen::Index>(rng.index(3));
    const Eigen::Index cols = 2 + static_cast<Eigen::Index>(rng.index(4));
    const Tensor2 w = random_tensor(rows, cols, rng);

    SUBCASE("matmul") {
      Parameter a(random_tensor(rows, 3, rng)), b(random_tensor(3, cols, rng));
      Parameter* params[] = {&a, &b};
      const auto f = [&](bool g) {
        const Tensor2 y = matmul(a.value, b.value);
        if (g) matmul_backward<float>(a.value, b.value, w, &a.grad, &b.grad);
        return weighted(y, w);
      };
      CHECK(gradient_check(f, params).max_rel_error <= 1e-2);
    }
    SUBCASE("softmax") {
      Parameter x(random_tensor(rows, cols, rng, 3.0));
      Parameter* params[] = {&x};
      const auto f = [&](bool g) {
        const Tensor2 y = softmax_rows(x.value);
        if (g) x.grad += softmax_rows_backward<float>(y, w);
        return weighted(y, w);
      };
      CHECK(gradient_check(f, params).max_rel_error <= 1e-2);
    }
    SUBCASE("masked mean") {
      Parameter x(random_tensor(rows, cols, rng));
      Mask m = Mask::Constant(rows, true);
      m(0) = false;
      Parameter* params[] = {&x};
      const RowVec up = w.row(0);
      const auto f = [&](bool g) {
        const RowVec y = masked_mean_rows(x.value, m);
        if (g) x.grad += masked_mean_rows_backward<float>(up, m);
        return y.cast<double>().dot(up.cast<double>());
      };
      CHECK(gradient_check(f, params).max_rel_error <= 1e-2);
    }
    SUBCASE("layer norm") {
      Parameter x(random_tensor(rows, cols, rng, 2.0)), gain(random_tensor(1, cols, rng)),
          bias(random_tensor(1, cols, rng));
      Parameter* params[] = {&x, &gain, &bias};
      const auto f = [&](bool g) {
        LayerNormCache cache;
        const Tensor2 y = layer_norm_rows(x.value, gain.value.row(0), bias.value.row(0), &cache);
        if (g) {
          RowVec dg = RowVec::Zero(cols), db = RowVec::Zero(cols);
          x.grad += layer_norm_rows_backward(cache, gain.value.row(0), w, &dg, &db);
          gain.grad.row(0) += dg;
          bias.grad.row(0) += db;
        }
        return weighted(y, w);
      };
      CHECK(gradient_check(f, params).max_rel_error <= 1e-2);
    }
    SUBCASE("gelu") {
      Parameter x(random_tensor(rows, cols, rng, 3.0));
      Parameter* params[] = {&x};
      const auto f = [&](bool g) {
        if (g) x.grad += gelu_backward<float>(x.value, w);
        return weighted(gelu(x.value), w);
      };
      CHECK(gradient_check(f, params).max_rel_error <= 1e-2);
    }
    SUBCASE("l2 normalize") {
      Parameter x(random_tensor(rows, cols, rng, 2.0));
      Parameter* params[] = {&x};
      const auto f = [&](bool g) {
        ColVector<double> norms;
        const Tensor2 y = l2_normalize_rows(x.value, &norms);
        if (g) x.grad += l2_normalize_rows_backward<float>(y, norms, w);
        return weighted(y, w);
      };
      CHECK(gradient_check(f, params).max_rel_error <= 1e-2);
    }
    SUBCASE("mse") {
      Parameter a(random_tensor(rows, cols, rng));
      const Tensor2 b = random_tensor(rows, cols, rng);
      Parameter* params[] = {&a};
      const auto f = [&](bool g) {
        if (g) a.grad += mse_grad<float>(a.value, b);
        return mse(a.value, b);
      };
      CHECK(gradient_check(f, params).max_rel_error <= 1e-2);
    }
    SUBCASE("cosine") {
      Parameter a(random_tensor(rows, cols, rng)), b(random_tensor(rows, cols, rng));
      ColVector<double> weights = w.col(0).cast<double>();
      Parameter* params[] = {&a, &b};
      const auto f = [&](bool g) {
        if (g) cosine_sim_rows_backward<float>(a.value, b.value, weights, &a.grad, &b.grad);
        return cosine_sim_rows(a.value, b.value).dot(weights);
      };
      CHECK(gradient_check(f, params).max_rel_error <= 1e-2);
    }
    SUBCASE("kl wrt q through softmax") {
      const Tensor2 p = random_stochastic(rows, cols, rng);
      Parameter z(random_tensor(rows, cols, rng));
      Parameter* params[] = {&z};
      const auto f = [&](bool g) {
        const Tensor2 q = softmax_rows(z.value);
        if (g) z.grad += softmax_rows_backward<float>(q, kl_div_rows_grad_q<float>(p, q));
        return kl_div_rows(p, q).sum();
      };
      CHECK(gradient_check(f, params).max_rel_error <= 1e-2);
    }
  }
}
