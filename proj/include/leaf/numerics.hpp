#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "leaf/error.hpp"

namespace leaf {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Tensor2 = Matrix<float>;
using RowVec = RowVector<float>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

inline constexpr double kKlFloor = 1e-9;

std::string shape_string(Eigen::Index rows, Eigen::Index cols);

template <typename Derived>
std::string shape_of(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// Trainable tensor with its gradient and AdamW moments, all of one shape.
struct Parameter {
  Tensor2 value;
  Tensor2 grad;
  Tensor2 first_moment;
  Tensor2 second_moment;

  Parameter() = default;
  Parameter(Eigen::Index rows, Eigen::Index cols)
      : value(Tensor2::Zero(rows, cols)),
        grad(Tensor2::Zero(rows, cols)),
        first_moment(Tensor2::Zero(rows, cols)),
        second_moment(Tensor2::Zero(rows, cols)) {}
  explicit Parameter(Tensor2 initial) : Parameter(initial.rows(), initial.cols()) {
    value = std::move(initial);
  }

  Eigen::Index rows() const { return value.rows(); }
  Eigen::Index cols() const { return value.cols(); }
  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

// ---------------------------------------------------------------------------
// matmul

template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                         const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorKind::Dimension, "matmul " + shape_of(a) + " x " + shape_of(b));
  }
  return a * b;
}

// Accumulates d(a*b) into grad_a and grad_b; either may be null.
template <typename Scalar>
void matmul_backward(const Matrix<Scalar>& a, const Matrix<Scalar>& b, const Matrix<Scalar>& upstream,
                     Matrix<Scalar>* grad_a, Matrix<Scalar>* grad_b) {
  if (upstream.rows() != a.rows() || upstream.cols() != b.cols()) {
    throw Error(ErrorKind::Dimension, "matmul_backward upstream " + shape_of(upstream) +
                                          " for " + shape_of(a) + " x " + shape_of(b));
  }
  if (grad_a) grad_a->noalias() += upstream * b.transpose();
  if (grad_b) grad_b->noalias() += a.transpose() * upstream;
}

// ---------------------------------------------------------------------------
// softmax

template <typename Derived>
Matrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar row_max = x.row(r).maxCoeff();
    double total = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double e = std::exp(static_cast<double>(x(r, c) - row_max));
      out(r, c) = static_cast<Scalar>(e);
      total += e;
    }
    out.row(r) /= static_cast<Scalar>(total);
  }
  return out;
}

// Gradient w.r.t. the softmax input given its output y and upstream dy.
template <typename Scalar>
Matrix<Scalar> softmax_rows_backward(const Matrix<Scalar>& y, const Matrix<Scalar>& dy) {
  Matrix<Scalar> dx(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    double dot = 0.0;
    for (Eigen::Index c = 0; c < y.cols(); ++c) dot += static_cast<double>(y(r, c)) * dy(r, c);
    dx.row(r) = y.row(r).cwiseProduct((dy.row(r).array() - static_cast<Scalar>(dot)).matrix());
  }
  return dx;
}

// ---------------------------------------------------------------------------
// masked mean pooling

template <typename Derived>
RowVector<typename Derived::Scalar> masked_mean_rows(const Eigen::MatrixBase<Derived>& x,
                                                     const Mask& mask) {
  using Scalar = typename Derived::Scalar;
  if (mask.size() != x.rows()) {
    throw Error(ErrorKind::Dimension,
                "mask length " + std::to_string(mask.size()) + " for " + shape_of(x));
  }
  const Eigen::Index active = mask.count();
  if (active == 0) throw Error(ErrorKind::EmptyPool, "mask selects no rows");
  RowVector<double> total = RowVector<double>::Zero(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (mask(r)) total += x.row(r).template cast<double>();
  }
  return (total / static_cast<double>(active)).template cast<Scalar>();
}

template <typename Scalar>
Matrix<Scalar> masked_mean_rows_backward(const RowVector<Scalar>& upstream, const Mask& mask) {
  const Eigen::Index active = mask.count();
  Matrix<Scalar> dx = Matrix<Scalar>::Zero(mask.size(), upstream.cols());
  for (Eigen::Index r = 0; r < mask.size(); ++r) {
    if (mask(r)) dx.row(r) = upstream / static_cast<Scalar>(active);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// KL divergence, row-wise, KL(p || q) with q floored at kKlFloor.

namespace detail {
template <typename Derived>
void require_stochastic(const Eigen::MatrixBase<Derived>& m, const char* name) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double s = m.row(r).template cast<double>().sum();
    if (std::abs(s - 1.0) > 1e-4 || (m.row(r).array() < 0).any()) {
      throw Error(ErrorKind::Distribution,
                  std::string(name) + " row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
  }
}
}  // namespace detail

template <typename DerivedP, typename DerivedQ>
ColVector<double> kl_div_rows(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedQ>& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) {
    throw Error(ErrorKind::Dimension, "kl_div_rows " + shape_of(p) + " vs " + shape_of(q));
  }
  detail::require_stochastic(p, "p");
  detail::require_stochastic(q, "q");
  ColVector<double> out = ColVector<double>::Zero(p.rows());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const double pi = p(r, c);
      if (pi <= 0.0) continue;
      acc += pi * (std::log(pi) - std::log(std::max<double>(q(r, c), kKlFloor)));
    }
    out(r) = acc;
  }
  return out;
}

// d KL(p||q) / dq, matching the floored forward.
template <typename Scalar>
Matrix<Scalar> kl_div_rows_grad_q(const Matrix<Scalar>& p, const Matrix<Scalar>& q) {
  Matrix<Scalar> g = Matrix<Scalar>::Zero(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      if (p(r, c) > 0 && q(r, c) > kKlFloor) g(r, c) = -p(r, c) / q(r, c);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// layer norm

struct LayerNormCache {
  Tensor2 normalized;            // (x - mean) * rstd, before gain/bias
  ColVector<float> inv_std;
};

inline constexpr float kLayerNormEps = 1e-5f;

Tensor2 layer_norm_rows(const Tensor2& x, const RowVec& gain, const RowVec& bias, LayerNormCache* cache);

// Returns dx; accumulates into grad_gain / grad_bias.
Tensor2 layer_norm_rows_backward(const LayerNormCache& cache, const RowVec& gain, const Tensor2& upstream,
                                 RowVec* grad_gain, RowVec* grad_bias);

// ---------------------------------------------------------------------------
// gelu (erf form)

template <typename Derived>
Matrix<typename Derived::Scalar> gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) {
    return static_cast<Scalar>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
  });
}

template <typename Scalar>
Matrix<Scalar> gelu_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& upstream) {
  const Matrix<Scalar> slope = x.unaryExpr([](Scalar v) {
    const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * static_cast<double>(v) * v) / std::sqrt(2.0 * M_PI);
    return static_cast<Scalar>(cdf + v * pdf);
  });
  return slope.cwiseProduct(upstream);
}

// ---------------------------------------------------------------------------
// l2 normalization, mse, cosine

template <typename Derived>
Matrix<typename Derived::Scalar> l2_normalize_rows(const Eigen::MatrixBase<Derived>& x,
                                                   ColVector<double>* norms = nullptr) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> out(x.rows(), x.cols());
  if (norms) norms->resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = std::max(x.row(r).template cast<double>().norm(), 1e-12);
    out.row(r) = (x.row(r).template cast<double>() / n).template cast<Scalar>();
    if (norms) (*norms)(r) = n;
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> l2_normalize_rows_backward(const Matrix<Scalar>& y, const ColVector<double>& norms,
                                          const Matrix<Scalar>& upstream) {
  Matrix<Scalar> dx(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double dot = y.row(r).template cast<double>().dot(upstream.row(r).template cast<double>());
    dx.row(r) = ((upstream.row(r).template cast<double>() - dot * y.row(r).template cast<double>()) / norms(r))
                    .template cast<Scalar>();
  }
  return dx;
}

// Mean of squared differences over all entries.
template <typename DerivedA, typename DerivedB>
double mse(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorKind::Dimension, "mse " + shape_of(a) + " vs " + shape_of(b));
  }
  if (a.size() == 0) return 0.0;
  return (a.template cast<double>() - b.template cast<double>()).squaredNorm() / static_cast<double>(a.size());
}

// d mse / d a
template <typename Scalar>
Matrix<Scalar> mse_grad(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  return (a - b) * static_cast<Scalar>(2.0 / static_cast<double>(a.size()));
}

template <typename DerivedA, typename DerivedB>
ColVector<double> cosine_sim_rows(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorKind::Dimension, "cosine_sim_rows " + shape_of(a) + " vs " + shape_of(b));
  }
  ColVector<double> out(a.rows());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const auto ar = a.row(r).template cast<double>();
    const auto br = b.row(r).template cast<double>();
    out(r) = ar.dot(br) / std::max(ar.norm() * br.norm(), 1e-12);
  }
  return out;
}

// Gradients of sum_r weight_r * cos(a_r, b_r).
template <typename Scalar>
void cosine_sim_rows_backward(const Matrix<Scalar>& a, const Matrix<Scalar>& b, const ColVector<double>& weights,
                              Matrix<Scalar>* grad_a, Matrix<Scalar>* grad_b) {
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const RowVector<double> ar = a.row(r).template cast<double>();
    const RowVector<double> br = b.row(r).template cast<double>();
    const double na = std::max(ar.norm(), 1e-12);
    const double nb = std::max(br.norm(), 1e-12);
    const double cos = ar.dot(br) / (na * nb);
    if (grad_a) {
      grad_a->row(r) += (weights(r) * (br / (na * nb) - cos * ar / (na * na))).template cast<Scalar>();
    }
    if (grad_b) {
      grad_b->row(r) += (weights(r) * (ar / (na * nb) - cos * br / (nb * nb))).template cast<Scalar>();
    }
  }
}

// ---------------------------------------------------------------------------
// finite-difference gradient check

// Evaluates the scalar objective. When with_grad is set it must also
// accumulate analytic gradients into the grad fields of the checked
// parameters (which gradient_check zeroes beforehand).
using Objective = std::function<double(bool with_grad)>;

struct GradCheckOptions {
  float step = 1e-3f;
  std::size_t samples = 100;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "param[index]" of the worst coordinate
};

// max over sampled coordinates of |fd - an| / max(1, |fd|, |an|).
GradCheckReport gradient_check(const Objective& f, std::span<Parameter* const> params,
                               const GradCheckOptions& options = {});

}  // namespace leaf
