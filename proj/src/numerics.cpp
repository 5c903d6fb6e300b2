#include "leaf/numerics.hpp"

#include <algorithm>
#include <numeric>

#include "leaf/rng.hpp"

namespace leaf {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::EmptyPool: return "empty-pool";
    case ErrorKind::Distribution: return "distribution";
    case ErrorKind::Config: return "config";
    case ErrorKind::Vocab: return "vocab";
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Format: return "format";
    case ErrorKind::Lookup: return "lookup";
    case ErrorKind::Compatibility: return "compatibility";
    case ErrorKind::Mapping: return "mapping";
    case ErrorKind::Fit: return "fit";
    case ErrorKind::Truncation: return "truncation";
    case ErrorKind::Evaluation: return "evaluation";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

Tensor2 layer_norm_rows(const Tensor2& x, const RowVec& gain, const RowVec& bias, LayerNormCache* cache) {
  if (gain.cols() != x.cols() || bias.cols() != x.cols()) {
    throw Error(ErrorKind::Dimension,
                "layer_norm_rows " + shape_of(x) + " with gain " + shape_of(gain) + " bias " + shape_of(bias));
  }
  Tensor2 normalized(x.rows(), x.cols());
  ColVector<float> inv_std(x.rows());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const RowVector<double> row = x.row(r).cast<double>();
    const double mean = row.sum() / n;
    const double var = (row.array() - mean).square().sum() / n;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    normalized.row(r) = ((row.array() - mean) * rstd).matrix().cast<float>();
    inv_std(r) = static_cast<float>(rstd);
  }
  Tensor2 out = (normalized.array().rowwise() * gain.array()).rowwise() + bias.array();
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

Tensor2 layer_norm_rows_backward(const LayerNormCache& cache, const RowVec& gain, const Tensor2& upstream,
                                 RowVec* grad_gain, RowVec* grad_bias) {
  const Tensor2& xhat = cache.normalized;
  if (grad_gain) *grad_gain += upstream.cwiseProduct(xhat).colwise().sum();
  if (grad_bias) *grad_bias += upstream.colwise().sum();

  const Tensor2 dxhat = upstream.array().rowwise() * gain.array();
  const double n = static_cast<double>(xhat.cols());
  Tensor2 dx(xhat.rows(), xhat.cols());
  for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
    const RowVector<double> g = dxhat.row(r).cast<double>();
    const RowVector<double> h = xhat.row(r).cast<double>();
    const double mean_g = g.sum() / n;
    const double mean_gh = g.dot(h) / n;
    dx.row(r) = (cache.inv_std(r) * (g.array() - mean_g - h.array() * mean_gh)).matrix().cast<float>();
  }
  return dx;
}

GradCheckReport gradient_check(const Objective& f, std::span<Parameter* const> params,
                               const GradCheckOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  const double base = f(true);
  if (!std::isfinite(base)) throw Error(ErrorKind::Evaluation, "objective is not finite at the base point");

  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (Eigen::Index k = 0; k < params[i]->size(); ++k) coords.emplace_back(i, k);
  }
  if (coords.size() > options.samples) {
    Rng rng(options.seed);
    rng.shuffle(coords);
    coords.resize(options.samples);
  }

  std::vector<Tensor2> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  report.coordinates = coords.size();
  for (const auto& [i, k] : coords) {
    float& slot = params[i]->value.data()[k];
    const float saved = slot;
    slot = saved + options.step;
    const double x_up = slot;
    const double up = f(false);
    slot = saved - options.step;
    const double x_down = slot;
    const double down = f(false);
    slot = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw Error(ErrorKind::Evaluation, "objective is not finite near param " + std::to_string(i));
    }
    const double fd = (up - down) / (x_up - x_down);
    const double an = analytic[i].data()[k];
    const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst = std::to_string(i) + "[" + std::to_string(k) + "]";
    }
  }
  return report;
}

}  // namespace leaf
