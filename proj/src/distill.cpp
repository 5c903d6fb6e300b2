#include "leaf/distill.hpp"

#include <cmath>

#include "leaf/rng.hpp"

namespace leaf {
namespace {

constexpr double kNormEps = 1e-12;

std::size_t num_heads(const ForwardTrace& t) {
  return t.examples.empty() || t.examples[0].layers.empty() ? 0 : t.examples[0].layers[0].probs.size();
}

std::size_t num_layers(const ForwardTrace& t) { return t.examples.empty() ? 0 : t.examples[0].layers.size(); }

void require_paired(const ForwardTrace& student, const ForwardTrace& teacher) {
  if (student.examples.size() != teacher.examples.size()) {
    throw Error(ErrorKind::Compatibility, "student and teacher traces cover different batch sizes");
  }
  for (std::size_t b = 0; b < student.examples.size(); ++b) {
    const Mask& s = student.examples[b].mask;
    const Mask& t = teacher.examples[b].mask;
    if (s.size() != t.size() || !(s == t).all()) {
      throw Error(ErrorKind::Compatibility, "student and teacher token sequences differ (tokenizers must match)");
    }
  }
}

void require_same_heads(const ForwardTrace& student, const ForwardTrace& teacher) {
  if (num_heads(student) != num_heads(teacher)) {
    throw Error(ErrorKind::Compatibility, "attention head counts differ: student " + std::to_string(num_heads(student)) +
                                              ", teacher " + std::to_string(num_heads(teacher)));
  }
}

// softmax(V V^T / sqrt(C)); callers pass only the real-token rows.
Tensor2 value_relation(const Tensor2& v_head) {
  const float scale = 1.0f / std::sqrt(static_cast<float>(v_head.cols()));
  return softmax_rows(Tensor2(v_head * v_head.transpose() * scale));
}

// For projected = h W^T: accumulates dL/dW into proj and returns dL/dh.
Tensor2 projection_backward(const Tensor2& h, ProjectionToTeacher& proj, const Tensor2& d_projected) {
  proj.weight.grad.noalias() += d_projected.transpose() * h;
  return d_projected * proj.weight.value;
}

}  // namespace

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::LeafL2: return "leaf";
    case LossKind::LeafPlusMiniLM: return "leaf+minilm";
    case LossKind::LeafPlusTinyBert: return "leaf+tinybert";
    case LossKind::LeafPlusDistilBert: return "leaf+distilbert";
  }
  return "unknown";
}

LossKind parse_loss_kind(std::string_view name) {
  for (const LossKind k : {LossKind::LeafL2, LossKind::LeafPlusMiniLM, LossKind::LeafPlusTinyBert,
                           LossKind::LeafPlusDistilBert}) {
    if (name == to_string(k)) return k;
  }
  throw Error(ErrorKind::Config, "unknown loss '" + std::string(name) + "'");
}

ProjectionToTeacher ProjectionToTeacher::identity(std::uint32_t dim) {
  return {Parameter(Tensor2::Identity(dim, dim))};
}

ProjectionToTeacher ProjectionToTeacher::random(std::uint32_t teacher_dim, std::uint32_t student_dim,
                                                std::uint64_t seed) {
  Rng rng(seed);
  Tensor2 w(teacher_dim, student_dim);
  const double bound = 1.0 / std::sqrt(static_cast<double>(student_dim));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
  return {Parameter(std::move(w))};
}

Tensor2 ProjectionToTeacher::apply(const Tensor2& student_hidden) const {
  if (student_hidden.cols() != weight.cols()) {
    throw Error(ErrorKind::Dimension, "projection " + shape_of(weight.value) + " applied to " + shape_of(student_hidden));
  }
  return student_hidden * weight.value.transpose();
}

L2Loss loss_l2(const Tensor2& y, const Tensor2& target) {
  if (y.rows() != target.rows() || y.cols() != target.cols()) {
    throw Error(ErrorKind::Dimension, "loss_l2 " + shape_of(y) + " vs " + shape_of(target));
  }
  L2Loss out;
  const Eigen::Index n = y.rows();
  out.grad = Tensor2::Zero(n, y.cols());
  out.per_example.resize(n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVector<double> e = y.row(i).cast<double>() - target.row(i).cast<double>();
    const double sq = e.squaredNorm();
    out.per_example(i) = std::sqrt(sq);
    total += out.per_example(i);
    out.grad.row(i) = (e / (std::sqrt(sq + kNormEps) * static_cast<double>(n))).cast<float>();
  }
  out.loss = n > 0 ? total / static_cast<double>(n) : 0.0;
  return out;
}

std::vector<std::uint32_t> layer_map(std::uint32_t teacher_layers, std::uint32_t student_layers) {
  if (student_layers == 0 || teacher_layers == 0) throw Error(ErrorKind::Mapping, "layer counts must be positive");
  const std::uint32_t stride = teacher_layers / student_layers;
  if (stride * student_layers != teacher_layers) {
    throw Error(ErrorKind::Mapping, "floor(L/L') * L' != L for L=" + std::to_string(teacher_layers) +
                                        ", L'=" + std::to_string(student_layers));
  }
  std::vector<std::uint32_t> g(student_layers + 1);
  for (std::uint32_t l = 0; l <= student_layers; ++l) g[l] = stride * l;
  return g;
}

AuxLoss loss_minilm(const ForwardTrace& student, const ForwardTrace& teacher, double weight) {
  require_paired(student, teacher);
  require_same_heads(student, teacher);
  const std::size_t batch = student.examples.size();
  const std::size_t heads = num_heads(student);
  const std::size_t s_last = num_layers(student) - 1;
  const std::size_t t_last = num_layers(teacher) - 1;

  AuxLoss out;
  out.grad = TraceGrad(batch);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const ExampleTrace& se = student.examples[b];
    const ExampleTrace& te = teacher.examples[b];
    const Eigen::Index n = se.real_length();
    const Eigen::Index t_len = se.length();
    const LayerTrace& sl = se.layers[s_last];
    const LayerTrace& tl = te.layers[t_last];
    const Eigen::Index s_c = sl.v.cols() / static_cast<Eigen::Index>(heads);
    const Eigen::Index t_c = tl.v.cols() / static_cast<Eigen::Index>(heads);
    const double norm = 1.0 / (static_cast<double>(heads) * static_cast<double>(n));
    const float grad_scale = static_cast<float>(weight * norm / static_cast<double>(batch));

    double example = 0.0;
    ExampleTraceGrad& g = out.grad.examples[b];
    for (std::size_t a = 0; a < heads; ++a) {
      const auto ai = static_cast<Eigen::Index>(a);
      // value relation
      const Tensor2 s_v = sl.v.block(0, ai * s_c, n, s_c);
      const Tensor2 t_v = tl.v.block(0, ai * t_c, n, t_c);
      const Tensor2 vr_s = value_relation(s_v);
      const Tensor2 vr_t = value_relation(t_v);
      example += kl_div_rows(vr_t, vr_s).sum();
      const Tensor2 d_vr = kl_div_rows_grad_q<float>(vr_t, vr_s) * grad_scale;
      const Tensor2 d_scores = softmax_rows_backward<float>(vr_s, d_vr) / std::sqrt(static_cast<float>(s_c));
      g.value_at(s_last, t_len, sl.v.cols()).block(0, ai * s_c, n, s_c) += (d_scores + d_scores.transpose()) * s_v;

      // attention distributions
      const Tensor2 att_s = sl.probs[a].topLeftCorner(n, n);
      const Tensor2 att_t = tl.probs[a].topLeftCorner(n, n);
      example += kl_div_rows(att_t, att_s).sum();
      g.probs_at(s_last, a, t_len).topLeftCorner(n, n) += kl_div_rows_grad_q<float>(att_t, att_s) * grad_scale;
    }
    total += example * norm;
  }
  out.loss = batch > 0 ? total / static_cast<double>(batch) : 0.0;
  return out;
}

AuxLoss loss_tinybert(const ForwardTrace& student, const ForwardTrace& teacher, ProjectionToTeacher& proj,
                      double weight) {
  require_paired(student, teacher);
  require_same_heads(student, teacher);
  const std::size_t batch = student.examples.size();
  const std::size_t heads = num_heads(student);
  const auto s_layers = static_cast<std::uint32_t>(num_layers(student));
  const std::vector<std::uint32_t> g_of = layer_map(static_cast<std::uint32_t>(num_layers(teacher)), s_layers);

  AuxLoss out;
  out.grad = TraceGrad(batch);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const ExampleTrace& se = student.examples[b];
    const ExampleTrace& te = teacher.examples[b];
    const Eigen::Index n = se.real_length();
    const Eigen::Index t_len = se.length();
    ExampleTraceGrad& g = out.grad.examples[b];
    const double batch_scale = weight / static_cast<double>(batch);

    double hidden_loss = 0.0;
    const double hidden_norm = 1.0 / (static_cast<double>(n) * s_layers);
    double att_loss = 0.0;
    const double att_norm = 1.0 / (static_cast<double>(heads) * s_layers);
    for (std::uint32_t l = 1; l <= s_layers; ++l) {
      const Tensor2 h_s = se.hidden[l].topRows(n);
      const Tensor2 h_t = te.hidden[g_of[l]].topRows(n);
      const Tensor2 projected = proj.apply(h_s);
      if (projected.cols() != h_t.cols()) {
        throw Error(ErrorKind::Dimension, "projected student hidden " + shape_of(projected) + " vs teacher " + shape_of(h_t));
      }
      const Tensor2 diff = projected - h_t;
      // sum over tokens of per-token MSE = squared norm / d
      const double d = static_cast<double>(diff.cols());
      hidden_loss += diff.cast<double>().squaredNorm() / d * hidden_norm;
      const Tensor2 d_projected = diff * static_cast<float>(2.0 / d * hidden_norm * batch_scale);
      g.hidden_at(l, t_len, se.hidden[l].cols()).topRows(n) += projection_backward(h_s, proj, d_projected);

      const LayerTrace& sl = se.layers[l - 1];
      const LayerTrace& tl = te.layers[g_of[l] - 1];
      for (std::size_t a = 0; a < heads; ++a) {
        const Tensor2 z_s = sl.logits[a].topLeftCorner(n, n);
        const Tensor2 z_t = tl.logits[a].topLeftCorner(n, n);
        att_loss += mse(z_s, z_t) * att_norm;
        g.logits_at(l - 1, a, t_len).topLeftCorner(n, n) +=
            mse_grad<float>(z_s, z_t) * static_cast<float>(att_norm * batch_scale);
      }
    }
    total += hidden_loss + att_loss;
  }
  out.loss = batch > 0 ? total / static_cast<double>(batch) : 0.0;
  return out;
}

AuxLoss loss_distilbert(const ForwardTrace& student, const ForwardTrace& teacher, ProjectionToTeacher& proj,
                        double weight) {
  require_paired(student, teacher);
  const std::size_t batch = student.examples.size();
  const std::size_t s_last = num_layers(student);
  const std::size_t t_last = num_layers(teacher);

  AuxLoss out;
  out.grad = TraceGrad(batch);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const ExampleTrace& se = student.examples[b];
    const ExampleTrace& te = teacher.examples[b];
    const Eigen::Index n = se.real_length();
    const Tensor2 h_s = se.hidden[s_last].topRows(n);
    const Tensor2 h_t = te.hidden[t_last].topRows(n);
    const Tensor2 projected = proj.apply(h_s);
    const ColVector<double> cos = cosine_sim_rows(h_t, projected);
    total += -cos.mean();

    const ColVector<double> weights = ColVector<double>::Constant(n, -weight / (static_cast<double>(n) * batch));
    Tensor2 d_projected = Tensor2::Zero(n, projected.cols());
    cosine_sim_rows_backward<float>(h_t, projected, weights, nullptr, &d_projected);
    out.grad.examples[b].hidden_at(s_last, se.length(), h_s.cols()).topRows(n) +=
        projection_backward(h_s, proj, d_projected);
  }
  out.loss = batch > 0 ? total / static_cast<double>(batch) : 0.0;
  return out;
}

CompositeLoss composite_loss(const LossSpec& spec, const Tensor2& y, const Tensor2& target,
                             const ForwardTrace* student, const ForwardTrace* teacher, ProjectionToTeacher* proj) {
  L2Loss base = loss_l2(y, target);
  CompositeLoss out;
  out.l2 = base.loss;
  out.grad_embeddings = std::move(base.grad);
  out.per_example = std::move(base.per_example);
  out.trace_grad = TraceGrad(static_cast<std::size_t>(y.rows()));
  if (spec.needs_traces()) {
    if (!student || !teacher) {
      throw Error(ErrorKind::Usage, std::string(to_string(spec.kind)) + " needs student and teacher traces");
    }
    if (spec.needs_projection() && !proj) {
      throw Error(ErrorKind::Usage, std::string(to_string(spec.kind)) + " needs a projection to the teacher");
    }
    AuxLoss aux;
    switch (spec.kind) {
      case LossKind::LeafPlusMiniLM: aux = loss_minilm(*student, *teacher, spec.aux_weight); break;
      case LossKind::LeafPlusTinyBert: aux = loss_tinybert(*student, *teacher, *proj, spec.aux_weight); break;
      case LossKind::LeafPlusDistilBert: aux = loss_distilbert(*student, *teacher, *proj, spec.aux_weight); break;
      case LossKind::LeafL2: break;
    }
    out.aux = aux.loss;
    out.trace_grad = std::move(aux.grad);
  }
  out.total = out.l2 + spec.aux_weight * out.aux;
  return out;
}

}  // namespace leaf
