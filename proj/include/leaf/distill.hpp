#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "leaf/encoder.hpp"

namespace leaf {

enum class LossKind : std::uint8_t { LeafL2, LeafPlusMiniLM, LeafPlusTinyBert, LeafPlusDistilBert };

std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

struct LossSpec {
  LossKind kind = LossKind::LeafL2;
  double aux_weight = 1.0;

  bool needs_traces() const { return kind != LossKind::LeafL2; }
  bool needs_projection() const { return kind == LossKind::LeafPlusTinyBert || kind == LossKind::LeafPlusDistilBert; }
};

/// Trainable map from student hidden states (d') into the teacher's (d).
/// Stored as a d x d' matrix acting on column vectors, so a T x d' block of
/// row states maps to H * W^T.
struct ProjectionToTeacher {
  Parameter weight;

  static ProjectionToTeacher identity(std::uint32_t dim);
  static ProjectionToTeacher random(std::uint32_t teacher_dim, std::uint32_t student_dim, std::uint64_t seed);

  Tensor2 apply(const Tensor2& student_hidden) const;
};

struct L2Loss {
  double loss = 0.0;                 // batch mean of ||y_i - target_i||_2
  Tensor2 grad;                      // d loss / d y
  ColVector<double> per_example;     // ||e_i||_2
};

L2Loss loss_l2(const Tensor2& y, const Tensor2& target);

struct AuxLoss {
  double loss = 0.0;
  TraceGrad grad;  // w.r.t. the student trace, already scaled by the weight passed in
};

// g(l) = floor(L / L') * l for l = 0..L'; throws unless g(L') == L.
std::vector<std::uint32_t> layer_map(std::uint32_t teacher_layers, std::uint32_t student_layers);

// Last-layer value-relation and attention KL(teacher || student), averaged
// over heads and non-PAD tokens, then over the batch. Gradients are scaled
// by `weight`; the returned loss is not.
AuxLoss loss_minilm(const ForwardTrace& student, const ForwardTrace& teacher, double weight = 1.0);

// Hidden-state MSE through the projection over layers 1..L' (teacher layer
// g(l)) plus pre-softmax attention-logit MSE. Projection gradients are
// accumulated into proj.weight.grad.
AuxLoss loss_tinybert(const ForwardTrace& student, const ForwardTrace& teacher, ProjectionToTeacher& proj,
                      double weight = 1.0);

// Mean over non-PAD tokens of -cos(teacher last hidden, projected student last hidden).
AuxLoss loss_distilbert(const ForwardTrace& student, const ForwardTrace& teacher, ProjectionToTeacher& proj,
                        double weight = 1.0);

struct CompositeLoss {
  double total = 0.0;
  double l2 = 0.0;
  double aux = 0.0;
  Tensor2 grad_embeddings;
  ColVector<double> per_example;
  TraceGrad trace_grad;
};

// L = L_l2 + aux_weight * L_aux. Traces are required for the aux kinds, and
// the projection for TinyBERT/DistilBERT.
CompositeLoss composite_loss(const LossSpec& spec, const Tensor2& y, const Tensor2& target,
                             const ForwardTrace* student = nullptr, const ForwardTrace* teacher = nullptr,
                             ProjectionToTeacher* proj = nullptr);

}  // namespace leaf
