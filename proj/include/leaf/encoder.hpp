#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "leaf/numerics.hpp"
#include "leaf/tokenizer.hpp"

namespace leaf {

enum class Pooling : std::uint8_t { Mean = 0, Cls = 1 };

struct EncoderConfig {
  std::uint32_t num_layers = 2;
  std::uint32_t num_heads = 4;
  std::uint32_t hidden_dim = 32;
  std::uint32_t ffn_multiplier = 4;
  std::uint32_t vocab_size = 0;
  std::uint32_t max_context = 64;
  std::uint32_t output_dim = 64;
  Pooling pooling = Pooling::Mean;
  bool normalize_output = true;
  std::uint64_t seed = 0;

  std::uint32_t head_dim() const { return hidden_dim / num_heads; }
  std::uint32_t ffn_dim() const { return hidden_dim * ffn_multiplier; }
  void validate() const;

  // Desk-scale shapes: teacher L=4, A=4, d=64; student L'=2, A=4, d'=32 -> 64.
  static EncoderConfig teacher_default(std::uint32_t vocab_size, std::uint64_t seed);
  static EncoderConfig student_default(std::uint32_t vocab_size, std::uint32_t output_dim, std::uint64_t seed);

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct LayerParams {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, bq, wk, bk, wv, bv;
  Parameter wo, bo;
  Parameter ln2_gain, ln2_bias;
  Parameter w1, b1, w2, b2;
};

// Pre-norm transformer encoder followed by pooling, the output projection
// W_out and an optional unit-norm layer.
struct EncoderState {
  EncoderConfig config;
  Parameter token_embedding;     // vocab x hidden
  Parameter position_embedding;  // max_context x hidden
  std::vector<LayerParams> layers;
  Parameter final_ln_gain, final_ln_bias;
  Parameter w_out;  // hidden x output
  Parameter b_out;  // 1 x output
};

// Visits every parameter in fixed declaration order. This order is the
// checkpoint serialization order.
template <typename State, typename Fn>
void for_each_parameter(State& state, Fn&& fn) {
  fn("token_embedding", state.token_embedding);
  fn("position_embedding", state.position_embedding);
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    auto& p = state.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    fn(prefix + "ln1_gain", p.ln1_gain);
    fn(prefix + "ln1_bias", p.ln1_bias);
    fn(prefix + "wq", p.wq);
    fn(prefix + "bq", p.bq);
    fn(prefix + "wk", p.wk);
    fn(prefix + "bk", p.bk);
    fn(prefix + "wv", p.wv);
    fn(prefix + "bv", p.bv);
    fn(prefix + "wo", p.wo);
    fn(prefix + "bo", p.bo);
    fn(prefix + "ln2_gain", p.ln2_gain);
    fn(prefix + "ln2_bias", p.ln2_bias);
    fn(prefix + "w1", p.w1);
    fn(prefix + "b1", p.b1);
    fn(prefix + "w2", p.w2);
    fn(prefix + "b2", p.b2);
  }
  fn("final_ln_gain", state.final_ln_gain);
  fn("final_ln_bias", state.final_ln_bias);
  fn("w_out", state.w_out);
  fn("b_out", state.b_out);
}

std::vector<Parameter*> parameter_list(EncoderState& state);
std::size_t parameter_count(const EncoderState& state);
void zero_grad(EncoderState& state);

EncoderState init_encoder(const EncoderConfig& config);

// Values only; gradients and moments are not compared.
bool same_weights(const EncoderState& a, const EncoderState& b);

// Per-example record of one forward pass. Public fields are the internals
// the auxiliary distillation losses read; the rest is backward cache.
struct LayerTrace {
  Tensor2 q, k, v;               // T x hidden; head a occupies columns [a*C, (a+1)*C)
  std::vector<Tensor2> logits;   // per head, T x T, Q K^T / sqrt(C) before masking
  std::vector<Tensor2> probs;    // per head, T x T, row t = attention of query t over keys

  LayerNormCache ln1, ln2;
  Tensor2 ln1_out, ln2_out;
  Tensor2 context;               // concatenated head outputs, T x hidden
  Tensor2 ffn_pre, ffn_act;
};

struct ExampleTrace {
  Mask mask;                     // true on real tokens
  std::vector<Tensor2> hidden;   // num_layers + 1 states, each T x hidden; [0] = embeddings + positions
  std::vector<LayerTrace> layers;
  LayerNormCache final_ln;
  Tensor2 final_out;
  RowVec pooled;
  RowVec projected;              // before Norm
  ColVector<double> norm;        // 1-vector, norm of projected

  Eigen::Index length() const { return mask.size(); }
  Eigen::Index real_length() const { return mask.count(); }
};

struct ForwardTrace {
  std::vector<ExampleTrace> examples;
  Tensor2 embeddings;
};

struct EncodeResult {
  Tensor2 embeddings;  // batch x output_dim
  std::optional<ForwardTrace> trace;
};

EncodeResult encode(const EncoderState& state, const TokenBatch& batch, bool want_trace = false);

// Upstream gradients on trace internals, produced by auxiliary losses.
// Empty matrices contribute nothing.
struct ExampleTraceGrad {
  std::vector<Tensor2> hidden;               // num_layers + 1
  std::vector<Tensor2> value;                // per layer, T x hidden
  std::vector<std::vector<Tensor2>> probs;   // per layer, per head
  std::vector<std::vector<Tensor2>> logits;  // per layer, per head

  Tensor2& hidden_at(std::size_t layer, Eigen::Index rows, Eigen::Index cols);
  Tensor2& value_at(std::size_t layer, Eigen::Index rows, Eigen::Index cols);
  Tensor2& probs_at(std::size_t layer, std::size_t head, Eigen::Index t);
  Tensor2& logits_at(std::size_t layer, std::size_t head, Eigen::Index t);
};

struct TraceGrad {
  std::vector<ExampleTraceGrad> examples;
  explicit TraceGrad(std::size_t batch = 0) : examples(batch) {}
};

// Reverse-mode pass; accumulates into the grad fields of `state`.
void encode_backward(EncoderState& state, const TokenBatch& batch, const std::optional<ForwardTrace>& trace,
                     const Tensor2& upstream, const TraceGrad* aux = nullptr);

// Text-level convenience: tokenize (with an optional instruction prefix)
// and embed in chunks.
Tensor2 embed_texts(const EncoderState& state, const Vocab& vocab, std::span<const std::string> texts,
                    std::string_view instruction = {}, std::size_t chunk = 64);

// "LEFC" weight checkpoint.
void write_encoder(std::ostream& out, const EncoderState& state);
EncoderState read_encoder(std::istream& in);
void save_encoder(const std::filesystem::path& path, const EncoderState& state);
EncoderState load_encoder(const std::filesystem::path& path);

}  // namespace leaf
