#include "leaf/encoder.hpp"

#include <cmath>

#include "leaf/rng.hpp"

namespace leaf {
namespace {

constexpr float kMaskedLogit = -1e9f;

void fill_uniform(Tensor2& m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
}

Parameter uniform_param(Eigen::Index rows, Eigen::Index cols, Rng& rng, double fan_in) {
  Parameter p(rows, cols);
  fill_uniform(p.value, rng, 1.0 / std::sqrt(fan_in));
  return p;
}

Parameter constant_param(Eigen::Index cols, float value) {
  Parameter p(1, cols);
  p.value.setConstant(value);
  return p;
}

RowVec row_of(const Parameter& p) { return p.value.row(0); }

void add_bias(Tensor2& x, const Parameter& bias) { x.rowwise() += bias.value.row(0); }

// y = x W + b
Tensor2 affine(const Tensor2& x, const Parameter& w, const Parameter& b) {
  Tensor2 y = matmul(x, w.value);
  add_bias(y, b);
  return y;
}

// Accumulates grads of y = x W + b and returns dx.
Tensor2 affine_backward(const Tensor2& x, Parameter& w, Parameter& b, const Tensor2& dy) {
  w.grad.noalias() += x.transpose() * dy;
  b.grad.row(0) += dy.colwise().sum();
  return dy * w.value.transpose();
}

Tensor2 layer_norm(const Tensor2& x, const Parameter& gain, const Parameter& bias, LayerNormCache* cache) {
  return layer_norm_rows(x, row_of(gain), row_of(bias), cache);
}

Tensor2 layer_norm_backward(const LayerNormCache& cache, Parameter& gain, Parameter& bias, const Tensor2& dy) {
  RowVec dg = RowVec::Zero(gain.cols());
  RowVec db = RowVec::Zero(bias.cols());
  Tensor2 dx = layer_norm_rows_backward(cache, row_of(gain), dy, &dg, &db);
  gain.grad.row(0) += dg;
  bias.grad.row(0) += db;
  return dx;
}

bool has(const std::vector<Tensor2>& v, std::size_t i) { return i < v.size() && v[i].size() > 0; }

Tensor2& ensure(Tensor2& slot, Eigen::Index rows, Eigen::Index cols) {
  if (slot.size() == 0) slot = Tensor2::Zero(rows, cols);
  return slot;
}

ExampleTrace forward_example(const EncoderState& s, const TokenBatch& batch, Eigen::Index row) {
  const EncoderConfig& cfg = s.config;
  const Eigen::Index t_len = batch.length();
  const Eigen::Index hidden = cfg.hidden_dim;
  const Eigen::Index head_dim = cfg.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));

  ExampleTrace ex;
  ex.mask = batch.pad_mask.row(row).transpose();

  Tensor2 h0(t_len, hidden);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    const TokenId id = batch.ids(row, t);
    if (id < 0 || static_cast<std::uint32_t>(id) >= cfg.vocab_size) {
      throw Error(ErrorKind::Vocab, "token id " + std::to_string(id) + " outside vocabulary of " +
                                        std::to_string(cfg.vocab_size));
    }
    h0.row(t) = s.token_embedding.value.row(id) + s.position_embedding.value.row(t);
  }
  ex.hidden.reserve(cfg.num_layers + 1);
  ex.hidden.push_back(std::move(h0));

  ex.layers.resize(cfg.num_layers);
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l) {
    const LayerParams& p = s.layers[l];
    LayerTrace& lt = ex.layers[l];
    const Tensor2& x = ex.hidden.back();

    lt.ln1_out = layer_norm(x, p.ln1_gain, p.ln1_bias, &lt.ln1);
    lt.q = affine(lt.ln1_out, p.wq, p.bq);
    lt.k = affine(lt.ln1_out, p.wk, p.bk);
    lt.v = affine(lt.ln1_out, p.wv, p.bv);
    lt.context.resize(t_len, hidden);
    lt.logits.resize(cfg.num_heads);
    lt.probs.resize(cfg.num_heads);
    for (std::uint32_t a = 0; a < cfg.num_heads; ++a) {
      const Eigen::Index c0 = a * head_dim;
      lt.logits[a] = (lt.q.middleCols(c0, head_dim) * lt.k.middleCols(c0, head_dim).transpose()) * scale;
      Tensor2 masked = lt.logits[a];
      for (Eigen::Index key = 0; key < t_len; ++key) {
        if (!ex.mask(key)) masked.col(key).array() += kMaskedLogit;
      }
      lt.probs[a] = softmax_rows(masked);
      lt.context.middleCols(c0, head_dim).noalias() = lt.probs[a] * lt.v.middleCols(c0, head_dim);
    }
    Tensor2 mid = x + affine(lt.context, p.wo, p.bo);
    lt.ln2_out = layer_norm(mid, p.ln2_gain, p.ln2_bias, &lt.ln2);
    lt.ffn_pre = affine(lt.ln2_out, p.w1, p.b1);
    lt.ffn_act = gelu(lt.ffn_pre);
    Tensor2 out = mid + affine(lt.ffn_act, p.w2, p.b2);
    ex.hidden.push_back(std::move(out));
  }

  ex.final_out = layer_norm(ex.hidden.back(), s.final_ln_gain, s.final_ln_bias, &ex.final_ln);
  ex.pooled = cfg.pooling == Pooling::Mean ? masked_mean_rows(ex.final_out, ex.mask)
                                           : RowVec(ex.final_out.row(0));
  ex.projected = ex.pooled * s.w_out.value + s.b_out.value.row(0);
  ex.norm = ColVector<double>::Constant(1, std::max(ex.projected.cast<double>().norm(), 1e-12));
  return ex;
}

void backward_example(EncoderState& s, const TokenBatch& batch, Eigen::Index row, const ExampleTrace& ex,
                      const RowVec& dy, const ExampleTraceGrad* aux) {
  const EncoderConfig& cfg = s.config;
  const Eigen::Index t_len = ex.length();
  const Eigen::Index head_dim = cfg.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));

  RowVec dz = dy;
  if (cfg.normalize_output) {
    const Tensor2 y = (ex.projected.cast<double>() / ex.norm(0)).cast<float>();
    dz = l2_normalize_rows_backward<float>(y, ex.norm, Tensor2(dy)).row(0);
  }
  s.w_out.grad.noalias() += ex.pooled.transpose() * dz;
  s.b_out.grad.row(0) += dz;
  const RowVec dpooled = dz * s.w_out.value.transpose();

  Tensor2 dfinal;
  if (cfg.pooling == Pooling::Mean) {
    dfinal = masked_mean_rows_backward<float>(dpooled, ex.mask);
  } else {
    dfinal = Tensor2::Zero(t_len, cfg.hidden_dim);
    dfinal.row(0) = dpooled;
  }
  Tensor2 dh = layer_norm_backward(ex.final_ln, s.final_ln_gain, s.final_ln_bias, dfinal);
  if (aux && has(aux->hidden, cfg.num_layers)) dh += aux->hidden[cfg.num_layers];

  for (std::uint32_t l = cfg.num_layers; l-- > 0;) {
    LayerParams& p = s.layers[l];
    const LayerTrace& lt = ex.layers[l];

    // FFN branch
    const Tensor2 dact = affine_backward(lt.ffn_act, p.w2, p.b2, dh);
    const Tensor2 dpre = gelu_backward<float>(lt.ffn_pre, dact);
    const Tensor2 dln2 = affine_backward(lt.ln2_out, p.w1, p.b1, dpre);
    const Tensor2 dmid = dh + layer_norm_backward(lt.ln2, p.ln2_gain, p.ln2_bias, dln2);

    // attention branch
    const Tensor2 dcontext = affine_backward(lt.context, p.wo, p.bo, dmid);
    Tensor2 dq = Tensor2::Zero(t_len, cfg.hidden_dim);
    Tensor2 dk = Tensor2::Zero(t_len, cfg.hidden_dim);
    Tensor2 dv = Tensor2::Zero(t_len, cfg.hidden_dim);
    if (aux && has(aux->value, l)) dv += aux->value[l];
    for (std::uint32_t a = 0; a < cfg.num_heads; ++a) {
      const Eigen::Index c0 = a * head_dim;
      const auto dctx_a = dcontext.middleCols(c0, head_dim);
      Tensor2 dprobs = dctx_a * lt.v.middleCols(c0, head_dim).transpose();
      if (aux && l < aux->probs.size() && has(aux->probs[l], a)) dprobs += aux->probs[l][a];
      dv.middleCols(c0, head_dim).noalias() += lt.probs[a].transpose() * dctx_a;
      Tensor2 dlogits = softmax_rows_backward(lt.probs[a], dprobs);
      if (aux && l < aux->logits.size() && has(aux->logits[l], a)) dlogits += aux->logits[l][a];
      dlogits *= scale;
      dq.middleCols(c0, head_dim).noalias() += dlogits * lt.k.middleCols(c0, head_dim);
      dk.middleCols(c0, head_dim).noalias() += dlogits.transpose() * lt.q.middleCols(c0, head_dim);
    }
    Tensor2 dln1 = affine_backward(lt.ln1_out, p.wq, p.bq, dq);
    dln1 += affine_backward(lt.ln1_out, p.wk, p.bk, dk);
    dln1 += affine_backward(lt.ln1_out, p.wv, p.bv, dv);
    dh = dmid + layer_norm_backward(lt.ln1, p.ln1_gain, p.ln1_bias, dln1);
    if (aux && has(aux->hidden, l)) dh += aux->hidden[l];
  }

  for (Eigen::Index t = 0; t < t_len; ++t) {
    s.token_embedding.grad.row(batch.ids(row, t)) += dh.row(t);
    s.position_embedding.grad.row(t) += dh.row(t);
  }
}

}  // namespace

void EncoderConfig::validate() const {
  const auto fail = [](const std::string& what) { throw Error(ErrorKind::Config, what); };
  if (num_layers == 0) fail("num_layers must be >= 1");
  if (num_heads == 0 || hidden_dim % num_heads != 0) {
    fail("hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (ffn_multiplier == 0) fail("ffn_multiplier must be >= 1");
  if (vocab_size < kReservedTokens) fail("vocab_size must cover the reserved tokens");
  if (max_context < 3) fail("max_context must be >= 3");
  if (output_dim == 0) fail("output_dim must be >= 1");
}

EncoderConfig EncoderConfig::teacher_default(std::uint32_t vocab_size, std::uint64_t seed) {
  EncoderConfig c;
  c.num_layers = 4;
  c.num_heads = 4;
  c.hidden_dim = 64;
  c.output_dim = 64;
  c.vocab_size = vocab_size;
  c.seed = seed;
  return c;
}

EncoderConfig EncoderConfig::student_default(std::uint32_t vocab_size, std::uint32_t output_dim,
                                             std::uint64_t seed) {
  EncoderConfig c;
  c.num_layers = 2;
  c.num_heads = 4;
  c.hidden_dim = 32;
  c.output_dim = output_dim;
  c.vocab_size = vocab_size;
  c.seed = seed;
  return c;
}

EncoderState init_encoder(const EncoderConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const Eigen::Index h = config.hidden_dim;
  const Eigen::Index f = config.ffn_dim();

  EncoderState s;
  s.config = config;
  s.token_embedding = uniform_param(config.vocab_size, h, rng, static_cast<double>(h));
  s.position_embedding = uniform_param(config.max_context, h, rng, static_cast<double>(h));
  s.layers.resize(config.num_layers);
  for (auto& p : s.layers) {
    p.ln1_gain = constant_param(h, 1.0f);
    p.ln1_bias = constant_param(h, 0.0f);
    p.wq = uniform_param(h, h, rng, h);
    p.bq = constant_param(h, 0.0f);
    p.wk = uniform_param(h, h, rng, h);
    p.bk = constant_param(h, 0.0f);
    p.wv = uniform_param(h, h, rng, h);
    p.bv = constant_param(h, 0.0f);
    p.wo = uniform_param(h, h, rng, h);
    p.bo = constant_param(h, 0.0f);
    p.ln2_gain = constant_param(h, 1.0f);
    p.ln2_bias = constant_param(h, 0.0f);
    p.w1 = uniform_param(h, f, rng, h);
    p.b1 = constant_param(f, 0.0f);
    p.w2 = uniform_param(f, h, rng, f);
    p.b2 = constant_param(h, 0.0f);
  }
  s.final_ln_gain = constant_param(h, 1.0f);
  s.final_ln_bias = constant_param(h, 0.0f);
  s.w_out = uniform_param(h, config.output_dim, rng, h);
  s.b_out = constant_param(config.output_dim, 0.0f);
  return s;
}

std::vector<Parameter*> parameter_list(EncoderState& state) {
  std::vector<Parameter*> out;
  for_each_parameter(state, [&](const std::string&, Parameter& p) { out.push_back(&p); });
  return out;
}

std::size_t parameter_count(const EncoderState& state) {
  std::size_t n = 0;
  for_each_parameter(state, [&](const std::string&, const Parameter& p) { n += static_cast<std::size_t>(p.size()); });
  return n;
}

void zero_grad(EncoderState& state) {
  for_each_parameter(state, [](const std::string&, Parameter& p) { p.zero_grad(); });
}

bool same_weights(const EncoderState& a, const EncoderState& b) {
  if (!(a.config == b.config)) return false;
  std::vector<const Tensor2*> values;
  for_each_parameter(a, [&](const std::string&, const Parameter& p) { values.push_back(&p.value); });
  std::size_t i = 0;
  bool equal = true;
  for_each_parameter(b, [&](const std::string&, const Parameter& p) {
    equal = equal && i < values.size() && values[i]->rows() == p.rows() && values[i]->cols() == p.cols() &&
            *values[i] == p.value;
    ++i;
  });
  return equal && i == values.size();
}

EncodeResult encode(const EncoderState& state, const TokenBatch& batch, bool want_trace) {
  if (static_cast<std::uint32_t>(batch.length()) > state.config.max_context) {
    throw Error(ErrorKind::Dimension, "sequence length " + std::to_string(batch.length()) +
                                          " exceeds max context " + std::to_string(state.config.max_context));
  }
  EncodeResult result;
  result.embeddings.resize(batch.batch(), state.config.output_dim);
  ForwardTrace trace;
  if (want_trace) trace.examples.reserve(static_cast<std::size_t>(batch.batch()));
  for (Eigen::Index r = 0; r < batch.batch(); ++r) {
    ExampleTrace ex = forward_example(state, batch, r);
    if (state.config.normalize_output) {
      result.embeddings.row(r) = (ex.projected.cast<double>() / ex.norm(0)).cast<float>();
    } else {
      result.embeddings.row(r) = ex.projected;
    }
    if (want_trace) trace.examples.push_back(std::move(ex));
  }
  if (want_trace) {
    trace.embeddings = result.embeddings;
    result.trace = std::move(trace);
  }
  return result;
}

Tensor2& ExampleTraceGrad::hidden_at(std::size_t layer, Eigen::Index rows, Eigen::Index cols) {
  if (hidden.size() <= layer) hidden.resize(layer + 1);
  return ensure(hidden[layer], rows, cols);
}

Tensor2& ExampleTraceGrad::value_at(std::size_t layer, Eigen::Index rows, Eigen::Index cols) {
  if (value.size() <= layer) value.resize(layer + 1);
  return ensure(value[layer], rows, cols);
}

Tensor2& ExampleTraceGrad::probs_at(std::size_t layer, std::size_t head, Eigen::Index t) {
  if (probs.size() <= layer) probs.resize(layer + 1);
  if (probs[layer].size() <= head) probs[layer].resize(head + 1);
  return ensure(probs[layer][head], t, t);
}

Tensor2& ExampleTraceGrad::logits_at(std::size_t layer, std::size_t head, Eigen::Index t) {
  if (logits.size() <= layer) logits.resize(layer + 1);
  if (logits[layer].size() <= head) logits[layer].resize(head + 1);
  return ensure(logits[layer][head], t, t);
}

void encode_backward(EncoderState& state, const TokenBatch& batch, const std::optional<ForwardTrace>& trace,
                     const Tensor2& upstream, const TraceGrad* aux) {
  if (!trace) throw Error(ErrorKind::Usage, "encode_backward needs the forward trace (encode with want_trace)");
  if (static_cast<Eigen::Index>(trace->examples.size()) != batch.batch() || upstream.rows() != batch.batch() ||
      upstream.cols() != state.config.output_dim) {
    throw Error(ErrorKind::Dimension, "encode_backward upstream " + shape_of(upstream) + " for batch of " +
                                          std::to_string(batch.batch()));
  }
  if (aux && aux->examples.size() != trace->examples.size()) {
    throw Error(ErrorKind::Dimension, "trace gradient batch size mismatch");
  }
  for (Eigen::Index r = 0; r < batch.batch(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    backward_example(state, batch, r, trace->examples[i], upstream.row(r), aux ? &aux->examples[i] : nullptr);
  }
}

Tensor2 embed_texts(const EncoderState& state, const Vocab& vocab, std::span<const std::string> texts,
                    std::string_view instruction, std::size_t chunk) {
  Tensor2 out(static_cast<Eigen::Index>(texts.size()), state.config.output_dim);
  std::vector<std::string> buffer;
  for (std::size_t start = 0; start < texts.size(); start += chunk) {
    const std::size_t n = std::min(chunk, texts.size() - start);
    buffer.clear();
    for (std::size_t i = 0; i < n; ++i) buffer.push_back(std::string(instruction) + texts[start + i]);
    const TokenBatch batch = encode_batch(buffer, vocab, state.config.max_context);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = encode(state, batch).embeddings;
  }
  return out;
}

}  // namespace leaf
