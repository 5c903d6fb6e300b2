#include "leaf/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include "leaf/binary_io.hpp"

namespace leaf {
namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint64_t kProjectionSeedSalt = 0x9E3779B97F4A7C15ull;

std::vector<std::string> prefixed(const EmbeddingCache& cache, std::span<const std::size_t> rows) {
  std::vector<std::string> out;
  out.reserve(rows.size());
  for (const std::size_t r : rows) out.push_back(cache.instruction() + cache.records()[r].text);
  return out;
}

Tensor2 target_rows(const EmbeddingCache& cache, std::span<const std::size_t> rows) {
  Tensor2 out(static_cast<Eigen::Index>(rows.size()), cache.dim());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = cache.vectors().row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

void write_parameter(std::ostream& out, const Parameter& p) {
  binary::write_floats(out, p.value);
  binary::write_floats(out, p.first_moment);
  binary::write_floats(out, p.second_moment);
}

void read_parameter(std::istream& in, Parameter& p) {
  binary::read_floats(in, p.value);
  binary::read_floats(in, p.first_moment);
  binary::read_floats(in, p.second_moment);
}

std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string_view to_string(Schedule s) {
  switch (s) {
    case Schedule::Constant: return "constant";
    case Schedule::Linear: return "linear";
    case Schedule::Cosine: return "cosine";
  }
  return "?";
}

Schedule parse_schedule(std::string_view name) {
  for (const Schedule s : {Schedule::Constant, Schedule::Linear, Schedule::Cosine}) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorKind::Config, "unknown schedule '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error(ErrorKind::Config, "batch_size must be >= 1");
  if (cycles < 1 || epochs_per_cycle < 1) throw Error(ErrorKind::Config, "cycles and epochs_per_cycle must be >= 1");
  if (!(lr_end > 0.0) || !(lr_end <= lr_start)) {
    throw Error(ErrorKind::Config, "need 0 < lr_end <= lr_start, got " + csv_number(lr_end) + ", " + csv_number(lr_start));
  }
  if (checkpoint_every < 1) throw Error(ErrorKind::Config, "checkpoint_every must be >= 1");
  if (val_batch_size < 1) throw Error(ErrorKind::Config, "val_batch_size must be >= 1");
  if (max_len < 2) throw Error(ErrorKind::Config, "max_len must be >= 2");
  if (adamw.beta1 < 0 || adamw.beta1 >= 1 || adamw.beta2 < 0 || adamw.beta2 >= 1 || adamw.eps <= 0 ||
      adamw.weight_decay < 0) {
    throw Error(ErrorKind::Config, "invalid AdamW hyperparameters");
  }
  if (loss.aux_weight < 0) throw Error(ErrorKind::Config, "aux_weight must be >= 0");
}

double lr_at(const TrainConfig& config, std::uint32_t global_epoch, std::size_t step_in_epoch,
             std::size_t steps_per_epoch) {
  if (global_epoch >= config.total_epochs()) {
    throw Error(ErrorKind::Config, "epoch " + std::to_string(global_epoch) + " outside schedule of " +
                                       std::to_string(config.total_epochs()) + " epochs");
  }
  if (steps_per_epoch == 0 || step_in_epoch >= steps_per_epoch) {
    throw Error(ErrorKind::Config, "step " + std::to_string(step_in_epoch) + " outside epoch of " +
                                       std::to_string(steps_per_epoch) + " steps");
  }
  const std::uint32_t e = global_epoch % config.epochs_per_cycle;
  switch (config.schedule) {
    case Schedule::Constant:
      return config.lr_start;
    case Schedule::Linear: {
      if (config.epochs_per_cycle == 1) return config.lr_start;
      const double t = static_cast<double>(e) / (config.epochs_per_cycle - 1);
      return config.lr_start + (config.lr_end - config.lr_start) * t;
    }
    case Schedule::Cosine: {
      const std::size_t total = static_cast<std::size_t>(config.epochs_per_cycle) * steps_per_epoch;
      if (total == 1) return config.lr_start;
      const double t = static_cast<double>(e * steps_per_epoch + step_in_epoch) / static_cast<double>(total - 1);
      return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1.0 + std::cos(std::numbers::pi * t));
    }
  }
  return config.lr_start;
}

void adamw_step(std::span<Parameter* const> params, double lr, const AdamWConfig& config, std::uint64_t step) {
  if (step < 1) throw Error(ErrorKind::Usage, "AdamW step counter must start at 1");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->grad.allFinite()) {
      throw Error(ErrorKind::Numeric, "non-finite gradient in parameter #" + std::to_string(i) + " " +
                                          shape_of(params[i]->grad) + " at step " + std::to_string(step));
    }
  }
  const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * config.weight_decay;
  for (Parameter* p : params) {
    float* value = p->value.data();
    float* m = p->first_moment.data();
    float* v = p->second_moment.data();
    const float* g = p->grad.data();
    for (Eigen::Index k = 0; k < p->size(); ++k) {
      const double gk = g[k];
      const double mk = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
      const double vk = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double update = (mk / correction1) / (std::sqrt(vk / correction2) + config.eps);
      value[k] = static_cast<float>(value[k] * decay - lr * update);
    }
  }
}

std::vector<Parameter*> TrainState::parameters() {
  std::vector<Parameter*> out = parameter_list(student);
  if (projection) out.push_back(&projection->weight);
  return out;
}

TrainState initial_state(EncoderState student, const TrainConfig& config, std::uint32_t teacher_hidden) {
  TrainState state;
  state.rng = Rng(config.seed);
  if (config.loss.needs_projection()) {
    if (teacher_hidden == 0) throw Error(ErrorKind::Config, "loss '" + std::string(to_string(config.loss.kind)) +
                                                                "' needs the teacher hidden size");
    state.projection =
        ProjectionToTeacher::random(teacher_hidden, student.config.hidden_dim, config.seed ^ kProjectionSeedSalt);
  }
  state.student = std::move(student);
  return state;
}

void write_checkpoint(std::ostream& out, const Checkpoint& cp) {
  binary::write_magic(out, "LEFT");
  binary::write_u32(out, kCheckpointVersion);
  binary::write_u32(out, cp.epoch);
  binary::write_u32(out, cp.cycle);
  binary::write_u64(out, cp.state.step);
  binary::write_u32(out, cp.state.epoch);
  binary::write_f64(out, cp.val_loss);
  binary::write_string(out, cp.state.rng.state());
  write_encoder(out, cp.state.student);
  for_each_parameter(cp.state.student, [&](const std::string&, const Parameter& p) {
    binary::write_floats(out, p.first_moment);
    binary::write_floats(out, p.second_moment);
  });
  binary::write_u8(out, cp.state.projection ? 1 : 0);
  if (cp.state.projection) {
    const Parameter& w = cp.state.projection->weight;
    binary::write_u32(out, static_cast<std::uint32_t>(w.rows()));
    binary::write_u32(out, static_cast<std::uint32_t>(w.cols()));
    write_parameter(out, w);
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  binary::expect_magic(in, "LEFT");
  const std::uint32_t version = binary::read_u32(in);
  if (version != kCheckpointVersion) throw Error(ErrorKind::Format, "unsupported LEFT version " + std::to_string(version));
  Checkpoint cp;
  cp.epoch = binary::read_u32(in);
  cp.cycle = binary::read_u32(in);
  cp.state.step = binary::read_u64(in);
  cp.state.epoch = binary::read_u32(in);
  cp.val_loss = binary::read_f64(in);
  cp.state.rng.restore(binary::read_string(in));
  cp.state.student = read_encoder(in);
  for_each_parameter(cp.state.student, [&](const std::string&, Parameter& p) {
    binary::read_floats(in, p.first_moment);
    binary::read_floats(in, p.second_moment);
  });
  if (binary::read_u8(in) != 0) {
    const std::uint32_t rows = binary::read_u32(in);
    const std::uint32_t cols = binary::read_u32(in);
    if (rows == 0 || cols == 0 || rows > (1u << 16) || cols > (1u << 16)) {
      throw Error(ErrorKind::Format, "bad projection shape " + shape_string(rows, cols));
    }
    ProjectionToTeacher proj{Parameter(rows, cols)};
    read_parameter(in, proj.weight);
    cp.state.projection = std::move(proj);
  }
  return cp;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  write_checkpoint(out, checkpoint);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  Checkpoint cp = read_checkpoint(in);
  if (in.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::Format, "trailing bytes in " + path.string());
  return cp;
}

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "epoch,step,lr,train_loss,val_loss\n";
  for (const auto& row : history) {
    out << row.epoch << ',' << row.step << ',' << csv_number(row.lr) << ',' << csv_number(row.train_loss) << ','
        << (row.val_loss ? csv_number(*row.val_loss) : "") << '\n';
  }
}

double validation_loss(const EncoderState& student, const EmbeddingCache& cache, const Vocab& vocab,
                       const TrainConfig& config) {
  const std::vector<std::size_t> rows = cache.indices(Split::Val);
  if (rows.empty()) throw Error(ErrorKind::Config, "cache has no validation items");
  double sum = 0.0;
  for (std::size_t start = 0; start < rows.size(); start += config.val_batch_size) {
    const auto chunk = std::span(rows).subspan(start, std::min(config.val_batch_size, rows.size() - start));
    const TokenBatch batch = encode_batch(prefixed(cache, chunk), vocab, config.max_len);
    sum += loss_l2(encode(student, batch).embeddings, target_rows(cache, chunk)).per_example.sum();
  }
  return sum / static_cast<double>(rows.size());
}

TrainResult train(TrainState state, const EmbeddingCache& cache, const Vocab& vocab, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  EncoderState& student = state.student;
  if (student.config.output_dim != cache.dim()) {
    throw Error(ErrorKind::Dimension, "student output_dim " + std::to_string(student.config.output_dim) +
                                          " != cache dim " + std::to_string(cache.dim()));
  }
  if (student.config.vocab_size != vocab.size()) {
    throw Error(ErrorKind::Config, "student vocab_size does not match the vocabulary");
  }
  if (config.max_len > student.config.max_context) {
    throw Error(ErrorKind::Config, "max_len " + std::to_string(config.max_len) + " exceeds student max_context " +
                                       std::to_string(student.config.max_context));
  }
  const SyntheticTeacher* teacher = options.teacher;
  if (config.loss.needs_traces()) {
    if (!teacher) {
      throw Error(ErrorKind::Config, "loss '" + std::string(to_string(config.loss.kind)) +
                                         "' needs a trace-capable teacher; cache-only runs support 'leaf' only");
    }
    if (!(teacher->vocab() == vocab) || teacher->state().config.max_context < config.max_len) {
      throw Error(ErrorKind::Compatibility, "teacher and student must share vocabulary and context length");
    }
  }
  if (config.loss.needs_projection()) {
    if (!state.projection) throw Error(ErrorKind::Usage, "training state has no projection for the auxiliary loss");
    const Parameter& w = state.projection->weight;
    if (w.rows() != teacher->state().config.hidden_dim || w.cols() != student.config.hidden_dim) {
      throw Error(ErrorKind::Dimension, "projection " + shape_of(w.value) + " does not map student to teacher");
    }
  }
  if (state.epoch > config.total_epochs()) throw Error(ErrorKind::Config, "state is past the end of the schedule");

  std::vector<std::size_t> train_rows = cache.indices(Split::Train);
  if (options.train_limit) {
    if (*options.train_limit > train_rows.size()) {
      throw Error(ErrorKind::Config, "train limit " + std::to_string(*options.train_limit) + " exceeds " +
                                         std::to_string(train_rows.size()) + " training items");
    }
    train_rows.resize(*options.train_limit);
  }
  if (train_rows.empty()) throw Error(ErrorKind::Config, "cache has no training items");

  TrainResult result;
  const std::size_t steps = (train_rows.size() + config.batch_size - 1) / config.batch_size;
  result.batches_per_epoch = steps;
  if (state.epoch == 0) result.initial_val_loss = validation_loss(student, cache, vocab, config);
  const std::uint32_t end = std::min(config.total_epochs(), options.stop_after_epoch.value_or(config.total_epochs()));

  std::vector<Parameter*> params = state.parameters();
  const bool traces = config.loss.needs_traces();
  for (std::uint32_t epoch = state.epoch; epoch < end; ++epoch) {
    std::vector<std::size_t> order = train_rows;
    state.rng.shuffle(order);
    const auto started = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < steps; ++s) {
      const auto rows = std::span(order).subspan(s * config.batch_size,
                                                 std::min(config.batch_size, order.size() - s * config.batch_size));
      const double lr = lr_at(config, epoch, s, steps);
      const std::vector<std::string> texts = prefixed(cache, rows);
      const TokenBatch batch = encode_batch(texts, vocab, config.max_len);
      const Tensor2 target = target_rows(cache, rows);

      EncodeResult out = encode(student, batch, true);
      std::optional<EncodeResult> teacher_out;
      if (traces) teacher_out = teacher->trace(batch);
      if (state.projection) state.projection->weight.zero_grad();
      const CompositeLoss loss =
          composite_loss(config.loss, out.embeddings, target, traces ? &*out.trace : nullptr,
                         teacher_out ? &*teacher_out->trace : nullptr, state.projection ? &*state.projection : nullptr);
      if (!std::isfinite(loss.total)) {
        throw Error(ErrorKind::Numeric, "non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                            std::to_string(state.step + 1));
      }
      zero_grad(student);
      encode_backward(student, batch, out.trace, loss.grad_embeddings, traces ? &loss.trace_grad : nullptr);
      ++state.step;
      adamw_step(params, lr, config.adamw, state.step);
      result.history.push_back({epoch + 1, state.step, lr, loss.total, std::nullopt});
    }
    result.train_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    state.epoch = epoch + 1;

    const double val = validation_loss(student, cache, vocab, config);
    if (!std::isfinite(val)) throw Error(ErrorKind::Numeric, "non-finite validation loss after epoch " + std::to_string(state.epoch));
    result.history.back().val_loss = val;
    result.final_val_loss = val;
    if (state.epoch % config.checkpoint_every == 0 || state.epoch == config.total_epochs()) {
      Checkpoint cp{state.epoch, epoch / config.epochs_per_cycle, val, state};
      if (options.on_checkpoint) options.on_checkpoint(cp);
      if (options.keep_checkpoints) result.checkpoints.push_back(std::move(cp));
    }
  }
  if (result.history.empty()) result.final_val_loss = validation_loss(student, cache, vocab, config);
  result.state = std::move(state);
  return result;
}

RobustnessFit fit_robustness_margin(std::span<const RobustnessPoint> points, double teacher_score,
                                    bool exclude_cycle_first) {
  std::vector<RobustnessPoint> used;
  for (const auto& p : points) {
    if (!(exclude_cycle_first && p.cycle_first_epoch)) used.push_back(p);
  }
  if (used.size() < 2) throw Error(ErrorKind::Fit, "need at least 2 points, have " + std::to_string(used.size()));
  double mx = 0.0, my = 0.0;
  for (const auto& p : used) {
    mx += p.mean_val_error;
    my += p.downstream_score;
  }
  mx /= static_cast<double>(used.size());
  my /= static_cast<double>(used.size());
  double sxx = 0.0, sxy = 0.0;
  for (const auto& p : used) {
    sxx += (p.mean_val_error - mx) * (p.mean_val_error - mx);
    sxy += (p.mean_val_error - mx) * (p.downstream_score - my);
  }
  if (!(sxx > 0.0)) throw Error(ErrorKind::Fit, "all points share one error value");
  RobustnessFit fit;
  fit.slope = sxy / sxx;
  if (fit.slope == 0.0) throw Error(ErrorKind::Fit, "flat trend never reaches the teacher score");
  fit.intercept = my - fit.slope * mx;
  fit.margin = (teacher_score - fit.intercept) / fit.slope;
  fit.points = used.size();
  return fit;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::Dimension, "spearman inputs differ in length");
  if (x.size() < 2) throw Error(ErrorKind::Fit, "spearman needs at least 2 points");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> rx = ranks(x), ry = ranks(y);
  const Eigen::Map<const Eigen::ArrayXd> ax(rx.data(), static_cast<Eigen::Index>(rx.size()));
  const Eigen::Map<const Eigen::ArrayXd> ay(ry.data(), static_cast<Eigen::Index>(ry.size()));
  const Eigen::ArrayXd dx = ax - ax.mean(), dy = ay - ay.mean();
  const double denom = std::sqrt((dx * dx).sum() * (dy * dy).sum());
  if (!(denom > 0.0)) throw Error(ErrorKind::Fit, "spearman undefined for constant input");
  return (dx * dy).sum() / denom;
}

std::vector<BatchSizeRow> ablation_batch_size(const EncoderConfig& student, const EmbeddingCache& cache,
                                              const Vocab& vocab, const TrainConfig& config,
                                              std::span<const std::size_t> sizes, std::size_t budget) {
  std::vector<BatchSizeRow> rows;
  for (const std::size_t size : sizes) {
    if (size == 0 || budget % size != 0) {
      throw Error(ErrorKind::Config, "budget " + std::to_string(budget) + " not divisible by batch size " +
                                         std::to_string(size));
    }
  }
  for (const std::size_t size : sizes) {
    TrainConfig c = config;
    c.batch_size = size;
    c.cycles = 1;
    c.epochs_per_cycle = 1;
    TrainOptions options;
    options.train_limit = budget;
    options.keep_checkpoints = false;
    const TrainResult r = train(initial_state(init_encoder(student), c), cache, vocab, c, options);
    rows.push_back({size, r.train_seconds, r.final_val_loss, r.batches_per_epoch});
  }
  return rows;
}

PoolingAblation ablation_pooling(const EncoderConfig& student, const EmbeddingCache& cache, const Vocab& vocab,
                                 const TrainConfig& config, std::uint32_t epochs) {
  TrainConfig c = config;
  c.cycles = 1;
  c.epochs_per_cycle = epochs;
  TrainOptions options;
  options.keep_checkpoints = false;
  auto run = [&](Pooling pooling) {
    EncoderConfig s = student;
    s.pooling = pooling;
    return train(initial_state(init_encoder(s), c), cache, vocab, c, options).final_val_loss;
  };
  return {run(Pooling::Mean), run(Pooling::Cls)};
}

std::vector<LrRow> ablation_lr(const EncoderConfig& student, const EmbeddingCache& cache, const Vocab& vocab,
                               const TrainConfig& config, std::span<const Schedule> schedules,
                               std::span<const std::size_t> budgets) {
  std::vector<LrRow> rows;
  for (const std::size_t batches : budgets) {
    for (const Schedule schedule : schedules) {
      TrainConfig c = config;
      c.schedule = schedule;
      c.cycles = 1;
      TrainOptions options;
      options.train_limit = batches * c.batch_size;
      options.keep_checkpoints = false;
      const TrainResult r = train(initial_state(init_encoder(student), c), cache, vocab, c, options);
      rows.push_back({schedule, batches, r.final_val_loss});
    }
  }
  return rows;
}

}  // namespace leaf
