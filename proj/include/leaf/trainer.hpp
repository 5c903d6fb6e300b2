#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "leaf/distill.hpp"
#include "leaf/rng.hpp"
#include "leaf/teacher.hpp"

namespace leaf {

enum class Schedule : std::uint8_t { Constant, Linear, Cosine };

std::string_view to_string(Schedule s);
Schedule parse_schedule(std::string_view name);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr_start = 1e-4;
  double lr_end = 1e-5;
  std::uint32_t cycles = 3;
  std::uint32_t epochs_per_cycle = 10;
  AdamWConfig adamw;
  Schedule schedule = Schedule::Linear;
  LossSpec loss;
  std::uint64_t seed = 0;
  std::uint32_t checkpoint_every = 1;  // epochs
  std::size_t val_batch_size = 128;
  std::uint32_t max_len = kDefaultMaxLen;

  std::uint32_t total_epochs() const { return cycles * epochs_per_cycle; }
  void validate() const;
};

// LINEAR and CONSTANT depend on the epoch only. COSINE anneals per step over
// each cycle, so it also needs the step inside the epoch and the epoch length.
double lr_at(const TrainConfig& config, std::uint32_t global_epoch, std::size_t step_in_epoch = 0,
             std::size_t steps_per_epoch = 1);

// One decoupled-weight-decay Adam update; `step` is the 1-based update count
// used for bias correction. Throws before touching anything if a gradient is
// not finite.
void adamw_step(std::span<Parameter* const> params, double lr, const AdamWConfig& config, std::uint64_t step);

/// Everything needed to continue a run.
struct TrainState {
  EncoderState student;
  std::optional<ProjectionToTeacher> projection;
  Rng rng;
  std::uint64_t step = 0;    // optimizer updates taken
  std::uint32_t epoch = 0;   // completed epochs

  std::vector<Parameter*> parameters();
};

TrainState initial_state(EncoderState student, const TrainConfig& config, std::uint32_t teacher_hidden = 0);

struct Checkpoint {
  std::uint32_t epoch = 0;  // 1-based, epochs completed
  std::uint32_t cycle = 0;  // 0-based cycle of that epoch
  double val_loss = 0.0;
  TrainState state;

  bool cycle_first(const TrainConfig& config) const { return (epoch - 1) % config.epochs_per_cycle == 0; }
};

// "LEFT" checkpoint: counters, RNG state, encoder weights, Adam moments and
// the optional projection.
void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct HistoryRow {
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;  // set on the last batch of an epoch
};

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> history);

struct TrainOptions {
  const SyntheticTeacher* teacher = nullptr;        // required for auxiliary losses
  std::optional<std::uint32_t> stop_after_epoch;    // stop once this many epochs are done
  std::optional<std::size_t> train_limit;           // use only the first N training items
  std::function<void(const Checkpoint&)> on_checkpoint;
  bool keep_checkpoints = true;
};

struct TrainResult {
  TrainState state;
  std::vector<Checkpoint> checkpoints;
  std::vector<HistoryRow> history;
  std::optional<double> initial_val_loss;  // only for runs starting at epoch 0
  double final_val_loss = 0.0;
  double train_seconds = 0.0;              // excludes validation
  std::size_t batches_per_epoch = 0;
};

// Mean per-example l2 error of the student over the validation split.
double validation_loss(const EncoderState& student, const EmbeddingCache& cache, const Vocab& vocab,
                       const TrainConfig& config);

TrainResult train(TrainState state, const EmbeddingCache& cache, const Vocab& vocab, const TrainConfig& config,
                  const TrainOptions& options = {});

struct RobustnessPoint {
  double mean_val_error = 0.0;
  double downstream_score = 0.0;
  bool cycle_first_epoch = false;
};

struct RobustnessFit {
  double slope = 0.0;
  double intercept = 0.0;
  double margin = 0.0;  // error level where the trend reaches the teacher score
  std::size_t points = 0;
};

RobustnessFit fit_robustness_margin(std::span<const RobustnessPoint> points, double teacher_score,
                                    bool exclude_cycle_first);

// Rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct BatchSizeRow {
  std::size_t batch_size = 0;
  double seconds = 0.0;
  double val_loss = 0.0;
  std::size_t batches = 0;
};

// One epoch per size over the same first `budget` training items.
std::vector<BatchSizeRow> ablation_batch_size(const EncoderConfig& student, const EmbeddingCache& cache,
                                              const Vocab& vocab, const TrainConfig& config,
                                              std::span<const std::size_t> sizes, std::size_t budget);

struct PoolingAblation {
  double mean_final_val = 0.0;
  double cls_final_val = 0.0;
};

PoolingAblation ablation_pooling(const EncoderConfig& student, const EmbeddingCache& cache, const Vocab& vocab,
                                 const TrainConfig& config, std::uint32_t epochs = 1);

struct LrRow {
  Schedule schedule = Schedule::Constant;
  std::size_t batches_per_epoch = 0;
  double val_loss = 0.0;
};

// Every schedule at every data budget (batches per epoch), one cycle of
// `config.epochs_per_cycle` epochs each.
std::vector<LrRow> ablation_lr(const EncoderConfig& student, const EmbeddingCache& cache, const Vocab& vocab,
                               const TrainConfig& config, std::span<const Schedule> schedules,
                               std::span<const std::size_t> budgets);

}  // namespace leaf
