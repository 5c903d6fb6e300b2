#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixture.hpp"

using namespace leaf;
using leaf::testing::tiny_fixture;
using leaf::testing::tiny_train_config;

namespace {

std::string checkpoint_bytes(const Checkpoint& cp) {
  std::ostringstream out;
  write_checkpoint(out, cp);
  return out.str();
}

Checkpoint from_bytes(const std::string& bytes) {
  std::istringstream in(bytes);
  return read_checkpoint(in);
}

bool bit_equal(const EncoderState& a, EncoderState b) {
  const std::vector<Parameter*> pb = parameter_list(b);
  std::size_t i = 0;
  bool same = true;
  for_each_parameter(a, [&](const std::string&, const Parameter& p) {
    const Parameter& q = *pb[i++];
    same = same && p.value == q.value && p.first_moment == q.first_moment && p.second_moment == q.second_moment;
  });
  return same;
}

}  // namespace

TEST_CASE("linear schedule endpoints and resets") {
  TrainConfig c;
  CHECK(lr_at(c, 0) == 1e-4);
  CHECK(lr_at(c, 9) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(lr_at(c, 10) == 1e-4);
  CHECK(lr_at(c, 29) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(lr_at(c, 5) == doctest::Approx(1e-4 + (1e-5 - 1e-4) * 5.0 / 9.0));
  CHECK_THROWS_AS((void)lr_at(c, 30), Error);

  // piecewise linear with exactly `cycles` resets
  int resets = 0;
  double lo = 1.0, hi = 0.0;
  for (std::uint32_t e = 0; e < c.total_epochs(); ++e) {
    const double lr = lr_at(c, e);
    if (e > 0 && lr > lr_at(c, e - 1)) ++resets;
    lo = std::min(lo, lr);
    hi = std::max(hi, lr);
  }
  CHECK(resets == 2);
  CHECK(hi == 1e-4);
  CHECK(lo == doctest::Approx(1e-5).epsilon(1e-12));
}

TEST_CASE("constant and cosine schedules") {
  TrainConfig c;
  c.schedule = Schedule::Constant;
  for (std::uint32_t e = 0; e < 30; ++e) CHECK(lr_at(c, e, 3, 5) == 1e-4);

  c.schedule = Schedule::Cosine;
  CHECK(lr_at(c, 0, 0, 5) == doctest::Approx(1e-4));
  CHECK(lr_at(c, 9, 4, 5) == doctest::Approx(1e-5));
  CHECK(lr_at(c, 10, 0, 5) == doctest::Approx(1e-4));
  double previous = 1.0;
  for (std::uint32_t e = 0; e < 10; ++e) {
    for (std::size_t s = 0; s < 5; ++s) {
      const double lr = lr_at(c, e, s, 5);
      CHECK(lr <= previous);
      previous = lr;
    }
  }
  CHECK_THROWS_AS((void)lr_at(c, 0, 5, 5), Error);
  CHECK(parse_schedule("cosine") == Schedule::Cosine);
  CHECK_THROWS_AS((void)parse_schedule("step"), Error);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr_end = 2e-4;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.lr_end = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.cycles = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("adamw fixed points") {
  Parameter p(Tensor2::Constant(2, 3, 0.7f));
  Parameter* params[] = {&p};
  AdamWConfig no_decay;
  no_decay.weight_decay = 0.0;
  adamw_step(params, 0.1, no_decay, 1);
  CHECK(p.value == Tensor2::Constant(2, 3, 0.7f));

  adamw_step(params, 0.1, AdamWConfig{}, 2);
  CHECK((p.value.array() - 0.7f * 0.999f).abs().maxCoeff() <= 1e-7f);
}

TEST_CASE("adamw matches a two-step hand trace") {
  Parameter p(Tensor2::Constant(1, 1, 0.5f));
  Parameter* params[] = {&p};
  const AdamWConfig cfg;
  const double lr = 0.01;
  const double grads[] = {0.2, -0.1};

  double x = 0.5, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    const double g = grads[t - 1];
    x *= 1.0 - lr * cfg.weight_decay;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double m_hat = m / (1.0 - std::pow(0.9, t));
    const double v_hat = v / (1.0 - std::pow(0.999, t));
    x -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);

    p.grad(0, 0) = static_cast<float>(g);
    adamw_step(params, lr, cfg, static_cast<std::uint64_t>(t));
    CHECK(std::abs(p.value(0, 0) - x) <= 1e-7);
  }
}

TEST_CASE("adamw rejects non-finite gradients before updating") {
  Parameter a(Tensor2::Ones(1, 2)), b(Tensor2::Ones(1, 2));
  b.grad(0, 1) = std::numeric_limits<float>::quiet_NaN();
  Parameter* params[] = {&a, &b};
  a.grad.setConstant(1.0f);
  try {
    adamw_step(params, 0.1, AdamWConfig{}, 1);
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
  }
  CHECK(a.value == Tensor2::Ones(1, 2));
  CHECK_THROWS_AS(adamw_step(params, 0.1, AdamWConfig{}, 0), Error);
}

TEST_CASE("one epoch smoke run") {
  const auto f = tiny_fixture(40);
  TrainConfig c = tiny_train_config();
  c.epochs_per_cycle = 1;
  const TrainResult r = train(initial_state(init_encoder(f.student), c), f.cache, f.vocab, c);
  CHECK(r.batches_per_epoch == 4);  // 32 training items, batch 8
  CHECK(r.history.size() == 4);
  CHECK(std::isfinite(r.final_val_loss));
  CHECK(r.final_val_loss >= 0.0);
  CHECK(r.final_val_loss <= 2.0);
  CHECK(r.history.back().val_loss == r.final_val_loss);
  CHECK_FALSE(r.history.front().val_loss.has_value());
  REQUIRE(r.checkpoints.size() == 1);
  CHECK(r.checkpoints[0].epoch == 1);
  CHECK(r.state.step == 4);
}

TEST_CASE("partial last batch is kept") {
  const auto f = tiny_fixture(45);  // 36 training items
  TrainConfig c = tiny_train_config();
  c.epochs_per_cycle = 1;
  const TrainResult r = train(initial_state(init_encoder(f.student), c), f.cache, f.vocab, c);
  CHECK(r.batches_per_epoch == 5);
}

TEST_CASE("training is deterministic and resumes bit-exactly") {
  const auto f = tiny_fixture(40);
  const TrainConfig c = tiny_train_config();
  const TrainResult a = train(initial_state(init_encoder(f.student), c), f.cache, f.vocab, c);
  const TrainResult b = train(initial_state(init_encoder(f.student), c), f.cache, f.vocab, c);
  CHECK(bit_equal(a.state.student, b.state.student));
  CHECK(a.final_val_loss == b.final_val_loss);
  CHECK(*a.initial_val_loss > a.final_val_loss);

  TrainOptions half;
  half.stop_after_epoch = 2;
  const TrainResult first = train(initial_state(init_encoder(f.student), c), f.cache, f.vocab, c, half);
  REQUIRE(first.checkpoints.size() == 2);
  const Checkpoint restored = from_bytes(checkpoint_bytes(first.checkpoints.back()));
  const TrainResult second = train(restored.state, f.cache, f.vocab, c);
  CHECK_FALSE(second.initial_val_loss.has_value());
  CHECK(second.history.size() == 2 * a.batches_per_epoch);
  CHECK(bit_equal(a.state.student, second.state.student));
  CHECK(second.final_val_loss == a.final_val_loss);
  CHECK(second.state.rng == a.state.rng);
  CHECK(second.state.step == a.state.step);
}

TEST_CASE("checkpoint files round trip byte for byte") {
  const auto f = tiny_fixture(40);
  TrainConfig c = tiny_train_config();
  c.epochs_per_cycle = 1;
  const TrainResult r = train(initial_state(init_encoder(f.student), c), f.cache, f.vocab, c);
  const std::string bytes = checkpoint_bytes(r.checkpoints[0]);
  const Checkpoint back = from_bytes(bytes);
  CHECK(checkpoint_bytes(back) == bytes);
  CHECK(back.epoch == 1);
  CHECK(back.val_loss == r.checkpoints[0].val_loss);

  const auto path = std::filesystem::temp_directory_path() / "leaf_ckpt.bin";
  save_checkpoint(path, r.checkpoints[0]);
  CHECK(checkpoint_bytes(load_checkpoint(path)) == bytes);
  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS((void)load_checkpoint(path), Error);
  std::filesystem::remove(path);
}

TEST_CASE("auxiliary losses need a live teacher") {
  const auto f = tiny_fixture(40);
  TrainConfig c = tiny_train_config();
  c.epochs_per_cycle = 1;
  c.loss.kind = LossKind::LeafPlusTinyBert;
  c.loss.aux_weight = 0.5;
  TrainState state = initial_state(init_encoder(f.student), c, f.teacher.state().config.hidden_dim);
  try {
    (void)train(state, f.cache, f.vocab, c);
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
  }
  TrainOptions options;
  options.teacher = &f.teacher;
  const TrainResult r = train(state, f.cache, f.vocab, c, options);
  CHECK(std::isfinite(r.final_val_loss));
  REQUIRE(r.state.projection.has_value());
  const Checkpoint back = from_bytes(checkpoint_bytes(r.checkpoints[0]));
  REQUIRE(back.state.projection.has_value());
  CHECK(back.state.projection->weight.value == r.state.projection->weight.value);

  for (const LossKind k : {LossKind::LeafPlusMiniLM, LossKind::LeafPlusDistilBert}) {
    c.loss.kind = k;
    const TrainResult rk = train(initial_state(init_encoder(f.student), c, 16), f.cache, f.vocab, c, options);
    CHECK(std::isfinite(rk.final_val_loss));
  }
  c.loss.kind = LossKind::LeafPlusTinyBert;
  CHECK_THROWS_AS((void)initial_state(init_encoder(f.student), c), Error);
}

TEST_CASE("train rejects mismatched shapes") {
  const auto f = tiny_fixture(40);
  const TrainConfig c = tiny_train_config();
  EncoderConfig wrong = f.student;
  wrong.output_dim = 5;
  try {
    (void)train(initial_state(init_encoder(wrong), c), f.cache, f.vocab, c);
    FAIL("expected dimension error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Dimension);
  }
  TrainOptions too_many;
  too_many.train_limit = 1000;
  CHECK_THROWS_AS((void)train(initial_state(init_encoder(f.student), c), f.cache, f.vocab, c, too_many), Error);
}

TEST_CASE("loss history csv") {
  const auto f = tiny_fixture(40);
  TrainConfig c = tiny_train_config();
  c.epochs_per_cycle = 1;
  const TrainResult r = train(initial_state(init_encoder(f.student), c), f.cache, f.vocab, c);
  const auto path = std::filesystem::temp_directory_path() / "leaf_history.csv";
  write_history_csv(path, r.history);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,step,lr,train_loss,val_loss");
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  CHECK(rows.size() == r.history.size());
  CHECK(rows.front().back() == ',');
  CHECK(rows.back().back() != ',');
  std::filesystem::remove(path);
}

TEST_CASE("robustness margin fit") {
  SUBCASE("intercept case") {
    std::vector<RobustnessPoint> pts;
    for (const double e : {0.2, 0.4, 0.6, 0.9}) pts.push_back({e, -e + 0.7, false});
    const RobustnessFit fit = fit_robustness_margin(pts, 0.7, false);
    CHECK(std::abs(fit.margin) <= 1e-9);
    CHECK(std::abs(fit.slope + 1.0) <= 1e-12);
  }
  SUBCASE("closed-form crossing") {
    std::vector<RobustnessPoint> pts;
    for (const double e : {0.3, 0.5, 0.8}) pts.push_back({e, -0.5 * e + 0.75, false});
    const RobustnessFit fit = fit_robustness_margin(pts, 0.70, false);
    CHECK(std::abs(fit.margin - 0.10) <= 1e-9);
  }
  SUBCASE("cycle-first points are excluded") {
    std::vector<RobustnessPoint> pts = {{0.3, 0.6, false}, {0.5, 0.5, true}, {0.6, 0.45, false}, {0.9, 0.1, true}};
    CHECK(fit_robustness_margin(pts, 0.7, true).points == 2);
    CHECK(fit_robustness_margin(pts, 0.7, false).points == 4);
  }
  SUBCASE("degenerate inputs") {
    std::vector<RobustnessPoint> vertical = {{0.5, 0.1, false}, {0.5, 0.3, false}};
    std::vector<RobustnessPoint> flat = {{0.2, 0.4, false}, {0.5, 0.4, false}};
    std::vector<RobustnessPoint> single = {{0.2, 0.4, false}};
    for (const auto* pts : {&vertical, &flat, &single}) {
      try {
        (void)fit_robustness_margin(*pts, 0.7, false);
        FAIL("expected fit error");
      } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Fit);
      }
    }
  }
}

TEST_CASE("spearman") {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> up = {10, 20, 25, 40, 100};
  const std::vector<double> down = {5, 4, 3, 2, 1};
  CHECK(spearman(x, up) == doctest::Approx(1.0));
  CHECK(spearman(x, down) == doctest::Approx(-1.0));
  // ties get average ranks: ranks of y = 1.5, 1.5, 3, 4, 5
  const std::vector<double> tied = {1, 1, 2, 3, 4};
  const double mr = 3.0;
  const double rx[] = {1, 2, 3, 4, 5}, ry[] = {1.5, 1.5, 3, 4, 5};
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 5; ++i) {
    sxy += (rx[i] - mr) * (ry[i] - mr);
    sxx += (rx[i] - mr) * (rx[i] - mr);
    syy += (ry[i] - mr) * (ry[i] - mr);
  }
  CHECK(spearman(x, tied) == doctest::Approx(sxy / std::sqrt(sxx * syy)).epsilon(1e-12));
  CHECK_THROWS_AS((void)spearman(x, std::vector<double>{1, 2}), Error);
}

TEST_CASE("batch size ablation arithmetic") {
  const auto f = tiny_fixture(40);
  const TrainConfig c = tiny_train_config();
  const std::vector<std::size_t> sizes = {2, 8};
  const std::vector<BatchSizeRow> rows = ablation_batch_size(f.student, f.cache, f.vocab, c, sizes, 16);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].batches == 8);
  CHECK(rows[1].batches == 2);
  CHECK(rows[0].batches / rows[1].batches == 4);
  for (const auto& r : rows) CHECK(std::isfinite(r.val_loss));
  const std::vector<std::size_t> bad = {3};
  CHECK_THROWS_AS((void)ablation_batch_size(f.student, f.cache, f.vocab, c, bad, 16), Error);
}

TEST_CASE("pooling and schedule ablations") {
  const auto f = tiny_fixture(40);
  const TrainConfig c = tiny_train_config();
  const PoolingAblation p = ablation_pooling(f.student, f.cache, f.vocab, c);
  CHECK(std::isfinite(p.mean_final_val));
  CHECK(std::isfinite(p.cls_final_val));
  CHECK(p.mean_final_val != p.cls_final_val);

  const std::vector<Schedule> schedules = {Schedule::Constant, Schedule::Linear};
  const std::vector<std::size_t> budgets = {1, 4};
  const std::vector<LrRow> rows = ablation_lr(f.student, f.cache, f.vocab, c, schedules, budgets);
  CHECK(rows.size() == 4);
  CHECK(rows[0].batches_per_epoch == 1);
  CHECK(rows[3].schedule == Schedule::Linear);
  for (const auto& r : rows) CHECK(std::isfinite(r.val_loss));
}
