#include "doctest.h"

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "leaf/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "leaf_cli_test";

int run_leaf(const std::string& args, const std::string& env = {}) {
  const std::string cmd = "cd " + kWork.string() + " && " + env + " " LEAF_BINARY " " + args + " > last.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& path) { return json::parse(slurp(path)); }

std::size_t data_lines(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::size_t n = 0;
  std::getline(in, line);
  while (std::getline(in, line)) ++n;
  return n;
}

// One corpus and cache shared by every case.
void prepare() {
  static bool done = false;
  if (done) return;
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  REQUIRE(run_leaf("gen-corpus --out data --count 40 --clusters 4 --queries 8 --train-texts 80 --seed 5") == 0);
  REQUIRE(run_leaf("cache --texts data/train.jsonl --out cache --vocab-size 160 --teacher-layers 2 --teacher-hidden 16 "
                   "--teacher-heads 2 --teacher-output 16 --teacher-context 32 --val-holdout 16 --seed 5") == 0);
  REQUIRE(run_leaf("train --cache cache --out run --cycles 1 --epochs-per-cycle 4 --batch-size 16 --lr-start 3e-3 "
                   "--lr-end 3e-4 --hidden 16 --heads 2 --layers 1 --context 32 --max-len 32 --seed 5") == 0);
  done = true;
}

}  // namespace

TEST_CASE("pipeline smoke") {
  prepare();
  CHECK(fs::exists(kWork / "data" / "qrels.tsv"));
  CHECK(fs::exists(kWork / "cache" / "cache.bin"));
  CHECK(run_leaf("train --cache cache --out run2 --cycles 1 --epochs-per-cycle 2 --hidden 16 --heads 2 --layers 1 "
                 "--context 32 --max-len 32") == 0);
  const json report = read_json(kWork / "run2" / "report.json");
  CHECK(report["epochs_completed"] == 2);
  CHECK(report["final_val_loss"].get<double>() < report["initial_val_loss"].get<double>() + 1.0);
  CHECK(run_leaf("eval --data data --cache cache --model run2/student.lefc --out ev") == 0);
  const json ev = read_json(kWork / "ev" / "report.json");
  CHECK(ev["ndcg10"].get<double>() >= 0.0);
  CHECK(ev["ndcg10"].get<double>() <= 1.0);
  CHECK(data_lines(kWork / "ev" / "per_query.csv") == ev["queries"].get<std::size_t>());
  for (const char* dir : {"data", "cache", "run2", "ev"}) CHECK(fs::exists(kWork / dir / "run_manifest.json"));
}

TEST_CASE("sweep row count") {
  prepare();
  REQUIRE(run_leaf("sweep --data data --cache cache --model run/student.lefc --out sw --dims 16,8,4 "
                   "--schemes float32,int8,binary --modes standard,asym") == 0);
  CHECK(data_lines(kWork / "sw" / "sweep.csv") == 2 * 3 * 3);
  REQUIRE(run_leaf("sweep --data data --cache cache --model run/student.lefc --out sw1 --dims 8 --schemes binary "
                   "--modes asym") == 0);
  CHECK(data_lines(kWork / "sw1" / "sweep.csv") == 1);
}

TEST_CASE("robustness reproduces the module fit") {
  prepare();
  REQUIRE(run_leaf("robustness --data data --cache cache --checkpoints run/checkpoints --out rb --epochs-per-cycle 4 "
                   "--exclude-cycle-first false --teacher-score 0.5") == 0);
  const json report = read_json(kWork / "rb" / "report.json");
  std::vector<leaf::RobustnessPoint> points;
  for (const auto& p : report["points"])
    points.push_back({p["val_error"].get<double>(), p["ndcg10"].get<double>(), p["cycle_first"].get<bool>()});
  REQUIRE(points.size() == 4);
  const leaf::RobustnessFit fit = leaf::fit_robustness_margin(points, 0.5, false);
  CHECK(report["fit"]["slope"].get<double>() == fit.slope);
  CHECK(report["fit"]["intercept"].get<double>() == fit.intercept);
  CHECK(report["fit"]["margin"].get<double>() == fit.margin);
  CHECK(report["fit"]["points"] == 4);

  // checkpoint val errors come straight from the files
  const leaf::Checkpoint first = leaf::load_checkpoint(kWork / "run" / "checkpoints" / "epoch-0001.left");
  CHECK(points[0].mean_val_error == first.val_loss);
  CHECK(points[0].cycle_first_epoch);
}

TEST_CASE("exit codes") {
  prepare();
  CHECK(run_leaf("train --cache cache") == 2);
  CHECK(run_leaf("train --cache cache --out bad --schedule step") == 2);
  CHECK(run_leaf("train --cache missing --out bad") == 3);
  CHECK(run_leaf("eval --data data --cache cache --model data/qrels.tsv --out bad") == 3);
  CHECK(run_leaf("train --cache cache --out bad --no-such-flag") == 2);
  CHECK(run_leaf("nonsense") == 2);
  CHECK(run_leaf("train --cache cache --out nan --lr-start 1e30 --lr-end 1e29 --cycles 1 --epochs-per-cycle 1 "
                 "--hidden 16 --heads 2 --layers 1 --context 32 --max-len 32") == 4);
  CHECK(run_leaf("train --help") == 0);
}

TEST_CASE("help lists training defaults") {
  prepare();
  REQUIRE(run_leaf("train --help") == 0);
  const std::string help = slurp(kWork / "last.log");
  const leaf::TrainConfig defaults;
  CHECK(help.find("--batch-size UINT [" + std::to_string(defaults.batch_size) + "]") != std::string::npos);
  CHECK(help.find("--lr-start FLOAT [0.0001]") != std::string::npos);
  CHECK(help.find("--lr-end FLOAT [1e-05]") != std::string::npos);
  CHECK(help.find("--cycles UINT [" + std::to_string(defaults.cycles) + "]") != std::string::npos);
  CHECK(help.find("--epochs-per-cycle UINT [" + std::to_string(defaults.epochs_per_cycle) + "]") != std::string::npos);
  CHECK(help.find("--schedule TEXT [linear]") != std::string::npos);
  CHECK(help.find("--weight-decay FLOAT [0.01]") != std::string::npos);
  CHECK(help.find("--val-batch-size UINT [128]") != std::string::npos);
}

TEST_CASE("config file, flags and seed precedence") {
  prepare();
  {
    std::ofstream cfg(kWork / "gen.json");
    cfg << R"({"count": 20, "clusters": 2, "queries": 4, "train-texts": 10, "seed": 9, "out": "from_config"})";
  }
  REQUIRE(run_leaf("gen-corpus --config gen.json --count 24 --out g1") == 0);
  json m = read_json(kWork / "g1" / "run_manifest.json");
  CHECK(m["config"]["count"] == "24");
  CHECK(m["config"]["clusters"] == "2");
  CHECK(m["seed"] == 9);
  CHECK(data_lines(kWork / "g1" / "docs.jsonl") == 23);  // jsonl has no header line
  CHECK_FALSE(fs::exists(kWork / "from_config"));

  REQUIRE(run_leaf("gen-corpus --config gen.json --out g2", "LEAF_SEED=77") == 0);
  CHECK(read_json(kWork / "g2" / "run_manifest.json")["seed"] == 77);
  REQUIRE(run_leaf("gen-corpus --config gen.json --out g3 --seed 4", "LEAF_SEED=77") == 0);
  CHECK(read_json(kWork / "g3" / "run_manifest.json")["seed"] == 4);

  std::ofstream(kWork / "bad.json") << R"({"no-such-key": 1})";
  CHECK(run_leaf("gen-corpus --config bad.json --out g4") == 2);
}

TEST_CASE("rerunning a manifest reproduces outputs") {
  prepare();
  REQUIRE(run_leaf("sweep --data data --cache cache --model run/student.lefc --out rep --dims 16,8") == 0);
  fs::rename(kWork / "rep", kWork / "rep_first");
  REQUIRE(run_leaf("sweep --config rep_first/run_manifest.json") == 0);
  CHECK(slurp(kWork / "rep" / "sweep.csv") == slurp(kWork / "rep_first" / "sweep.csv"));
  CHECK(slurp(kWork / "rep" / "report.json") == slurp(kWork / "rep_first" / "report.json"));

  REQUIRE(run_leaf("gen-corpus --out idem --count 30 --clusters 3 --seed 8") == 0);
  fs::rename(kWork / "idem", kWork / "idem_first");
  REQUIRE(run_leaf("gen-corpus --config idem_first/run_manifest.json") == 0);
  for (const char* file : {"docs.jsonl", "queries.jsonl", "qrels.tsv", "train.jsonl"})
    CHECK(slurp(kWork / "idem" / file) == slurp(kWork / "idem_first" / file));

  REQUIRE(run_leaf("train --config run/run_manifest.json --out run_again") == 0);
  CHECK(slurp(kWork / "run_again" / "student.lefc") == slurp(kWork / "run" / "student.lefc"));
  CHECK(slurp(kWork / "run_again" / "history.csv") == slurp(kWork / "run" / "history.csv"));
}

TEST_CASE("resume from a checkpoint matches the straight run") {
  prepare();
  REQUIRE(run_leaf("train --config run/run_manifest.json --out half --stop-after-epoch 2") == 0);
  REQUIRE(run_leaf("train --config run/run_manifest.json --out rest --resume half/checkpoints/epoch-0002.left") == 0);
  CHECK(slurp(kWork / "rest" / "student.lefc") == slurp(kWork / "run" / "student.lefc"));
}

TEST_CASE("bench and ablations write tables") {
  prepare();
  REQUIRE(run_leaf("bench --data data --cache cache --model run/student.lefc --out bn --repeats 2 --sizes 1,2,4") == 0);
  CHECK(data_lines(kWork / "bn" / "bench.csv") == 2);
  const std::string common = "--cache cache --hidden 16 --heads 2 --layers 1 --context 32 --max-len 32 ";
  REQUIRE(run_leaf("ablate batch " + common + "--out ab --sizes 16,4 --budget 32") == 0);
  CHECK(data_lines(kWork / "ab" / "ablation_batch.csv") == 2);
  REQUIRE(run_leaf("ablate lr " + common + "--out al --budgets 1,2 --epochs-per-cycle 2") == 0);
  CHECK(data_lines(kWork / "al" / "ablation_lr.csv") == 4);
  REQUIRE(run_leaf("ablate pooling " + common + "--out ap --pooling-epochs 1") == 0);
  CHECK(data_lines(kWork / "ap" / "ablation_pooling.csv") == 2);
  CHECK(run_leaf("ablate batch " + common + "--out ab2 --sizes 3 --budget 32") == 2);
  CHECK(run_leaf("ablate widths " + common + "--out ab3") == 2);
}
