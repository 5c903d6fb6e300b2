#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "leaf/error.hpp"
#include "leaf/evalhub.hpp"
#include "leaf/synthetic.hpp"
#include "leaf/trainer.hpp"

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;
using namespace leaf;

constexpr const char* kToolVersion = "0.1.0";
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Usage:
    case ErrorKind::Compatibility:
    case ErrorKind::Mapping: return kExitConfig;
    case ErrorKind::Numeric: return kExitNumeric;
    default: return kExitData;
  }
}

std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  for (const char c : text + ",") {
    if (c == ',') {
      if (!item.empty()) out.push_back(item);
      item.clear();
    } else if (c != ' ') {
      item.push_back(c);
    }
  }
  return out;
}

template <class T>
std::vector<T> parse_numbers(const std::string& text, const char* what) {
  std::vector<T> out;
  for (const std::string& s : split_list(text)) {
    T v{};
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
      throw Error(ErrorKind::Config, std::string("bad ") + what + " entry '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw Error(ErrorKind::Config, std::string(what) + " list is empty");
  return out;
}

Pooling parse_pooling(const std::string& name) {
  if (name == "mean") return Pooling::Mean;
  if (name == "cls") return Pooling::Cls;
  throw Error(ErrorKind::Config, "unknown pooling '" + name + "'");
}

void require_path(const std::string& value, const char* flag) {
  if (value.empty()) throw Error(ErrorKind::Config, std::string("missing required --") + flag);
}

void require_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::Io, "not a directory: " + dir.string());
}

void write_json(const fs::path& path, const json& doc) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

// Values from the config file fill every option the command line left unset.
// The file is either a flat object of flag names or a run manifest.
void apply_config_file(CLI::App& app, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, "config " + path.string() + ": " + e.what());
  }
  if (doc.contains("config") && doc["config"].is_object()) doc = doc["config"];
  if (!doc.is_object()) throw Error(ErrorKind::Config, "config must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    CLI::Option* opt = nullptr;
    if (key != "config" && key != "help") {
      opt = app.get_option_no_throw("--" + key);
      if (opt == nullptr) opt = app.get_option_no_throw(key);
    }
    if (opt == nullptr) throw Error(ErrorKind::Config, "unknown config key '" + key + "'");
    if (opt->count() > 0) continue;
    std::string text;
    if (value.is_string()) text = value.get<std::string>();
    else if (value.is_boolean()) text = value.get<bool>() ? "true" : "false";
    else if (value.is_number()) text = value.dump();
    else throw Error(ErrorKind::Config, "config key '" + key + "' must be a string, number or boolean");
    opt->add_result(text);
    try {
      opt->run_callback();
    } catch (const CLI::ParseError& e) {
      throw Error(ErrorKind::Config, "config key '" + key + "': " + e.what());
    }
  }
}

json config_snapshot(const CLI::App& app) {
  json snap = json::object();
  for (const CLI::Option* opt : app.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config") continue;
    const auto& results = opt->results();
    snap[name] = results.empty() ? opt->get_default_str() : results.back();
  }
  return snap;
}

struct RunRecord {
  json inputs = json::object();
  std::vector<std::string> outputs;
  json timing = json::object();
};

struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  std::uint64_t* seed = nullptr;
  std::string* out = nullptr;
  std::function<RunRecord()> run;
};

void write_manifest(const Command& cmd, const RunRecord& record, double wall_seconds) {
  json m;
  m["command"] = cmd.app->get_name();
  m["tool_version"] = kToolVersion;
  m["seed"] = *cmd.seed;
  m["config"] = config_snapshot(*cmd.app);
  m["inputs"] = record.inputs;
  m["outputs"] = record.outputs;
  m["wall_seconds"] = wall_seconds;
  if (!record.timing.empty()) m["timing"] = record.timing;
  write_json(fs::path(*cmd.out) / "run_manifest.json", m);
}

// Layout of a cache directory.
struct CachePaths {
  fs::path dir;
  fs::path vocab() const { return dir / "vocab.txt"; }
  fs::path teacher() const { return dir / "teacher.lefc"; }
  fs::path manifest() const { return dir / "cache.jsonl"; }
  fs::path vectors() const { return dir / "cache.bin"; }
};

struct LoadedCache {
  Vocab vocab;
  std::unique_ptr<SyntheticTeacher> teacher;
  EmbeddingCache cache;
};

LoadedCache load_cache_dir(const fs::path& dir, bool with_vectors) {
  require_dir(dir);
  const CachePaths p{dir};
  LoadedCache c;
  c.vocab = Vocab::load(p.vocab());
  c.teacher = std::make_unique<SyntheticTeacher>(load_encoder(p.teacher()), c.vocab);
  if (with_vectors) c.cache = EmbeddingCache::load(p.manifest(), p.vectors());
  return c;
}

// A trained encoder file or a training checkpoint.
EncoderState load_model(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read model " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (std::string(magic, 4) == "LEFT") return load_checkpoint(path).state.student;
  return load_encoder(path);
}

struct StudentFlags {
  EncoderConfig config = EncoderConfig::student_default(0, 64, 0);
  std::string pooling = "mean";

  void add(CLI::App& app) {
    app.add_option("--layers", config.num_layers, "Student transformer layers");
    app.add_option("--heads", config.num_heads, "Student attention heads");
    app.add_option("--hidden", config.hidden_dim, "Student hidden width");
    app.add_option("--ffn-multiplier", config.ffn_multiplier, "Feed-forward width multiplier");
    app.add_option("--context", config.max_context, "Student positional table length");
    app.add_option("--pooling", pooling, "Pooling: mean or cls");
  }

  EncoderConfig resolve(const Vocab& vocab, std::uint32_t output_dim, std::uint64_t seed) const {
    EncoderConfig c = config;
    c.vocab_size = static_cast<std::uint32_t>(vocab.size());
    c.output_dim = output_dim;
    c.pooling = parse_pooling(pooling);
    c.seed = seed;
    c.validate();
    return c;
  }
};

struct TrainFlags {
  TrainConfig config;
  std::string schedule = std::string(to_string(TrainConfig{}.schedule));
  std::string loss = std::string(to_string(TrainConfig{}.loss.kind));

  void add(CLI::App& app) {
    app.add_option("--batch-size", config.batch_size, "Training batch size");
    app.add_option("--lr-start", config.lr_start, "Learning rate at the start of each cycle");
    app.add_option("--lr-end", config.lr_end, "Learning rate at the end of each cycle");
    app.add_option("--cycles", config.cycles, "Number of learning rate cycles");
    app.add_option("--epochs-per-cycle", config.epochs_per_cycle, "Epochs per cycle");
    app.add_option("--schedule", schedule, "constant, linear or cosine");
    app.add_option("--beta1", config.adamw.beta1, "AdamW first moment decay");
    app.add_option("--beta2", config.adamw.beta2, "AdamW second moment decay");
    app.add_option("--weight-decay", config.adamw.weight_decay, "AdamW decoupled weight decay");
    app.add_option("--adam-eps", config.adamw.eps, "AdamW epsilon");
    app.add_option("--loss", loss, "leaf, leaf+minilm, leaf+tinybert or leaf+distilbert");
    app.add_option("--aux-weight", config.loss.aux_weight, "Weight of the auxiliary loss term");
    app.add_option("--checkpoint-every", config.checkpoint_every, "Checkpoint interval in epochs");
    app.add_option("--val-batch-size", config.val_batch_size, "Validation batch size");
    app.add_option("--max-len", config.max_len, "Token limit per text including framing");
  }

  TrainConfig resolve(std::uint64_t seed) const {
    TrainConfig c = config;
    c.schedule = parse_schedule(schedule);
    c.loss.kind = parse_loss_kind(loss);
    c.seed = seed;
    c.validate();
    return c;
  }
};

CLI::Option* add_seed(CLI::App& app, std::uint64_t& seed) {
  return app.add_option("--seed", seed, "Random seed")->envname("LEAF_SEED");
}

CLI::Option* add_bool(CLI::App& app, const std::string& name, bool& value, const std::string& help) {
  return app.add_option(name, value, help + " (true or false)");
}

Command make_gen_corpus(CLI::App& root) {
  auto* app = root.add_subcommand("gen-corpus", "Write a synthetic judged corpus and training texts");
  auto cfg = std::make_shared<CorpusConfig>();
  auto out = std::make_shared<std::string>();
  Command cmd;
  cmd.app = app;
  app->add_option("--out", *out, "Output directory");
  app->add_option("--count", cfg->docs, "Number of documents");
  app->add_option("--clusters", cfg->clusters, "Number of topic clusters");
  app->add_option("--subtopics", cfg->subtopics, "Subtopics per cluster");
  app->add_option("--queries", cfg->queries, "Number of judged queries");
  app->add_option("--train-texts", cfg->train_texts, "Number of training texts");
  app->add_option("--train-query-fraction", cfg->train_query_fraction, "Share of query-like training texts");
  app->add_option("--doc-words", cfg->doc_words, "Mean document length in words");
  app->add_option("--query-words", cfg->query_words, "Mean query length in words");
  app->add_option("--background-words", cfg->background_words, "Shared background lexicon size");
  app->add_option("--cluster-words", cfg->cluster_words, "Topic words per cluster");
  app->add_option("--subtopic-words", cfg->subtopic_words, "Topic words per subtopic");
  cmd.seed = &cfg->seed;
  add_seed(*app, cfg->seed);
  cmd.out = out.get();
  cmd.run = [cfg, out] {
    require_path(*out, "out");
    cfg->validate();
    const SyntheticCorpus corpus = generate_corpus(*cfg);
    corpus.save(*out);
    RunRecord r;
    r.outputs = {"docs.jsonl", "queries.jsonl", "qrels.tsv", "train.jsonl"};
    return r;
  };
  return cmd;
}

Command make_cache(CLI::App& root) {
  auto* app = root.add_subcommand("cache", "Embed training texts with the teacher and write the target cache");
  struct Flags {
    std::string texts, out, prior, instruction;
    std::size_t vocab_size = 512;
    EncoderConfig teacher = EncoderConfig::teacher_default(0, 0);
    float token_scale = kTeacherTokenScale;
    std::size_t val_holdout = 64;
    std::uint64_t seed = 0;
  };
  auto f = std::make_shared<Flags>();
  Command cmd;
  cmd.app = app;
  app->add_option("--texts", f->texts, "Training texts (JSON lines with id and text)");
  app->add_option("--out", f->out, "Output cache directory");
  app->add_option("--prior", f->prior, "Existing cache directory to extend");
  app->add_option("--instruction", f->instruction, "Instruction prepended to every text");
  app->add_option("--vocab-size", f->vocab_size, "Target wordpiece vocabulary size");
  app->add_option("--teacher-layers", f->teacher.num_layers, "Teacher layers");
  app->add_option("--teacher-heads", f->teacher.num_heads, "Teacher attention heads");
  app->add_option("--teacher-hidden", f->teacher.hidden_dim, "Teacher hidden width");
  app->add_option("--teacher-output", f->teacher.output_dim, "Teacher embedding size");
  app->add_option("--teacher-context", f->teacher.max_context, "Teacher positional table length");
  app->add_option("--token-scale", f->token_scale, "Teacher token embedding scale");
  app->add_option("--val-holdout", f->val_holdout, "New texts held out for validation");
  add_seed(*app, f->seed);
  cmd.seed = &f->seed;
  cmd.out = &f->out;
  cmd.run = [f] {
    require_path(f->texts, "texts");
    require_path(f->out, "out");
    const std::vector<TextRecord> texts = read_text_records(f->texts);
    const CachePaths p{f->out};
    RunRecord r;
    r.inputs["texts"] = f->texts;
    if (!f->prior.empty()) {
      LoadedCache prior = load_cache_dir(f->prior, true);
      const EmbeddingCache cache = build_cache(*prior.teacher, texts, f->instruction, f->val_holdout, f->seed,
                                               &prior.cache);
      fs::create_directories(f->out);
      prior.vocab.save(p.vocab());
      save_encoder(p.teacher(), prior.teacher->state());
      cache.save(p.manifest(), p.vectors());
      r.inputs["prior"] = f->prior;
    } else {
      const Vocab vocab = build_vocab(texts_of(texts), f->vocab_size);
      EncoderConfig tc = f->teacher;
      tc.vocab_size = static_cast<std::uint32_t>(vocab.size());
      tc.seed = f->seed;
      const SyntheticTeacher teacher = synthetic_teacher(tc, f->seed, vocab, f->token_scale);
      const EmbeddingCache cache = build_cache(teacher, texts, f->instruction, f->val_holdout, f->seed);
      fs::create_directories(f->out);
      vocab.save(p.vocab());
      save_encoder(p.teacher(), teacher.state());
      cache.save(p.manifest(), p.vectors());
    }
    r.outputs = {"vocab.txt", "teacher.lefc", "cache.jsonl", "cache.bin"};
    return r;
  };
  return cmd;
}

json checkpoint_json(const Checkpoint& cp, const TrainConfig& config) {
  return json{{"epoch", cp.epoch}, {"cycle", cp.cycle}, {"val_loss", cp.val_loss},
              {"cycle_first", cp.cycle_first(config)}};
}

Command make_train(CLI::App& root) {
  auto* app = root.add_subcommand("train", "Distill a student from a target cache");
  struct Flags {
    std::string cache, out, resume;
    TrainFlags train;
    StudentFlags student;
    std::uint64_t seed = TrainConfig{}.seed;
    std::uint32_t stop_after_epoch = 0;
    std::size_t train_limit = 0;
  };
  auto f = std::make_shared<Flags>();
  Command cmd;
  cmd.app = app;
  app->add_option("--cache", f->cache, "Cache directory");
  app->add_option("--out", f->out, "Output directory");
  app->add_option("--resume", f->resume, "Checkpoint to continue from");
  app->add_option("--stop-after-epoch", f->stop_after_epoch, "Stop once this many epochs are done (0 runs all)");
  app->add_option("--train-limit", f->train_limit, "Use only the first N training texts (0 uses all)");
  f->train.add(*app);
  f->student.add(*app);
  add_seed(*app, f->seed);
  cmd.seed = &f->seed;
  cmd.out = &f->out;
  cmd.run = [f] {
    require_path(f->cache, "cache");
    require_path(f->out, "out");
    const TrainConfig config = f->train.resolve(f->seed);
    LoadedCache c = load_cache_dir(f->cache, true);
    const std::uint32_t teacher_hidden = c.teacher->state().config.hidden_dim;

    TrainState state;
    if (!f->resume.empty()) {
      state = load_checkpoint(f->resume).state;
    } else {
      state = initial_state(init_encoder(f->student.resolve(c.vocab, c.cache.dim(), f->seed)), config,
                            teacher_hidden);
    }

    const fs::path out(f->out);
    fs::create_directories(out / "checkpoints");
    RunRecord r;
    r.inputs["cache"] = f->cache;
    if (!f->resume.empty()) r.inputs["resume"] = f->resume;

    json checkpoints = json::array();
    TrainOptions options;
    if (config.loss.needs_traces()) options.teacher = c.teacher.get();
    if (f->stop_after_epoch > 0) options.stop_after_epoch = f->stop_after_epoch;
    if (f->train_limit > 0) options.train_limit = f->train_limit;
    options.keep_checkpoints = false;
    options.on_checkpoint = [&](const Checkpoint& cp) {
      char name[48];
      std::snprintf(name, sizeof name, "checkpoints/epoch-%04u.left", cp.epoch);
      save_checkpoint(out / name, cp);
      r.outputs.push_back(name);
      checkpoints.push_back(checkpoint_json(cp, config));
    };
    const TrainResult result = train(std::move(state), c.cache, c.vocab, config, options);

    save_encoder(out / "student.lefc", result.state.student);
    write_history_csv(out / "history.csv", result.history);
    json report;
    report["epochs_completed"] = result.state.epoch;
    report["steps"] = result.state.step;
    report["batches_per_epoch"] = result.batches_per_epoch;
    report["initial_val_loss"] = result.initial_val_loss ? json(*result.initial_val_loss) : json(nullptr);
    report["final_val_loss"] = result.final_val_loss;
    report["checkpoints"] = checkpoints;
    write_json(out / "report.json", report);
    r.outputs.insert(r.outputs.end(), {"student.lefc", "history.csv", "report.json"});
    r.timing["train_seconds"] = result.train_seconds;
    return r;
  };
  return cmd;
}

struct EvalFlags {
  std::string data, cache, model;
  std::string instruction;
  bool renormalize = true;
  bool float_query = false;

  void add(CLI::App& app) {
    app.add_option("--data", data, "Judged dataset directory");
    app.add_option("--cache", cache, "Cache directory holding the vocabulary and teacher");
    app.add_option("--model", model, "Student encoder or checkpoint");
    app.add_option("--instruction", instruction, "Instruction prepended to queries and documents");
    add_bool(app, "--renormalize", renormalize, "Re-normalize truncated vectors");
    add_bool(app, "--float-query", float_query, "Keep queries in float32 against quantized documents");
  }

  void check() const {
    require_path(data, "data");
    require_path(cache, "cache");
    require_path(model, "model");
  }

  json inputs() const { return json{{"data", data}, {"cache", cache}, {"model", model}}; }
};

Command make_eval(CLI::App& root) {
  auto* app = root.add_subcommand("eval", "Score retrieval nDCG@10 for one configuration");
  struct Flags {
    EvalFlags eval;
    std::string out, mode = "standard", scheme = "float32";
    std::uint32_t dim = 0;
    std::uint64_t seed = 0;
  };
  auto f = std::make_shared<Flags>();
  Command cmd;
  cmd.app = app;
  f->eval.add(*app);
  app->add_option("--out", f->out, "Output directory");
  app->add_option("--mode", f->mode, "standard or asym (teacher documents)");
  app->add_option("--scheme", f->scheme, "float32, int8 or binary");
  app->add_option("--dim", f->dim, "Truncation size (0 keeps every dimension)");
  add_seed(*app, f->seed);
  cmd.seed = &f->seed;
  cmd.out = &f->out;
  cmd.run = [f] {
    f->eval.check();
    require_path(f->out, "out");
    const EvalMode mode = parse_eval_mode(f->mode);
    EvalOptions options;
    options.index.scheme = parse_quant_kind(f->scheme);
    if (f->dim > 0) options.index.dim = f->dim;
    options.index.renormalize = f->eval.renormalize;
    options.float_query = f->eval.float_query;

    const JudgedDataset data = JudgedDataset::load(f->eval.data);
    const LoadedCache c = load_cache_dir(f->eval.cache, false);
    const EncoderState student = load_model(f->eval.model);
    const TextEmbedder s = embedder_of(student, c.vocab, f->eval.instruction);
    const TextEmbedder t = embedder_of(*c.teacher, f->eval.instruction);
    const NdcgResult result = evaluate(data, s, mode == EvalMode::Standard ? s : t, options);

    fs::create_directories(f->out);
    std::ofstream csv(fs::path(f->out) / "per_query.csv");
    csv << "query_id,ndcg10\n";
    json per_query = json::object();
    for (const auto& [id, v] : result.per_query) {
      csv << id << ',' << shortest(v) << '\n';
      per_query[id] = v;
    }
    write_json(fs::path(f->out) / "report.json",
               json{{"mode", f->mode}, {"scheme", f->scheme}, {"dim", f->dim}, {"ndcg10", result.mean},
                    {"queries", result.per_query.size()}, {"per_query", per_query}});
    RunRecord r;
    r.inputs = f->eval.inputs();
    r.outputs = {"per_query.csv", "report.json"};
    return r;
  };
  return cmd;
}

Command make_sweep(CLI::App& root) {
  auto* app = root.add_subcommand("sweep", "nDCG@10 over modes, truncation sizes and quantization schemes");
  struct Flags {
    EvalFlags eval;
    std::string out, dims = "64,32,16,8", schemes = "float32,int8,binary", modes = "standard,asym";
    std::uint64_t seed = 0;
  };
  auto f = std::make_shared<Flags>();
  Command cmd;
  cmd.app = app;
  f->eval.add(*app);
  app->add_option("--out", f->out, "Output directory");
  app->add_option("--dims", f->dims, "Comma-separated truncation sizes");
  app->add_option("--schemes", f->schemes, "Comma-separated schemes");
  app->add_option("--modes", f->modes, "Comma-separated modes");
  add_seed(*app, f->seed);
  cmd.seed = &f->seed;
  cmd.out = &f->out;
  cmd.run = [f] {
    f->eval.check();
    require_path(f->out, "out");
    const auto dims = parse_numbers<std::uint32_t>(f->dims, "dims");
    std::vector<QuantKind> schemes;
    for (const auto& s : split_list(f->schemes)) schemes.push_back(parse_quant_kind(s));
    std::vector<EvalMode> modes;
    for (const auto& m : split_list(f->modes)) modes.push_back(parse_eval_mode(m));
    if (schemes.empty() || modes.empty()) throw Error(ErrorKind::Config, "schemes and modes must not be empty");

    const JudgedDataset data = JudgedDataset::load(f->eval.data);
    const LoadedCache c = load_cache_dir(f->eval.cache, false);
    const EncoderState student = load_model(f->eval.model);
    const std::vector<SweepRow> rows =
        sweep(data, embedder_of(student, c.vocab, f->eval.instruction), embedder_of(*c.teacher, f->eval.instruction),
              dims, schemes, modes, f->eval.renormalize, f->eval.float_query);

    fs::create_directories(f->out);
    write_sweep_csv(fs::path(f->out) / "sweep.csv", rows);
    json table = json::array();
    for (const SweepRow& row : rows)
      table.push_back(json{{"mode", to_string(row.mode)}, {"dim", row.dim}, {"scheme", to_string(row.scheme)},
                           {"ndcg10", row.ndcg10}});
    write_json(fs::path(f->out) / "report.json", json{{"rows", table}});
    RunRecord r;
    r.inputs = f->eval.inputs();
    r.outputs = {"sweep.csv", "report.json"};
    return r;
  };
  return cmd;
}

Command make_robustness(CLI::App& root) {
  auto* app = root.add_subcommand("robustness", "Fit downstream score against validation error over checkpoints");
  struct Flags {
    std::string data, cache, checkpoints, out, mode = "standard", instruction;
    std::uint32_t epochs_per_cycle = TrainConfig{}.epochs_per_cycle;
    bool exclude_cycle_first = true;
    std::string teacher_score;
    std::uint64_t seed = 0;
  };
  auto f = std::make_shared<Flags>();
  Command cmd;
  cmd.app = app;
  app->add_option("--data", f->data, "Judged dataset directory");
  app->add_option("--cache", f->cache, "Cache directory holding the vocabulary and teacher");
  app->add_option("--checkpoints", f->checkpoints, "Directory of training checkpoints");
  app->add_option("--out", f->out, "Output directory");
  app->add_option("--mode", f->mode, "standard or asym");
  app->add_option("--instruction", f->instruction, "Instruction prepended to queries and documents");
  app->add_option("--epochs-per-cycle", f->epochs_per_cycle, "Epochs per cycle of the training run");
  add_bool(*app, "--exclude-cycle-first", f->exclude_cycle_first, "Leave the first epoch of every cycle out of the fit");
  app->add_option("--teacher-score", f->teacher_score, "Teacher nDCG@10 (computed when empty)");
  add_seed(*app, f->seed);
  cmd.seed = &f->seed;
  cmd.out = &f->out;
  cmd.run = [f] {
    require_path(f->data, "data");
    require_path(f->cache, "cache");
    require_path(f->checkpoints, "checkpoints");
    require_path(f->out, "out");
    if (f->epochs_per_cycle == 0) throw Error(ErrorKind::Config, "epochs-per-cycle must be positive");
    const EvalMode mode = parse_eval_mode(f->mode);
    require_dir(f->checkpoints);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(f->checkpoints))
      if (entry.path().extension() == ".left") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error(ErrorKind::Io, "no checkpoints in " + f->checkpoints);

    const JudgedDataset data = JudgedDataset::load(f->data);
    const LoadedCache c = load_cache_dir(f->cache, false);
    const TextEmbedder t = embedder_of(*c.teacher, f->instruction);
    double teacher_score = 0.0;
    if (f->teacher_score.empty()) {
      teacher_score = evaluate(data, t, t).mean;
    } else {
      teacher_score = parse_numbers<double>(f->teacher_score, "teacher-score").front();
    }

    TrainConfig schedule;
    schedule.epochs_per_cycle = f->epochs_per_cycle;
    std::vector<RobustnessPoint> points;
    std::vector<double> errors, scores;
    json rows = json::array();
    fs::create_directories(f->out);
    std::ofstream csv(fs::path(f->out) / "robustness.csv");
    csv << "epoch,cycle_first,val_error,ndcg10\n";
    for (const fs::path& file : files) {
      const Checkpoint cp = load_checkpoint(file);
      const TextEmbedder s = embedder_of(cp.state.student, c.vocab, f->instruction);
      const double score = evaluate(data, s, mode == EvalMode::Standard ? s : t).mean;
      const bool first = cp.cycle_first(schedule);
      points.push_back({cp.val_loss, score, first});
      errors.push_back(cp.val_loss);
      scores.push_back(score);
      csv << cp.epoch << ',' << (first ? 1 : 0) << ',' << shortest(cp.val_loss) << ',' << shortest(score) << '\n';
      rows.push_back(json{{"epoch", cp.epoch}, {"cycle_first", first}, {"val_error", cp.val_loss}, {"ndcg10", score}});
    }
    csv.close();
    const RobustnessFit fit = fit_robustness_margin(points, teacher_score, f->exclude_cycle_first);
    json report;
    report["teacher_score"] = teacher_score;
    report["spearman"] = errors.size() >= 2 ? json(spearman(errors, scores)) : json(nullptr);
    report["fit"] = json{{"slope", fit.slope}, {"intercept", fit.intercept}, {"margin", fit.margin},
                         {"points", fit.points}};
    report["exclude_cycle_first"] = f->exclude_cycle_first;
    report["points"] = rows;
    write_json(fs::path(f->out) / "report.json", report);
    RunRecord r;
    r.inputs = json{{"data", f->data}, {"cache", f->cache}, {"checkpoints", f->checkpoints}};
    r.outputs = {"robustness.csv", "report.json"};
    return r;
  };
  return cmd;
}

json bench_json(const BenchResult& b) {
  return json{{"items_per_second_mean", b.items_per_second_mean},
              {"items_per_second_sd", b.items_per_second_sd},
              {"min_latency_mean", b.min_latency_mean},
              {"min_latency_sd", b.min_latency_sd},
              {"max_batch", b.max_batch ? json(*b.max_batch) : json("-")},
              {"batch_sizes", b.batch_sizes},
              {"seconds", b.seconds}};
}

Command make_bench(CLI::App& root) {
  auto* app = root.add_subcommand("bench", "Measure teacher and student embedding throughput");
  struct Flags {
    std::string data, cache, model, out, sizes = "1,2,4,8,16,24";
    std::size_t repeats = 7;
    std::uint64_t seed = 0;
  };
  auto f = std::make_shared<Flags>();
  Command cmd;
  cmd.app = app;
  app->add_option("--data", f->data, "Judged dataset directory supplying documents and queries");
  app->add_option("--cache", f->cache, "Cache directory holding the vocabulary and teacher");
  app->add_option("--model", f->model, "Student encoder or checkpoint");
  app->add_option("--out", f->out, "Output directory");
  app->add_option("--sizes", f->sizes, "Comma-separated batch sizes");
  app->add_option("--repeats", f->repeats, "Timed repeats per batch size");
  add_seed(*app, f->seed);
  cmd.seed = &f->seed;
  cmd.out = &f->out;
  cmd.run = [f] {
    require_path(f->data, "data");
    require_path(f->cache, "cache");
    require_path(f->model, "model");
    require_path(f->out, "out");
    const auto sizes = parse_numbers<std::size_t>(f->sizes, "sizes");
    const JudgedDataset data = JudgedDataset::load(f->data);
    const LoadedCache c = load_cache_dir(f->cache, false);
    const EncoderState student = load_model(f->model);
    const std::vector<std::string> docs = texts_of(data.docs), queries = texts_of(data.queries);

    std::vector<BenchRow> rows;
    json report = json::array();
    RunRecord r;
    for (const auto& [name, embed] : {std::pair{std::string("teacher"), embedder_of(*c.teacher)},
                                      std::pair{std::string("student"), embedder_of(student, c.vocab)}}) {
      BenchRow row{name, throughput_bench(embed, docs, sizes, f->repeats, f->seed),
                   throughput_bench(embed, queries, sizes, f->repeats, f->seed)};
      report.push_back(json{{"model", name}, {"docs", bench_json(row.docs)}, {"queries", bench_json(row.queries)}});
      rows.push_back(std::move(row));
    }
    fs::create_directories(f->out);
    write_bench_csv(fs::path(f->out) / "bench.csv", rows);
    write_json(fs::path(f->out) / "report.json", json{{"rows", report}});
    r.inputs = json{{"data", f->data}, {"cache", f->cache}, {"model", f->model}};
    r.outputs = {"bench.csv", "report.json"};
    return r;
  };
  return cmd;
}

Command make_ablate(CLI::App& root) {
  auto* app = root.add_subcommand("ablate", "Pooling, learning rate schedule or batch size ablation");
  struct Flags {
    std::string kind, cache, out;
    TrainFlags train;
    StudentFlags student;
    std::uint64_t seed = TrainConfig{}.seed;
    std::string sizes = "256,64,16";
    std::size_t budget = 256;
    std::string schedules = "constant,linear";
    std::string budgets = "2,7,14";
    std::uint32_t pooling_epochs = 3;
  };
  auto f = std::make_shared<Flags>();
  Command cmd;
  cmd.app = app;
  app->add_option("kind", f->kind, "pooling, lr or batch")->check(CLI::IsMember({"pooling", "lr", "batch"}));
  app->add_option("--cache", f->cache, "Cache directory");
  app->add_option("--out", f->out, "Output directory");
  app->add_option("--sizes", f->sizes, "batch: comma-separated batch sizes");
  app->add_option("--budget", f->budget, "batch: training texts seen per size");
  app->add_option("--schedules", f->schedules, "lr: comma-separated schedules");
  app->add_option("--budgets", f->budgets, "lr: comma-separated batches per epoch");
  app->add_option("--pooling-epochs", f->pooling_epochs, "pooling: epochs per variant");
  f->train.add(*app);
  f->student.add(*app);
  add_seed(*app, f->seed);
  cmd.seed = &f->seed;
  cmd.out = &f->out;
  cmd.run = [f] {
    require_path(f->kind, "kind");
    require_path(f->cache, "cache");
    require_path(f->out, "out");
    const TrainConfig config = f->train.resolve(f->seed);
    const LoadedCache c = load_cache_dir(f->cache, true);
    const EncoderConfig student = f->student.resolve(c.vocab, c.cache.dim(), f->seed);
    fs::create_directories(f->out);
    const fs::path out(f->out);
    json rows = json::array();
    std::ofstream csv;
    RunRecord r;
    if (f->kind == "pooling") {
      const PoolingAblation p = ablation_pooling(student, c.cache, c.vocab, config, f->pooling_epochs);
      csv.open(out / "ablation_pooling.csv");
      csv << "pooling,final_val_loss\nmean," << shortest(p.mean_final_val) << "\ncls," << shortest(p.cls_final_val)
          << '\n';
      rows.push_back(json{{"pooling", "mean"}, {"final_val_loss", p.mean_final_val}});
      rows.push_back(json{{"pooling", "cls"}, {"final_val_loss", p.cls_final_val}});
      r.outputs = {"ablation_pooling.csv"};
    } else if (f->kind == "batch") {
      const auto sizes = parse_numbers<std::size_t>(f->sizes, "sizes");
      const auto result = ablation_batch_size(student, c.cache, c.vocab, config, sizes, f->budget);
      csv.open(out / "ablation_batch.csv");
      csv << "batch_size,batches,val_loss\n";
      for (const BatchSizeRow& row : result) {
        csv << row.batch_size << ',' << row.batches << ',' << shortest(row.val_loss) << '\n';
        rows.push_back(json{{"batch_size", row.batch_size}, {"batches", row.batches}, {"val_loss", row.val_loss}});
        r.timing["seconds_batch_" + std::to_string(row.batch_size)] = row.seconds;
      }
      r.outputs = {"ablation_batch.csv"};
    } else {
      std::vector<Schedule> schedules;
      for (const auto& s : split_list(f->schedules)) schedules.push_back(parse_schedule(s));
      const auto budgets = parse_numbers<std::size_t>(f->budgets, "budgets");
      const auto result = ablation_lr(student, c.cache, c.vocab, config, schedules, budgets);
      csv.open(out / "ablation_lr.csv");
      csv << "schedule,batches_per_epoch,val_loss\n";
      for (const LrRow& row : result) {
        csv << to_string(row.schedule) << ',' << row.batches_per_epoch << ',' << shortest(row.val_loss) << '\n';
        rows.push_back(json{{"schedule", to_string(row.schedule)}, {"batches_per_epoch", row.batches_per_epoch},
                            {"val_loss", row.val_loss}});
      }
      r.outputs = {"ablation_lr.csv"};
    }
    write_json(out / "report.json", json{{"kind", f->kind}, {"rows", rows}});
    r.outputs.push_back("report.json");
    r.inputs["cache"] = f->cache;
    return r;
  };
  return cmd;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Embedding distillation toolkit", "leaf");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::vector<Command> commands = {make_gen_corpus(app), make_cache(app), make_train(app), make_eval(app),
                                   make_sweep(app),      make_bench(app), make_robustness(app), make_ablate(app)};
  for (Command& cmd : commands)
    cmd.app->add_option("--config", cmd.config_path, "JSON config (flags on the command line win)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  for (Command& cmd : commands) {
    if (!cmd.app->parsed()) continue;
    try {
      if (!cmd.config_path.empty()) apply_config_file(*cmd.app, cmd.config_path);
      const auto start = std::chrono::steady_clock::now();
      const RunRecord record = cmd.run();
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      write_manifest(cmd, record, wall);
      return 0;
    } catch (const Error& e) {
      std::cerr << "leaf " << cmd.app->get_name() << ": " << e.what() << '\n';
      return exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
      std::cerr << "leaf " << cmd.app->get_name() << ": " << e.what() << '\n';
      return kExitData;
    }
  }
  return kExitConfig;
}
