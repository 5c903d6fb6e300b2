#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "leaf/encoder.hpp"
#include "leaf/records.hpp"
#include "leaf/teacher.hpp"

namespace leaf {

// query id -> doc id -> graded relevance
using Qrels = std::map<std::string, std::map<std::string, int>>;

/// Documents, queries and relevance judgments. Judgments are for
/// evaluation only.
struct JudgedDataset {
  std::vector<TextRecord> docs;
  std::vector<TextRecord> queries;
  Qrels qrels;

  void validate() const;

  // docs.jsonl, queries.jsonl and qrels.tsv inside `dir`.
  void save(const std::filesystem::path& dir) const;
  static JudgedDataset load(const std::filesystem::path& dir);
};

Qrels read_qrels(const std::filesystem::path& path);
void write_qrels(const std::filesystem::path& path, const Qrels& qrels);

// A text -> row-vector map for either side of retrieval.
using TextEmbedder = std::function<Tensor2(std::span<const std::string>)>;

TextEmbedder embedder_of(const EncoderState& state, const Vocab& vocab, std::string instruction = {});
TextEmbedder embedder_of(const TeacherOracle& oracle, std::string instruction = {});

enum class QuantKind : std::uint8_t { Float32, Int8, Binary };

std::string_view to_string(QuantKind kind);
QuantKind parse_quant_kind(std::string_view name);

struct QuantScheme {
  QuantKind kind = QuantKind::Float32;
  RowVector<float> scales;       // INT8 only, one per dimension
  std::vector<bool> dead;        // INT8 dimensions with zero range (scale forced to 1)
};

// INT8 scales are max_i |x_ij| / 127 over the calibration rows.
QuantScheme calibrate(QuantKind kind, const Tensor2& vectors);

struct Quantized {
  QuantScheme scheme;
  Eigen::Index rows = 0;
  Eigen::Index dim = 0;
  Tensor2 floats;                                                              // FLOAT32
  Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> codes;  // INT8
  std::vector<std::uint64_t> bits;                                             // BINARY, row-major words
  Eigen::Index words_per_row = 0;

  bool bit(Eigen::Index row, Eigen::Index col) const {
    return (bits[static_cast<std::size_t>(row * words_per_row + col / 64)] >> (col % 64)) & 1u;
  }
};

Quantized quantize(const Tensor2& vectors, const QuantScheme& scheme);
Tensor2 dequantize(const Quantized& q);

// Query x doc score matrices. Both sides must use the same scheme; INT8 is
// an integer dot weighted by the per-dimension scale products, BINARY is
// dim - 2 * hamming.
Eigen::MatrixXd score(const Quantized& queries, const Quantized& docs);
// Float queries against a quantized doc payload.
Eigen::MatrixXd score_float_query(const Tensor2& queries, const Quantized& docs);

// First k components, re-normalized to unit length when `renormalize`.
Tensor2 mrl_truncate(const Tensor2& vectors, std::uint32_t k, bool renormalize = true);

struct IndexOptions {
  std::optional<std::uint32_t> dim;   // MRL truncation
  QuantKind scheme = QuantKind::Float32;
  bool renormalize = true;
};

struct Index {
  std::vector<std::string> ids;
  Quantized payload;
  IndexOptions options;

  std::size_t size() const { return ids.size(); }
  Eigen::Index dim() const { return payload.dim; }
};

Index build_index(std::vector<std::string> ids, const Tensor2& vectors, const IndexOptions& options = {});
Index build_index(std::span<const TextRecord> docs, const TextEmbedder& embed, const IndexOptions& options = {});

struct Hit {
  std::string doc_id;
  double score = 0.0;
};

struct RetrievalRun {
  std::vector<std::string> query_ids;
  std::vector<std::vector<Hit>> hits;  // per query, best first
};

// Exact top-k; query vectors are truncated and quantized like the index
// unless `float_query` keeps them in float32. Ties go to the smaller doc id.
RetrievalRun search(const Index& index, std::span<const std::string> query_ids, const Tensor2& queries,
                    std::size_t k = 10, bool float_query = false);

struct NdcgResult {
  std::map<std::string, double> per_query;
  double mean = 0.0;
};

// Gain 2^rel - 1, discount 1 / log2(rank + 1); the ideal ordering uses every
// judged doc. Queries without a relevant doc are left out.
NdcgResult ndcg_at_10(const RetrievalRun& run, const Qrels& qrels);

enum class EvalMode : std::uint8_t { Standard, Asymmetric };

std::string_view to_string(EvalMode mode);
EvalMode parse_eval_mode(std::string_view name);

struct EvalOptions {
  IndexOptions index;
  bool float_query = false;
  std::size_t depth = 10;
};

// Precomputed full-dimension embeddings for one (query side, doc side) pair.
struct EmbeddedDataset {
  std::vector<std::string> doc_ids, query_ids;
  Tensor2 docs, queries;
};

EmbeddedDataset embed_dataset(const JudgedDataset& data, const TextEmbedder& query_side, const TextEmbedder& doc_side);

NdcgResult evaluate(const EmbeddedDataset& embedded, const Qrels& qrels, const EvalOptions& options = {});
NdcgResult evaluate(const JudgedDataset& data, const TextEmbedder& query_side, const TextEmbedder& doc_side,
                    const EvalOptions& options = {});

struct SweepRow {
  EvalMode mode = EvalMode::Standard;
  std::uint32_t dim = 0;
  QuantKind scheme = QuantKind::Float32;
  double ndcg10 = 0.0;
};

// Standard mode embeds both sides with the student; asymmetric mode embeds
// documents with the teacher and queries with the student.
std::vector<SweepRow> sweep(const JudgedDataset& data, const TextEmbedder& student, const TextEmbedder& teacher,
                            std::span<const std::uint32_t> dims, std::span<const QuantKind> schemes,
                            std::span<const EvalMode> modes, bool renormalize = true, bool float_query = false);

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);

struct BenchResult {
  std::vector<std::size_t> batch_sizes;
  std::vector<std::vector<double>> seconds;  // per batch size, one entry per repeat
  double items_per_second_mean = 0.0;
  double items_per_second_sd = 0.0;
  double min_latency_mean = 0.0;             // seconds, smallest batch size
  double min_latency_sd = 0.0;
  std::optional<std::size_t> max_batch;      // largest batch with mean time <= threshold
};

inline constexpr double kLatencyThreshold = 0.1;

BenchResult throughput_bench(const TextEmbedder& embed, std::span<const std::string> texts,
                             std::span<const std::size_t> batch_sizes = {}, std::size_t repeats = 7,
                             std::uint64_t seed = 0);

inline constexpr std::size_t kBenchBatchSizes[] = {1, 2, 4, 8, 16, 24};

struct BenchRow {
  std::string model;
  BenchResult docs;
  BenchResult queries;
};

// One line per model; speedups are relative to the first row.
void write_bench_csv(const std::filesystem::path& path, std::span<const BenchRow> rows);

}  // namespace leaf
