#include "leaf/evalhub.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "leaf/rng.hpp"

namespace leaf {
namespace {

std::string fixed(double v, int precision) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

void check_same_scheme(const Quantized& a, const Quantized& b) {
  if (a.scheme.kind != b.scheme.kind) {
    throw Error(ErrorKind::Compatibility, "query scheme " + std::string(to_string(a.scheme.kind)) +
                                              " does not match index scheme " + std::string(to_string(b.scheme.kind)));
  }
  if (a.dim != b.dim) {
    throw Error(ErrorKind::Dimension, "query dim " + std::to_string(a.dim) + " != index dim " + std::to_string(b.dim));
  }
}

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double sd_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (const double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

void JudgedDataset::validate() const {
  std::set<std::string> doc_ids, query_ids;
  for (const auto& d : docs) {
    if (!doc_ids.insert(d.id).second) throw Error(ErrorKind::Format, "duplicate doc id '" + d.id + "'");
  }
  for (const auto& q : queries) {
    if (!query_ids.insert(q.id).second) throw Error(ErrorKind::Format, "duplicate query id '" + q.id + "'");
  }
  for (const auto& [qid, judged] : qrels) {
    if (!query_ids.contains(qid)) throw Error(ErrorKind::Format, "qrel references unknown query '" + qid + "'");
    for (const auto& [did, grade] : judged) {
      if (!doc_ids.contains(did)) throw Error(ErrorKind::Format, "qrel references unknown doc '" + did + "'");
      if (grade < 0) throw Error(ErrorKind::Format, "negative grade for (" + qid + ", " + did + ")");
    }
  }
}

void JudgedDataset::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_text_records(dir / "docs.jsonl", docs);
  write_text_records(dir / "queries.jsonl", queries);
  write_qrels(dir / "qrels.tsv", qrels);
}

JudgedDataset JudgedDataset::load(const std::filesystem::path& dir) {
  JudgedDataset data{read_text_records(dir / "docs.jsonl"), read_text_records(dir / "queries.jsonl"),
                     read_qrels(dir / "qrels.tsv")};
  data.validate();
  return data;
}

Qrels read_qrels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  Qrels qrels;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string qid, did, grade;
    if (!std::getline(fields, qid, '\t') || !std::getline(fields, did, '\t') || !std::getline(fields, grade)) {
      throw Error(ErrorKind::Format, path.string() + ":" + std::to_string(number) + ": expected 3 tab-separated fields");
    }
    int value = 0;
    try {
      std::size_t used = 0;
      value = std::stoi(grade, &used);
      if (used != grade.size()) throw std::invalid_argument(grade);
    } catch (const std::logic_error&) {
      if (number == 1) continue;  // header
      throw Error(ErrorKind::Format, path.string() + ":" + std::to_string(number) + ": bad grade '" + grade + "'");
    }
    qrels[qid][did] = value;
  }
  return qrels;
}

void write_qrels(const std::filesystem::path& path, const Qrels& qrels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "query-id\tdoc-id\tgrade\n";
  for (const auto& [qid, judged] : qrels) {
    for (const auto& [did, grade] : judged) out << qid << '\t' << did << '\t' << grade << '\n';
  }
}

TextEmbedder embedder_of(const EncoderState& state, const Vocab& vocab, std::string instruction) {
  return [&state, &vocab, instruction = std::move(instruction)](std::span<const std::string> texts) {
    return embed_texts(state, vocab, texts, instruction);
  };
}

TextEmbedder embedder_of(const TeacherOracle& oracle, std::string instruction) {
  return [&oracle, instruction = std::move(instruction)](std::span<const std::string> texts) {
    return oracle.embed(texts, instruction);
  };
}

std::string_view to_string(QuantKind kind) {
  switch (kind) {
    case QuantKind::Float32: return "float32";
    case QuantKind::Int8: return "int8";
    case QuantKind::Binary: return "binary";
  }
  return "?";
}

QuantKind parse_quant_kind(std::string_view name) {
  for (const QuantKind k : {QuantKind::Float32, QuantKind::Int8, QuantKind::Binary}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorKind::Config, "unknown quantization scheme '" + std::string(name) + "'");
}

QuantScheme calibrate(QuantKind kind, const Tensor2& vectors) {
  QuantScheme scheme;
  scheme.kind = kind;
  if (kind != QuantKind::Int8) return scheme;
  if (vectors.rows() == 0) throw Error(ErrorKind::Evaluation, "cannot calibrate INT8 scales on zero rows");
  scheme.scales = vectors.cwiseAbs().colwise().maxCoeff() / 127.0f;
  scheme.dead.assign(static_cast<std::size_t>(vectors.cols()), false);
  for (Eigen::Index j = 0; j < scheme.scales.size(); ++j) {
    if (!(scheme.scales(j) > 0.0f)) {
      scheme.scales(j) = 1.0f;
      scheme.dead[static_cast<std::size_t>(j)] = true;
    }
  }
  return scheme;
}

Quantized quantize(const Tensor2& vectors, const QuantScheme& scheme) {
  Quantized q;
  q.scheme = scheme;
  q.rows = vectors.rows();
  q.dim = vectors.cols();
  switch (scheme.kind) {
    case QuantKind::Float32:
      q.floats = vectors;
      break;
    case QuantKind::Int8:
      if (scheme.scales.size() != vectors.cols()) {
        throw Error(ErrorKind::Dimension, "INT8 scales for " + std::to_string(scheme.scales.size()) +
                                              " dims applied to " + shape_of(vectors));
      }
      q.codes.resize(q.rows, q.dim);
      for (Eigen::Index i = 0; i < q.rows; ++i) {
        for (Eigen::Index j = 0; j < q.dim; ++j) {
          const long r = std::lround(static_cast<double>(vectors(i, j)) / scheme.scales(j));
          q.codes(i, j) = static_cast<std::int8_t>(std::clamp<long>(r, -127, 127));
        }
      }
      break;
    case QuantKind::Binary:
      q.words_per_row = (q.dim + 63) / 64;
      q.bits.assign(static_cast<std::size_t>(q.rows * q.words_per_row), 0);
      for (Eigen::Index i = 0; i < q.rows; ++i) {
        for (Eigen::Index j = 0; j < q.dim; ++j) {
          if (vectors(i, j) >= 0.0f) q.bits[static_cast<std::size_t>(i * q.words_per_row + j / 64)] |= 1ull << (j % 64);
        }
      }
      break;
  }
  return q;
}

Tensor2 dequantize(const Quantized& q) {
  switch (q.scheme.kind) {
    case QuantKind::Float32:
      return q.floats;
    case QuantKind::Int8:
      return (q.codes.cast<float>().array().rowwise() * q.scheme.scales.array()).matrix();
    case QuantKind::Binary: {
      Tensor2 out(q.rows, q.dim);
      for (Eigen::Index i = 0; i < q.rows; ++i) {
        for (Eigen::Index j = 0; j < q.dim; ++j) out(i, j) = q.bit(i, j) ? 1.0f : -1.0f;
      }
      return out;
    }
  }
  return {};
}

Eigen::MatrixXd score(const Quantized& queries, const Quantized& docs) {
  check_same_scheme(queries, docs);
  Eigen::MatrixXd out(queries.rows, docs.rows);
  switch (docs.scheme.kind) {
    case QuantKind::Float32:
      out = (queries.floats.cast<double>() * docs.floats.cast<double>().transpose());
      break;
    case QuantKind::Int8: {
      const Eigen::ArrayXd weight = docs.scheme.scales.cast<double>().array().square().transpose();
      for (Eigen::Index i = 0; i < queries.rows; ++i) {
        for (Eigen::Index d = 0; d < docs.rows; ++d) {
          double s = 0.0;
          for (Eigen::Index j = 0; j < docs.dim; ++j) {
            const std::int32_t product = std::int32_t{queries.codes(i, j)} * std::int32_t{docs.codes(d, j)};
            s += product * weight(j);
          }
          out(i, d) = s;
        }
      }
      break;
    }
    case QuantKind::Binary:
      for (Eigen::Index i = 0; i < queries.rows; ++i) {
        for (Eigen::Index d = 0; d < docs.rows; ++d) {
          int hamming = 0;
          for (Eigen::Index w = 0; w < docs.words_per_row; ++w) {
            hamming += std::popcount(queries.bits[static_cast<std::size_t>(i * queries.words_per_row + w)] ^
                                     docs.bits[static_cast<std::size_t>(d * docs.words_per_row + w)]);
          }
          out(i, d) = static_cast<double>(docs.dim - 2 * hamming);
        }
      }
      break;
  }
  return out;
}

Eigen::MatrixXd score_float_query(const Tensor2& queries, const Quantized& docs) {
  if (queries.cols() != docs.dim) {
    throw Error(ErrorKind::Dimension, "query dim " + std::to_string(queries.cols()) + " != index dim " +
                                          std::to_string(docs.dim));
  }
  return queries.cast<double>() * dequantize(docs).cast<double>().transpose();
}

Tensor2 mrl_truncate(const Tensor2& vectors, std::uint32_t k, bool renormalize) {
  if (k < 1 || k > vectors.cols()) {
    throw Error(ErrorKind::Truncation, "cannot truncate " + std::to_string(vectors.cols()) + "-dim vectors to " +
                                           std::to_string(k));
  }
  if (k == vectors.cols()) return vectors;
  Tensor2 out = vectors.leftCols(k);
  return renormalize ? l2_normalize_rows(out) : out;
}

namespace {

Tensor2 prepare(const Tensor2& vectors, const IndexOptions& options) {
  return options.dim ? mrl_truncate(vectors, *options.dim, options.renormalize) : vectors;
}

}  // namespace

Index build_index(std::vector<std::string> ids, const Tensor2& vectors, const IndexOptions& options) {
  if (static_cast<Eigen::Index>(ids.size()) != vectors.rows()) {
    throw Error(ErrorKind::Dimension, std::to_string(ids.size()) + " ids for " + shape_of(vectors));
  }
  const Tensor2 prepared = prepare(vectors, options);
  Index index;
  index.ids = std::move(ids);
  index.payload = quantize(prepared, calibrate(options.scheme, prepared));
  index.options = options;
  return index;
}

Index build_index(std::span<const TextRecord> docs, const TextEmbedder& embed, const IndexOptions& options) {
  std::vector<std::string> ids, texts;
  for (const auto& d : docs) {
    ids.push_back(d.id);
    texts.push_back(d.text);
  }
  return build_index(std::move(ids), embed(texts), options);
}

RetrievalRun search(const Index& index, std::span<const std::string> query_ids, const Tensor2& queries,
                    std::size_t k, bool float_query) {
  if (static_cast<Eigen::Index>(query_ids.size()) != queries.rows()) {
    throw Error(ErrorKind::Dimension, std::to_string(query_ids.size()) + " query ids for " + shape_of(queries));
  }
  const Tensor2 prepared = prepare(queries, index.options);
  const Eigen::MatrixXd scores = float_query ? score_float_query(prepared, index.payload)
                                             : score(quantize(prepared, index.payload.scheme), index.payload);
  RetrievalRun run;
  run.query_ids.assign(query_ids.begin(), query_ids.end());
  const std::size_t depth = std::min(k, index.size());
  std::vector<std::size_t> order(index.size());
  for (Eigen::Index q = 0; q < scores.rows(); ++q) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(depth), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double sa = scores(q, static_cast<Eigen::Index>(a));
                        const double sb = scores(q, static_cast<Eigen::Index>(b));
                        if (sa != sb) return sa > sb;
                        return index.ids[a] < index.ids[b];
                      });
    std::vector<Hit> hits;
    hits.reserve(depth);
    for (std::size_t r = 0; r < depth; ++r) hits.push_back({index.ids[order[r]], scores(q, static_cast<Eigen::Index>(order[r]))});
    run.hits.push_back(std::move(hits));
  }
  return run;
}

NdcgResult ndcg_at_10(const RetrievalRun& run, const Qrels& qrels) {
  constexpr std::size_t kDepth = 10;
  std::map<std::string, const std::vector<Hit>*> by_query;
  for (std::size_t i = 0; i < run.query_ids.size(); ++i) by_query[run.query_ids[i]] = &run.hits[i];

  NdcgResult result;
  double sum = 0.0;
  for (const auto& [qid, judged] : qrels) {
    std::vector<int> grades;
    for (const auto& [did, grade] : judged) {
      if (grade > 0) grades.push_back(grade);
    }
    if (grades.empty()) continue;
    std::sort(grades.begin(), grades.end(), std::greater<>());
    double ideal = 0.0;
    for (std::size_t r = 0; r < std::min(kDepth, grades.size()); ++r) {
      ideal += (std::exp2(grades[r]) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
    }
    double dcg = 0.0;
    if (const auto it = by_query.find(qid); it != by_query.end()) {
      const auto& hits = *it->second;
      for (std::size_t r = 0; r < std::min(kDepth, hits.size()); ++r) {
        const auto g = judged.find(hits[r].doc_id);
        if (g != judged.end() && g->second > 0) dcg += (std::exp2(g->second) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
      }
    }
    result.per_query[qid] = dcg / ideal;
    sum += dcg / ideal;
  }
  if (!result.per_query.empty()) result.mean = sum / static_cast<double>(result.per_query.size());
  return result;
}

std::string_view to_string(EvalMode mode) { return mode == EvalMode::Standard ? "standard" : "asym"; }

EvalMode parse_eval_mode(std::string_view name) {
  if (name == "standard") return EvalMode::Standard;
  if (name == "asym" || name == "asymmetric") return EvalMode::Asymmetric;
  throw Error(ErrorKind::Config, "unknown eval mode '" + std::string(name) + "'");
}

EmbeddedDataset embed_dataset(const JudgedDataset& data, const TextEmbedder& query_side, const TextEmbedder& doc_side) {
  EmbeddedDataset out;
  std::vector<std::string> doc_texts, query_texts;
  for (const auto& d : data.docs) {
    out.doc_ids.push_back(d.id);
    doc_texts.push_back(d.text);
  }
  for (const auto& q : data.queries) {
    out.query_ids.push_back(q.id);
    query_texts.push_back(q.text);
  }
  out.docs = doc_side(doc_texts);
  out.queries = query_side(query_texts);
  if (out.docs.cols() != out.queries.cols()) {
    throw Error(ErrorKind::Dimension, "doc embeddings " + shape_of(out.docs) + " and query embeddings " +
                                          shape_of(out.queries) + " live in different spaces");
  }
  return out;
}

NdcgResult evaluate(const EmbeddedDataset& embedded, const Qrels& qrels, const EvalOptions& options) {
  const Index index = build_index(embedded.doc_ids, embedded.docs, options.index);
  return ndcg_at_10(search(index, embedded.query_ids, embedded.queries, options.depth, options.float_query), qrels);
}

NdcgResult evaluate(const JudgedDataset& data, const TextEmbedder& query_side, const TextEmbedder& doc_side,
                    const EvalOptions& options) {
  return evaluate(embed_dataset(data, query_side, doc_side), data.qrels, options);
}

std::vector<SweepRow> sweep(const JudgedDataset& data, const TextEmbedder& student, const TextEmbedder& teacher,
                            std::span<const std::uint32_t> dims, std::span<const QuantKind> schemes,
                            std::span<const EvalMode> modes, bool renormalize, bool float_query) {
  std::vector<SweepRow> rows;
  std::vector<std::string> doc_texts, query_texts;
  EmbeddedDataset embedded;
  for (const auto& d : data.docs) {
    embedded.doc_ids.push_back(d.id);
    doc_texts.push_back(d.text);
  }
  for (const auto& q : data.queries) {
    embedded.query_ids.push_back(q.id);
    query_texts.push_back(q.text);
  }
  embedded.queries = student(query_texts);
  std::optional<Tensor2> student_docs, teacher_docs;
  for (const EvalMode mode : modes) {
    std::optional<Tensor2>& docs = mode == EvalMode::Standard ? student_docs : teacher_docs;
    if (!docs) docs = (mode == EvalMode::Standard ? student : teacher)(doc_texts);
    embedded.docs = *docs;
    for (const std::uint32_t dim : dims) {
      for (const QuantKind scheme : schemes) {
        EvalOptions options;
        options.index = {dim, scheme, renormalize};
        options.float_query = float_query;
        rows.push_back({mode, dim, scheme, evaluate(embedded, data.qrels, options).mean});
      }
    }
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "mode,dim,scheme,ndcg10\n";
  for (const auto& r : rows) out << to_string(r.mode) << ',' << r.dim << ',' << to_string(r.scheme) << ',' << fixed(r.ndcg10, 6) << '\n';
}

BenchResult throughput_bench(const TextEmbedder& embed, std::span<const std::string> texts,
                             std::span<const std::size_t> batch_sizes, std::size_t repeats, std::uint64_t seed) {
  if (texts.empty()) throw Error(ErrorKind::Evaluation, "throughput bench needs at least one text");
  if (repeats < 1) throw Error(ErrorKind::Config, "repeats must be >= 1");
  if (batch_sizes.empty()) batch_sizes = kBenchBatchSizes;
  Rng rng(seed);
  BenchResult result;
  std::vector<double> throughput;
  for (const std::size_t size : batch_sizes) {
    if (size == 0) throw Error(ErrorKind::Config, "batch size must be >= 1");
    std::vector<std::string> batch;
    for (std::size_t i = 0; i < size; ++i) batch.push_back(texts[rng.index(texts.size())]);
    std::vector<double> seconds;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto start = std::chrono::steady_clock::now();
      const Tensor2 out = embed(batch);
      const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (out.rows() != static_cast<Eigen::Index>(size)) throw Error(ErrorKind::Evaluation, "embedder dropped rows");
      seconds.push_back(t);
      throughput.push_back(static_cast<double>(size) / std::max(t, 1e-12));
    }
    if (mean_of(seconds) <= kLatencyThreshold) result.max_batch = std::max(result.max_batch.value_or(0), size);
    result.batch_sizes.push_back(size);
    result.seconds.push_back(std::move(seconds));
  }
  result.items_per_second_mean = mean_of(throughput);
  result.items_per_second_sd = sd_of(throughput);
  const auto smallest = std::min_element(result.batch_sizes.begin(), result.batch_sizes.end()) - result.batch_sizes.begin();
  result.min_latency_mean = mean_of(result.seconds[static_cast<std::size_t>(smallest)]);
  result.min_latency_sd = sd_of(result.seconds[static_cast<std::size_t>(smallest)]);
  return result;
}

void write_bench_csv(const std::filesystem::path& path, std::span<const BenchRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "model,docs_per_s,docs_per_s_sd,docs_speedup,docs_min_latency_ms,docs_min_latency_sd_ms,docs_max_n,"
         "queries_per_s,queries_per_s_sd,queries_speedup,queries_min_latency_ms,queries_min_latency_sd_ms,queries_max_n\n";
  auto side = [&](const BenchResult& r, double baseline) {
    std::string s = fixed(r.items_per_second_mean, 1) + ',' + fixed(r.items_per_second_sd, 1) + ',' +
                    fixed(r.items_per_second_mean / baseline, 1) + ',' + fixed(1e3 * r.min_latency_mean, 2) + ',' +
                    fixed(1e3 * r.min_latency_sd, 2) + ',';
    return s + (r.max_batch ? std::to_string(*r.max_batch) : "-");
  };
  for (const auto& row : rows) {
    out << row.model << ',' << side(row.docs, rows.front().docs.items_per_second_mean) << ','
        << side(row.queries, rows.front().queries.items_per_second_mean) << '\n';
  }
}

}  // namespace leaf
