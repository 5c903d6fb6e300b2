#include "leaf/teacher.hpp"

#include <fstream>

#include "json.hpp"
#include "leaf/binary_io.hpp"
#include "leaf/rng.hpp"

namespace leaf {
namespace {

constexpr std::uint32_t kCacheVersion = 1;

std::string split_name(Split s) { return s == Split::Train ? "train" : "val"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  throw Error(ErrorKind::Format, "unknown split '" + s + "'");
}

}  // namespace

SyntheticTeacher::SyntheticTeacher(EncoderState state, Vocab vocab) : state_(std::move(state)), vocab_(std::move(vocab)) {
  if (state_.config.vocab_size != vocab_.size()) {
    throw Error(ErrorKind::Config, "teacher vocab_size " + std::to_string(state_.config.vocab_size) +
                                       " != vocabulary size " + std::to_string(vocab_.size()));
  }
}

Tensor2 SyntheticTeacher::embed(std::span<const std::string> texts, std::string_view instruction) const {
  ++embed_calls_;
  return embed_texts(state_, vocab_, texts, instruction);
}

SyntheticTeacher synthetic_teacher(EncoderConfig config, std::uint64_t seed, Vocab vocab, float token_scale) {
  if (!config.normalize_output) throw Error(ErrorKind::Config, "synthetic teacher must normalize its output");
  if (!(token_scale > 0.0f)) throw Error(ErrorKind::Config, "token_scale must be positive");
  config.seed = seed;
  config.vocab_size = static_cast<std::uint32_t>(vocab.size());
  EncoderState state = init_encoder(config);
  state.token_embedding.value *= token_scale;
  return SyntheticTeacher(std::move(state), std::move(vocab));
}

EmbeddingCache::EmbeddingCache(std::vector<CacheRecord> records, Tensor2 vectors, bool normalized,
                               std::string instruction)
    : records_(std::move(records)),
      vectors_(std::move(vectors)),
      normalized_(normalized),
      instruction_(std::move(instruction)) {
  if (static_cast<Eigen::Index>(records_.size()) != vectors_.rows()) {
    throw Error(ErrorKind::Format, "manifest has " + std::to_string(records_.size()) + " records but " +
                                       std::to_string(vectors_.rows()) + " vectors");
  }
  index_.reserve(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (!index_.emplace(records_[i].id, i).second) {
      throw Error(ErrorKind::Format, "duplicate cache id '" + records_[i].id + "'");
    }
  }
}

std::size_t EmbeddingCache::row_of(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw Error(ErrorKind::Lookup, "id '" + id + "' not in cache");
  return it->second;
}

std::vector<std::size_t> EmbeddingCache::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (records_[i].split == split) out.push_back(i);
  }
  return out;
}

void EmbeddingCache::save(const std::filesystem::path& manifest, const std::filesystem::path& vectors) const {
  {
    std::ofstream out(manifest, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + manifest.string());
    for (const auto& r : records_) {
      out << nlohmann::json{{"id", r.id}, {"text", r.text}, {"split", split_name(r.split)}}.dump() << '\n';
    }
  }
  std::ofstream out(vectors, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + vectors.string());
  binary::write_magic(out, "LEAF");
  binary::write_u32(out, kCacheVersion);
  binary::write_u32(out, dim());
  binary::write_u8(out, normalized_ ? 1 : 0);
  binary::write_u64(out, static_cast<std::uint64_t>(records_.size()));
  binary::write_string(out, instruction_);
  binary::write_floats(out, vectors_);
}

EmbeddingCache EmbeddingCache::load(const std::filesystem::path& manifest, const std::filesystem::path& vectors) {
  std::vector<CacheRecord> records;
  {
    std::ifstream in(manifest, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot read " + manifest.string());
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        records.push_back({j.at("id").get<std::string>(), j.at("text").get<std::string>(),
                           parse_split(j.at("split").get<std::string>())});
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Format, manifest.string() + ":" + std::to_string(number) + ": " + e.what());
      }
    }
  }
  std::ifstream in(vectors, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + vectors.string());
  binary::expect_magic(in, "LEAF");
  const std::uint32_t version = binary::read_u32(in);
  if (version != kCacheVersion) throw Error(ErrorKind::Format, "unsupported cache version " + std::to_string(version));
  const std::uint32_t dim = binary::read_u32(in);
  const bool normalized = binary::read_u8(in) != 0;
  const std::uint64_t count = binary::read_u64(in);
  std::string instruction = binary::read_string(in);
  if (count != records.size()) {
    throw Error(ErrorKind::Format, "vector file holds " + std::to_string(count) + " rows, manifest " +
                                       std::to_string(records.size()));
  }
  Tensor2 data(static_cast<Eigen::Index>(count), dim);
  binary::read_floats(in, data);
  if (in.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::Format, "trailing bytes in " + vectors.string());
  return EmbeddingCache(std::move(records), std::move(data), normalized, std::move(instruction));
}

EmbeddingCache build_cache(const TeacherOracle& teacher, std::span<const TextRecord> texts,
                           std::string_view instruction, std::size_t val_holdout, std::uint64_t seed,
                           const EmbeddingCache* prior, std::size_t chunk) {
  if (texts.empty()) throw Error(ErrorKind::Config, "no texts to cache");
  if (val_holdout >= texts.size()) {
    throw Error(ErrorKind::Config, "val holdout " + std::to_string(val_holdout) + " must be below text count " +
                                       std::to_string(texts.size()));
  }
  if (prior) {
    if (prior->dim() != teacher.output_dim()) {
      throw Error(ErrorKind::Format, "teacher dim " + std::to_string(teacher.output_dim()) +
                                         " does not match existing cache dim " + std::to_string(prior->dim()));
    }
    if (prior->instruction() != instruction) throw Error(ErrorKind::Format, "instruction differs from existing cache");
  }

  std::vector<std::size_t> order(texts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Split> splits(texts.size(), Split::Train);
  for (std::size_t i = 0; i < val_holdout; ++i) splits[order[i]] = Split::Val;

  const std::size_t base = prior ? prior->count() : 0;
  Tensor2 vectors(static_cast<Eigen::Index>(base + texts.size()), teacher.output_dim());
  std::vector<CacheRecord> records;
  records.reserve(base + texts.size());
  if (prior) {
    records = prior->records();
    vectors.topRows(static_cast<Eigen::Index>(base)) = prior->vectors();
  }

  std::vector<std::string> buffer;
  for (std::size_t start = 0; start < texts.size(); start += chunk) {
    const std::size_t n = std::min(chunk, texts.size() - start);
    buffer.clear();
    for (std::size_t i = 0; i < n; ++i) buffer.push_back(texts[start + i].text);
    const Tensor2 rows = teacher.embed(buffer, instruction);
    if (rows.cols() != static_cast<Eigen::Index>(teacher.output_dim()) || rows.rows() != static_cast<Eigen::Index>(n)) {
      throw Error(ErrorKind::Format, "teacher returned " + shape_of(rows));
    }
    vectors.middleRows(static_cast<Eigen::Index>(base + start), static_cast<Eigen::Index>(n)) = rows;
  }
  for (std::size_t i = 0; i < texts.size(); ++i) records.push_back({texts[i].id, texts[i].text, splits[i]});
  return EmbeddingCache(std::move(records), std::move(vectors), teacher.normalized(), std::string(instruction));
}

Tensor2 cache_lookup(const EmbeddingCache& cache, std::span<const std::string> ids) {
  Tensor2 out(static_cast<Eigen::Index>(ids.size()), cache.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = cache.vectors().row(static_cast<Eigen::Index>(cache.row_of(ids[i])));
  }
  return out;
}

}  // namespace leaf
