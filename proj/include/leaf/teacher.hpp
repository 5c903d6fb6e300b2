#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "leaf/encoder.hpp"
#include "leaf/records.hpp"

namespace leaf {

/// A frozen text -> vector map. Only embed() is required, so an oracle
/// backed by an external service fits behind the same interface.
class TeacherOracle {
 public:
  virtual ~TeacherOracle() = default;
  virtual Tensor2 embed(std::span<const std::string> texts, std::string_view instruction = {}) const = 0;
  virtual std::uint32_t output_dim() const = 0;
  virtual bool normalized() const = 0;
};

/// Random-init encoder standing in for a large teacher. Also exposes its
/// forward trace for the auxiliary losses that need teacher internals.
class SyntheticTeacher final : public TeacherOracle {
 public:
  SyntheticTeacher(EncoderState state, Vocab vocab);

  Tensor2 embed(std::span<const std::string> texts, std::string_view instruction = {}) const override;
  std::uint32_t output_dim() const override { return state_.config.output_dim; }
  bool normalized() const override { return state_.config.normalize_output; }

  EncodeResult trace(const TokenBatch& batch) const { return encode(state_, batch, true); }

  const EncoderState& state() const { return state_; }
  const Vocab& vocab() const { return vocab_; }
  std::size_t embed_calls() const { return embed_calls_; }

 private:
  EncoderState state_;
  Vocab vocab_;
  mutable std::size_t embed_calls_ = 0;
};

inline constexpr float kTeacherTokenScale = 8.0f;

// Random-init teacher whose token embeddings are scaled up so token identity
// outweighs the position table after mean pooling.
SyntheticTeacher synthetic_teacher(EncoderConfig config, std::uint64_t seed, Vocab vocab,
                                   float token_scale = kTeacherTokenScale);

enum class Split : std::uint8_t { Train, Val };

struct CacheRecord {
  std::string id;
  std::string text;
  Split split = Split::Train;

  friend bool operator==(const CacheRecord&, const CacheRecord&) = default;
};

/// Precomputed teacher targets: a JSON-lines manifest plus a "LEAF" binary
/// vector file whose rows follow manifest order.
class EmbeddingCache {
 public:
  EmbeddingCache() = default;
  EmbeddingCache(std::vector<CacheRecord> records, Tensor2 vectors, bool normalized, std::string instruction);

  const std::vector<CacheRecord>& records() const { return records_; }
  const Tensor2& vectors() const { return vectors_; }
  std::uint32_t dim() const { return static_cast<std::uint32_t>(vectors_.cols()); }
  std::size_t count() const { return records_.size(); }
  bool normalized() const { return normalized_; }
  const std::string& instruction() const { return instruction_; }

  std::size_t row_of(const std::string& id) const;
  std::vector<std::size_t> indices(Split split) const;

  void save(const std::filesystem::path& manifest, const std::filesystem::path& vectors) const;
  static EmbeddingCache load(const std::filesystem::path& manifest, const std::filesystem::path& vectors);

 private:
  std::vector<CacheRecord> records_;
  Tensor2 vectors_;
  bool normalized_ = false;
  std::string instruction_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Prepends `instruction` to every text before embedding, and marks
// `val_holdout` randomly chosen new items as validation. With `prior`, the
// new rows are appended to a copy of it.
EmbeddingCache build_cache(const TeacherOracle& teacher, std::span<const TextRecord> texts,
                           std::string_view instruction, std::size_t val_holdout, std::uint64_t seed = 0,
                           const EmbeddingCache* prior = nullptr, std::size_t chunk = 32);

Tensor2 cache_lookup(const EmbeddingCache& cache, std::span<const std::string> ids);

}  // namespace leaf
