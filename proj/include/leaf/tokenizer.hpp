#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace leaf {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kClsId = 2;
inline constexpr TokenId kSepId = 3;
inline constexpr std::size_t kReservedTokens = 4;
inline constexpr std::string_view kContinuationPrefix = "##";
inline constexpr std::size_t kDefaultMaxLen = 64;

/// Wordpiece vocabulary. Ids are dense; the four reserved tokens
/// [PAD] [UNK] [CLS] [SEP] occupy ids 0..3.
class Vocab {
 public:
  Vocab();
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const;
  TokenId id(std::string_view token) const;  // kUnkId if absent
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

using IdMatrix = Eigen::Matrix<TokenId, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TokenBatch {
  IdMatrix ids;          // batch x T
  MaskMatrix pad_mask;   // true on real tokens (CLS and SEP included)

  Eigen::Index batch() const { return ids.rows(); }
  Eigen::Index length() const { return ids.cols(); }
  Eigen::Index real_length(Eigen::Index row) const { return pad_mask.row(row).count(); }
};

// Lowercases ASCII and splits on whitespace.
std::vector<std::string> pre_tokenize(std::string_view text);

// Splits a UTF-8 string into code point substrings.
std::vector<std::string> utf8_chars(std::string_view word);

Vocab build_vocab(std::span<const std::string> corpus, std::size_t target_size);

// Greedy longest-match segmentation of one text, without framing tokens.
std::vector<TokenId> wordpiece(std::string_view text, const Vocab& vocab);

TokenBatch encode_batch(std::span<const std::string> texts, const Vocab& vocab,
                        std::size_t max_len = kDefaultMaxLen);

// Joins pieces back into whitespace-separated words; framing and PAD are dropped.
std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab);

}  // namespace leaf
