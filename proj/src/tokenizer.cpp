#include "leaf/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "leaf/error.hpp"

namespace leaf {
namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> tokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  return tokens;
}

constexpr std::size_t kMaxCharsPerWord = 100;

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;  // stray continuation byte: treat as its own unit
}

// Frequency-descending, ties by token text.
std::vector<std::string> ranked(const std::map<std::string, std::size_t>& counts) {
  std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  out.reserve(items.size());
  for (auto& [token, count] : items) out.push_back(token);
  return out;
}

}  // namespace

Vocab::Vocab() : Vocab(reserved_tokens()) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < kReservedTokens) {
    throw Error(ErrorKind::Vocab, "vocabulary has fewer than the reserved tokens");
  }
  for (std::size_t i = 0; i < kReservedTokens; ++i) {
    if (tokens_[i] != reserved_tokens()[i]) {
      throw Error(ErrorKind::Vocab, "reserved token " + reserved_tokens()[i] + " missing at id " + std::to_string(i));
    }
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty() || tokens_[i].find_first_of("\n\r") != std::string::npos) {
      throw Error(ErrorKind::Vocab, "invalid token at id " + std::to_string(i));
    }
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw Error(ErrorKind::Vocab, "duplicate token '" + tokens_[i] + "'");
    }
  }
}

bool Vocab::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

TokenId Vocab::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(ErrorKind::Vocab, "token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocab(std::move(tokens));
}

std::vector<std::string> pre_tokenize(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (const char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : raw);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::vector<std::string> utf8_chars(std::string_view word) {
  std::vector<std::string> chars;
  std::size_t i = 0;
  while (i < word.size()) {
    const std::size_t n = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    chars.emplace_back(word.substr(i, n));
    i += n;
  }
  return chars;
}

// Slot allocation after the reserved ids: the most frequent words take up to
// half the budget, then characters enter in (plain, "##") pairs by frequency,
// then remaining words fill whatever is left.
Vocab build_vocab(std::span<const std::string> corpus, std::size_t target_size) {
  if (target_size < 8) {
    throw Error(ErrorKind::Config, "vocab target size " + std::to_string(target_size) + " < 8");
  }
  if (corpus.empty()) throw Error(ErrorKind::Config, "empty corpus");

  std::map<std::string, std::size_t> word_counts;
  std::map<std::string, std::size_t> char_counts;
  for (const auto& text : corpus) {
    for (auto& word : pre_tokenize(text)) {
      for (auto& ch : utf8_chars(word)) ++char_counts[ch];
      ++word_counts[std::move(word)];
    }
  }
  const std::vector<std::string> words = ranked(word_counts);
  const std::vector<std::string> chars = ranked(char_counts);

  std::vector<std::string> tokens = reserved_tokens();
  std::unordered_map<std::string, bool> taken;
  for (const auto& t : tokens) taken[t] = true;
  const auto add = [&](const std::string& t) {
    if (tokens.size() >= target_size || taken.count(t)) return false;
    tokens.push_back(t);
    taken[t] = true;
    return true;
  };

  const std::size_t budget = target_size - kReservedTokens;
  std::size_t next_word = 0;
  for (; next_word < words.size() && tokens.size() < kReservedTokens + budget / 2; ++next_word) {
    add(words[next_word]);
  }
  for (const auto& ch : chars) {
    const std::string cont = std::string(kContinuationPrefix) + ch;
    const std::size_t needed = (taken.count(ch) ? 0 : 1) + (taken.count(cont) ? 0 : 1);
    if (tokens.size() + needed > target_size) break;
    add(ch);
    add(cont);
  }
  for (; next_word < words.size() && tokens.size() < target_size; ++next_word) add(words[next_word]);
  return Vocab(std::move(tokens));
}

std::vector<TokenId> wordpiece(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& word : pre_tokenize(text)) {
    const std::vector<std::string> chars = utf8_chars(word);
    if (chars.size() > kMaxCharsPerWord) {
      ids.push_back(kUnkId);
      continue;
    }
    std::vector<TokenId> pieces;
    std::size_t start = 0;
    bool bad = false;
    while (start < chars.size()) {
      std::size_t end = chars.size();
      TokenId match = -1;
      while (start < end) {
        std::string candidate = start > 0 ? std::string(kContinuationPrefix) : std::string();
        for (std::size_t i = start; i < end; ++i) candidate += chars[i];
        if (vocab.contains(candidate)) {
          match = vocab.id(candidate);
          break;
        }
        --end;
      }
      if (match < 0) {
        bad = true;
        break;
      }
      pieces.push_back(match);
      start = end;
    }
    if (bad) {
      ids.push_back(kUnkId);
    } else {
      ids.insert(ids.end(), pieces.begin(), pieces.end());
    }
  }
  return ids;
}

TokenBatch encode_batch(std::span<const std::string> texts, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 3) throw Error(ErrorKind::Config, "max_len must be >= 3");
  std::vector<std::vector<TokenId>> rows;
  rows.reserve(texts.size());
  std::size_t longest = 0;
  for (const auto& text : texts) {
    std::vector<TokenId> body = wordpiece(text, vocab);
    if (body.size() > max_len - 2) body.resize(max_len - 2);
    std::vector<TokenId> row;
    row.reserve(body.size() + 2);
    row.push_back(kClsId);
    row.insert(row.end(), body.begin(), body.end());
    row.push_back(kSepId);
    longest = std::max(longest, row.size());
    rows.push_back(std::move(row));
  }

  TokenBatch batch;
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto t = static_cast<Eigen::Index>(longest);
  batch.ids = IdMatrix::Constant(n, t, kPadId);
  batch.pad_mask = MaskMatrix::Constant(n, t, false);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& row = rows[static_cast<std::size_t>(r)];
    for (std::size_t c = 0; c < row.size(); ++c) {
      batch.ids(r, static_cast<Eigen::Index>(c)) = row[c];
      batch.pad_mask(r, static_cast<Eigen::Index>(c)) = true;
    }
  }
  return batch;
}

std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (const TokenId id : ids) {
    if (id == kPadId || id == kClsId || id == kSepId) continue;
    const std::string& t = vocab.token(id);
    if (t.rfind(kContinuationPrefix, 0) == 0 && !out.empty()) {
      out += t.substr(kContinuationPrefix.size());
    } else {
      if (!out.empty()) out += ' ';
      out += t;
    }
  }
  return out;
}

}  // namespace leaf
