#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "leaf/error.hpp"
#include "leaf/rng.hpp"
#include "leaf/tokenizer.hpp"

using namespace leaf;

namespace {

std::vector<std::string> synthetic_corpus(std::size_t docs, Rng& rng) {
  const std::vector<std::string> syllables = {"ka", "lo", "mi", "ren", "tu", "sa", "vel", "dor", "qi", "zu", "xe", "po"};
  std::vector<std::string> words;
  for (int i = 0; i < 150; ++i) {
    std::string w;
    const std::size_t n = 1 + rng.index(3);
    for (std::size_t s = 0; s < n; ++s) w += syllables[rng.index(syllables.size())];
    words.push_back(w);
  }
  std::vector<std::string> corpus;
  for (std::size_t d = 0; d < docs; ++d) {
    std::string text;
    const std::size_t n = 3 + rng.index(12);
    for (std::size_t i = 0; i < n; ++i) {
      if (i) text += ' ';
      text += words[rng.index(words.size())];
      if (rng.uniform() < 0.05) text += "é";
    }
    corpus.push_back(text);
  }
  return corpus;
}

std::vector<TokenId> row_ids(const TokenBatch& b, Eigen::Index r) {
  std::vector<TokenId> ids;
  for (Eigen::Index c = 0; c < b.length(); ++c) ids.push_back(b.ids(r, c));
  return ids;
}

}  // namespace

TEST_CASE("build_vocab keeps frequent words and reserved ids") {
  const std::vector<std::string> corpus = {"aa aa", "bb", ""};
  const Vocab v = build_vocab(corpus, 8);
  CHECK(v.size() == 8);
  CHECK(v.contains("aa"));
  CHECK(v.contains("bb"));
  CHECK(v.token(kPadId) == "[PAD]");
  CHECK(v.token(kUnkId) == "[UNK]");
  CHECK(v.token(kClsId) == "[CLS]");
  CHECK(v.token(kSepId) == "[SEP]");
}

TEST_CASE("build_vocab config errors") {
  const std::vector<std::string> corpus = {"x"};
  try {
    (void)build_vocab(corpus, 3);
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
  }
  CHECK_THROWS_AS((void)build_vocab(std::vector<std::string>{}, 16), Error);
}

TEST_CASE("tokenize/detokenize round trip loses only UNK'd words") {
  Rng rng(4);
  const std::vector<std::string> corpus = synthetic_corpus(100, rng);
  const Vocab v = build_vocab(corpus, 256);
  for (const auto& text : corpus) {
    const std::vector<TokenId> ids = wordpiece(text, v);
    const std::vector<std::string> original = pre_tokenize(text);
    const std::vector<std::string> restored = pre_tokenize(detokenize(ids, v));
    REQUIRE(original.size() == restored.size());
    for (std::size_t i = 0; i < original.size(); ++i) {
      if (restored[i] == "[UNK]") {
        // Only words containing a character outside the vocabulary may be lost.
        bool representable = true;
        for (const auto& ch : utf8_chars(original[i])) representable = representable && v.contains(ch) && v.contains("##" + ch);
        CHECK_FALSE(representable);
      } else {
        CHECK(restored[i] == original[i]);
      }
    }
  }
}

TEST_CASE("encode_batch framing, padding and truncation") {
  const Vocab v(std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "ab", "c", "##c", "d", "##d"});
  SUBCASE("exact match") {
    const std::vector<std::string> texts = {"ab"};
    const TokenBatch b = encode_batch(texts, v, 64);
    CHECK(row_ids(b, 0) == std::vector<TokenId>{kClsId, v.id("ab"), kSepId});
  }
  SUBCASE("padding to the batch maximum") {
    const std::vector<std::string> texts = {"c d", "c d c d c"};
    const TokenBatch b = encode_batch(texts, v, 64);
    CHECK(b.length() == 7);
    CHECK(b.real_length(0) == 4);
    CHECK(b.real_length(1) == 7);
    CHECK(b.ids(0, 4) == kPadId);
    CHECK_FALSE(b.pad_mask(0, 4));
  }
  SUBCASE("truncation keeps SEP") {
    const std::vector<std::string> texts = {"c c c c c c c c c c c c"};
    const TokenBatch b = encode_batch(texts, v, 8);
    CHECK(b.length() == 8);
    CHECK(b.ids(0, 7) == kSepId);
    CHECK(b.ids(0, 0) == kClsId);
  }
  SUBCASE("greedy longest match with continuation") {
    const std::vector<std::string> texts = {"ABcd"};
    const TokenBatch b = encode_batch(texts, v, 64);
    CHECK(row_ids(b, 0) == std::vector<TokenId>{kClsId, v.id("ab"), v.id("##c"), v.id("##d"), kSepId});
  }
  SUBCASE("unknown characters become UNK") {
    const std::vector<std::string> texts = {"zz c"};
    const TokenBatch b = encode_batch(texts, v, 64);
    CHECK(row_ids(b, 0) == std::vector<TokenId>{kClsId, kUnkId, v.id("c"), kSepId});
  }
  CHECK_THROWS_AS((void)encode_batch(std::vector<std::string>{"c"}, v, 2), Error);
}

TEST_CASE("encode_batch properties") {
  Rng rng(8);
  const std::vector<std::string> corpus = synthetic_corpus(60, rng);
  const Vocab v = build_vocab(corpus, 128);
  for (std::size_t i = 0; i + 3 < corpus.size(); i += 3) {
    const std::vector<std::string> batch_texts(corpus.begin() + static_cast<long>(i), corpus.begin() + static_cast<long>(i + 3));
    const TokenBatch batch = encode_batch(batch_texts, v, 16);
    for (std::size_t j = 0; j < 3; ++j) {
      const TokenBatch alone = encode_batch(std::span(&batch_texts[j], 1), v, 16);
      const auto r = static_cast<Eigen::Index>(j);
      // identical up to trailing PAD
      CHECK(alone.real_length(0) == batch.real_length(r));
      for (Eigen::Index c = 0; c < batch.length(); ++c) {
        const TokenId expected = c < alone.length() ? alone.ids(0, c) : kPadId;
        CHECK(batch.ids(r, c) == expected);
        CHECK(batch.pad_mask(r, c) == (batch.ids(r, c) != kPadId));
      }
      CHECK(batch.ids(r, 0) == kClsId);
      CHECK(batch.ids(r, batch.real_length(r) - 1) == kSepId);
    }
    CHECK(row_ids(encode_batch(batch_texts, v, 16), 1) == row_ids(batch, 1));
  }
}

TEST_CASE("vocab file round trip is byte exact") {
  Rng rng(2);
  const Vocab v = build_vocab(synthetic_corpus(30, rng), 64);
  const auto dir = std::filesystem::temp_directory_path() / "leaf_vocab_test";
  std::filesystem::create_directories(dir);
  v.save(dir / "a.txt");
  const Vocab loaded = Vocab::load(dir / "a.txt");
  CHECK(loaded == v);
  loaded.save(dir / "b.txt");
  std::ifstream a(dir / "a.txt", std::ios::binary), b(dir / "b.txt", std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());
  std::filesystem::remove_all(dir);

  CHECK_THROWS_AS(Vocab(std::vector<std::string>{"[UNK]", "[PAD]", "[CLS]", "[SEP]"}), Error);
  CHECK_THROWS_AS(Vocab(std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "a"}), Error);
}
