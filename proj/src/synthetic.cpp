#include "leaf/synthetic.hpp"

#include <cstdio>
#include <set>

#include "leaf/rng.hpp"

namespace leaf {
namespace {

struct Lexicon {
  std::vector<std::string> background;
  std::vector<std::vector<std::string>> cluster;                 // per cluster
  std::vector<std::vector<std::vector<std::string>>> subtopic;   // per cluster, per subtopic
};

std::string make_word(Rng& rng) {
  static const char* const kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "st"};
  static const char* const kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
  std::string w;
  const std::size_t syllables = 2 + rng.index(2);
  for (std::size_t s = 0; s < syllables; ++s) {
    w += kOnsets[rng.index(std::size(kOnsets))];
    w += kVowels[rng.index(std::size(kVowels))];
  }
  return w;
}

Lexicon make_lexicon(const CorpusConfig& c, Rng& rng) {
  std::set<std::string> used;
  auto fresh = [&](std::size_t n) {
    std::vector<std::string> out;
    while (out.size() < n) {
      std::string w = make_word(rng);
      if (used.insert(w).second) out.push_back(std::move(w));
    }
    return out;
  };
  Lexicon lex;
  lex.background = fresh(c.background_words);
  for (std::size_t k = 0; k < c.clusters; ++k) {
    lex.cluster.push_back(fresh(c.cluster_words));
    lex.subtopic.emplace_back();
    for (std::size_t s = 0; s < c.subtopics; ++s) lex.subtopic.back().push_back(fresh(c.subtopic_words));
  }
  return lex;
}

// Probabilities of drawing a subtopic word and a cluster word; the rest is background.
struct Mix {
  double subtopic;
  double cluster;
};

constexpr Mix kDocMix{0.35, 0.30};
constexpr Mix kQueryMix{0.50, 0.30};

std::string make_text(const Lexicon& lex, std::size_t cluster, std::size_t subtopic, std::size_t mean_words, Mix mix,
                      Rng& rng) {
  const std::size_t lo = std::max<std::size_t>(1, mean_words - mean_words / 4);
  const std::size_t words = lo + rng.index(mean_words / 2 + 1);
  std::string text;
  for (std::size_t i = 0; i < words; ++i) {
    const double u = rng.uniform();
    const std::vector<std::string>& pool = u < mix.subtopic                 ? lex.subtopic[cluster][subtopic]
                                           : u < mix.subtopic + mix.cluster ? lex.cluster[cluster]
                                                                            : lex.background;
    if (i) text += ' ';
    text += pool[rng.index(pool.size())];
  }
  return text;
}

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%05zu", prefix, i);
  return buf;
}

}  // namespace

void CorpusConfig::validate() const {
  if (clusters < 1 || subtopics < 1) throw Error(ErrorKind::Config, "need at least one cluster and subtopic");
  if (clusters > docs) {
    throw Error(ErrorKind::Config, "clusters (" + std::to_string(clusters) + ") exceed docs (" + std::to_string(docs) + ")");
  }
  if (queries < 1) throw Error(ErrorKind::Config, "need at least one query");
  if (doc_words < 1 || query_words < 1) throw Error(ErrorKind::Config, "text lengths must be >= 1");
  if (background_words < 1 || cluster_words < 1 || subtopic_words < 1) {
    throw Error(ErrorKind::Config, "word pools must be non-empty");
  }
  if (train_query_fraction < 0.0 || train_query_fraction > 1.0) {
    throw Error(ErrorKind::Config, "train_query_fraction must lie in [0, 1]");
  }
}

void SyntheticCorpus::save(const std::filesystem::path& dir) const {
  eval.save(dir);
  write_text_records(dir / "train.jsonl", train);
}

SyntheticCorpus generate_corpus(const CorpusConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const Lexicon lex = make_lexicon(config, rng);

  SyntheticCorpus corpus;
  std::vector<std::pair<std::size_t, std::size_t>> doc_topic;
  for (std::size_t i = 0; i < config.docs; ++i) {
    const std::size_t cluster = i % config.clusters;
    const std::size_t subtopic = (i / config.clusters) % config.subtopics;
    doc_topic.emplace_back(cluster, subtopic);
    corpus.eval.docs.push_back({numbered("doc", i), make_text(lex, cluster, subtopic, config.doc_words, kDocMix, rng)});
  }
  for (std::size_t j = 0; j < config.queries; ++j) {
    const std::size_t cluster = j % config.clusters;
    const std::size_t subtopic = (j / config.clusters) % config.subtopics;
    const std::string id = numbered("q", j);
    corpus.eval.queries.push_back({id, make_text(lex, cluster, subtopic, config.query_words, kQueryMix, rng)});
    for (std::size_t i = 0; i < config.docs; ++i) {
      if (doc_topic[i].first != cluster) continue;
      corpus.eval.qrels[id][corpus.eval.docs[i].id] = doc_topic[i].second == subtopic ? 2 : 1;
    }
  }
  for (std::size_t t = 0; t < config.train_texts; ++t) {
    const std::size_t cluster = rng.index(config.clusters);
    const std::size_t subtopic = rng.index(config.subtopics);
    const bool query_like = rng.uniform() < config.train_query_fraction;
    corpus.train.push_back({numbered("train", t),
                            query_like ? make_text(lex, cluster, subtopic, config.query_words, kQueryMix, rng)
                                       : make_text(lex, cluster, subtopic, config.doc_words, kDocMix, rng)});
  }
  return corpus;
}

}  // namespace leaf
