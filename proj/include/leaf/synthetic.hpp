#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "leaf/evalhub.hpp"

namespace leaf {

/// Clustered synthetic texts. Every cluster owns a set of topic words and is
/// split into subtopics with their own words; texts mix those with shared
/// background words. A query judges docs of its subtopic as grade 2 and
/// docs of the rest of its cluster as grade 1.
struct CorpusConfig {
  std::size_t docs = 200;
  std::size_t clusters = 8;
  std::size_t subtopics = 3;          // per cluster
  std::size_t queries = 40;
  std::size_t train_texts = 512;
  double train_query_fraction = 0.5;  // share of query-like training texts
  std::size_t doc_words = 24;
  std::size_t query_words = 6;
  std::size_t background_words = 160;
  std::size_t cluster_words = 10;
  std::size_t subtopic_words = 6;
  std::uint64_t seed = 42;

  void validate() const;
};

struct SyntheticCorpus {
  JudgedDataset eval;
  std::vector<TextRecord> train;

  // Judged files plus train.jsonl.
  void save(const std::filesystem::path& dir) const;
};

SyntheticCorpus generate_corpus(const CorpusConfig& config);

}  // namespace leaf
