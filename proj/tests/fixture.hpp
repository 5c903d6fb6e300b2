#pragma once

#include "leaf/synthetic.hpp"
#include "leaf/trainer.hpp"

namespace leaf::testing {

struct Fixture {
  SyntheticCorpus corpus;
  Vocab vocab;
  SyntheticTeacher teacher;
  EmbeddingCache cache;
  EncoderConfig student;
};

inline Fixture make_fixture(const CorpusConfig& corpus_config, std::size_t vocab_size, const EncoderConfig& teacher_config,
                            std::uint32_t student_layers, std::uint32_t student_hidden, std::size_t val_holdout,
                            std::uint64_t seed) {
  SyntheticCorpus corpus = generate_corpus(corpus_config);
  Vocab vocab = build_vocab(texts_of(corpus.train), vocab_size);
  SyntheticTeacher teacher = synthetic_teacher(teacher_config, seed, vocab);
  EmbeddingCache cache = build_cache(teacher, corpus.train, "", val_holdout, seed);
  EncoderConfig student = EncoderConfig::student_default(static_cast<std::uint32_t>(vocab.size()),
                                                         teacher.output_dim(), seed);
  student.num_layers = student_layers;
  student.hidden_dim = student_hidden;
  return {std::move(corpus), std::move(vocab), std::move(teacher), std::move(cache), student};
}

// seed 42, 512 texts with 64 held out, teacher L=4/d=64, student L'=2/d'=32.
inline Fixture pinned_fixture() {
  CorpusConfig c;
  c.seed = 42;
  c.train_texts = 512;
  return make_fixture(c, 512, EncoderConfig::teacher_default(0, 42), 2, 32, 64, 42);
}

// A few dozen short texts and small models for fast unit tests.
inline Fixture tiny_fixture(std::size_t texts = 40) {
  CorpusConfig c;
  c.seed = 7;
  c.docs = 12;
  c.clusters = 3;
  c.queries = 6;
  c.train_texts = texts;
  c.doc_words = 8;
  c.query_words = 4;
  EncoderConfig teacher = EncoderConfig::teacher_default(0, 7);
  teacher.num_layers = 2;
  teacher.hidden_dim = 16;
  teacher.num_heads = 2;
  teacher.output_dim = 12;
  teacher.max_context = 16;
  Fixture f = make_fixture(c, 96, teacher, 1, 8, texts / 5, 7);
  f.student.num_heads = 2;
  f.student.max_context = 16;
  return f;
}

inline TrainConfig tiny_train_config() {
  TrainConfig c;
  c.batch_size = 8;
  c.lr_start = 3e-3;
  c.lr_end = 3e-4;
  c.cycles = 1;
  c.epochs_per_cycle = 4;
  c.max_len = 16;
  c.seed = 11;
  return c;
}

}  // namespace leaf::testing
