#include <gtest/gtest.h>

#include "ragner/retrieval.hpp"
#include "oracles.hpp"

namespace ragner {
namespace {

using testing::u32;

Vector random_vector(Rng& rng, Eigen::Index d) {
  Vector v(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) = rng.normal();
  return v;
}

Digest hash_of(std::size_t i) { return sha256("row" + std::to_string(i)); }

VectorStore random_store(Rng& rng, std::size_t n, Eigen::Index d) {
  VectorStore store(static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < n; ++i) store.add({random_vector(rng, d), "c" + std::to_string(i), hash_of(i)});
  return store;
}

// Embeds a chunk as (length, sum of code points, first code point).
Vector toy_embed(std::u32string_view text) {
  Vector v = Vector::Zero(3);
  v(0) = static_cast<double>(text.size());
  for (char32_t c : text) v(1) += static_cast<double>(c);
  if (!text.empty()) v(2) = static_cast<double>(text.front());
  return v;
}

TEST(L2Distance, Examples) {
  Vector a(2), b(2);
  a << 0.0, 0.0;
  b << 3.0, 4.0;
  EXPECT_EQ(l2_distance(a, b), 5.0);
  EXPECT_EQ(l2_distance(b, b), 0.0);
}

TEST(L2Distance, MatchesPlainSummation) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = 1 + static_cast<Eigen::Index>(rng.below(64));
    const Vector a = random_vector(rng, d), b = random_vector(rng, d);
    EXPECT_NEAR(l2_distance(a, b), (a - b).norm(), 1e-12);
  }
}

TEST(L2Distance, MetricProperties) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector a = random_vector(rng, 8), b = random_vector(rng, 8), c = random_vector(rng, 8);
    EXPECT_EQ(l2_distance(a, b), l2_distance(b, a));
    EXPECT_LE(l2_distance(a, c), l2_distance(a, b) + l2_distance(b, c) + 1e-9);
    EXPECT_GE(l2_distance(a, b), 0.0);
  }
}

TEST(L2Distance, DimensionMismatch) {
  EXPECT_THROW(l2_distance(Vector(Vector::Zero(2)), Vector(Vector::Zero(3))), Error);
}

TEST(Config, Validation) {
  RetrievalConfig cfg;
  EXPECT_EQ(cfg.k, 20u);
  EXPECT_EQ(cfg.d, 768u);
  EXPECT_EQ(cfg.chunk_len, 510u);
  cfg.k = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.k = 1;
  cfg.d = 0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(IndexCorpus, OneRowPerChunk) {
  const std::vector<Document> docs{{"a", std::u32string(1020, U'甲')}, {"b", u32("乙丙")}};
  RetrievalConfig cfg;
  cfg.d = 3;
  const auto store = index_corpus(docs, toy_embed, cfg);
  ASSERT_EQ(store.size(), 3u);
  EXPECT_EQ(store.rows()[0].chunk_id, "a:0");
  EXPECT_EQ(store.rows()[1].chunk_id, "a:510");
  EXPECT_EQ(store.rows()[2].chunk_id, "b:0");
  EXPECT_EQ(store.rows()[2].text_hash, text_hash(u32("乙丙")));
  EXPECT_EQ(store.rows()[0].text_hash, store.rows()[1].text_hash);
}

TEST(IndexCorpus, EmptyCorpus) {
  RetrievalConfig cfg;
  cfg.d = 3;
  const auto store = index_corpus({}, toy_embed, cfg);
  EXPECT_EQ(store.size(), 0u);
  EXPECT_EQ(store.dimension(), 3u);
}

TEST(IndexCorpus, ReindexIsByteIdentical) {
  const std::vector<Document> docs{{"a", u32("甲乙丙丁戊己庚辛壬癸")}, {"b", u32("子丑寅卯")}};
  RetrievalConfig cfg;
  cfg.d = 3;
  cfg.chunk_len = 3;
  EXPECT_EQ(save_store(index_corpus(docs, toy_embed, cfg)), save_store(index_corpus(docs, toy_embed, cfg)));
}

TEST(IndexCorpus, EmbedderDimensionMismatch) {
  const std::vector<Document> docs{{"a", u32("甲")}};
  RetrievalConfig cfg;
  cfg.d = 4;
  EXPECT_THROW(index_corpus(docs, toy_embed, cfg), Error);
}

TEST(IndexCorpus, EncoderEmbedderHasModelWidth) {
  const std::vector<Document> docs{{"a", u32("甲乙丙丁戊")}};
  const auto vocab = build_vocab(docs, 100);
  EncoderConfig ecfg;
  ecfg.n_layers = 1;
  ecfg.n_heads = 2;
  ecfg.d_model = 8;
  ecfg.d_ffn = 16;
  ecfg.max_len = 16;
  ecfg.vocab_size = vocab.size();
  const auto params = EncoderParams::init(ecfg, 3);
  RetrievalConfig cfg;
  cfg.d = 8;
  cfg.chunk_len = 2;
  const auto store = index_corpus(docs, encoder_embedder(ecfg, params, vocab), cfg);
  EXPECT_EQ(store.size(), 3u);
  for (const auto& row : store.rows()) EXPECT_TRUE(row.values.allFinite());
}

TEST(Store, RejectsBadRows) {
  VectorStore store(2);
  EXPECT_THROW(store.add({Vector(Vector::Zero(3)), "x", {}}), Error);
  Vector nan = Vector::Zero(2);
  nan(0) = std::nan("");
  EXPECT_THROW(store.add({nan, "x", {}}), Error);
  store.add({Vector(Vector::Zero(2)), "x", {}});
  EXPECT_THROW(store.add({Vector(Vector::Zero(2)), "x", {}}), Error);
}

TEST(Search, ExcludesIdenticalText) {
  VectorStore store(2);
  Vector q(2);
  q << 1.0, 1.0;
  store.add({q, "self", text_hash(u32("甲乙"))});
  Vector far(2);
  far << 5.0, 5.0;
  store.add({far, "other", text_hash(u32("丙丁"))});
  const auto hits = store.search(q, text_hash(u32("甲乙")), 20);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].chunk_id, "other");
}

TEST(Search, FewerEligibleThanK) {
  Rng rng(4);
  const auto store = random_store(rng, 3, 4);
  EXPECT_EQ(store.search(random_vector(rng, 4), sha256("query"), 20).size(), 3u);
}

TEST(Search, TiesKeepInsertionOrder) {
  VectorStore store(1);
  for (int i = 0; i < 5; ++i) store.add({Vector(Vector::Ones(1)), "c" + std::to_string(i), hash_of(i)});
  const auto hits = store.search(Vector(Vector::Zero(1)), sha256("q"), 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].chunk_id, "c0");
  EXPECT_EQ(hits[1].chunk_id, "c1");
  EXPECT_EQ(hits[2].chunk_id, "c2");
}

TEST(Search, MatchesFullSortOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto store = random_store(rng, 500, 8);
    const auto self = rng.below(500);
    const Vector q = store.rows()[self].values;
    const auto hits = store.search(q, hash_of(self), 20);
    EXPECT_EQ(hits, oracle::brute_search(store, q, hash_of(self), 20));
    for (const auto& h : hits) EXPECT_NE(h.chunk_id, "c" + std::to_string(self));
  }
}

TEST(Search, QuantisedValuesWithManyTies) {
  Rng rng(6);
  VectorStore store(2);
  for (std::size_t i = 0; i < 300; ++i) {
    Vector v(2);
    v << static_cast<double>(rng.below(3)), static_cast<double>(rng.below(3));
    store.add({v, "c" + std::to_string(i), hash_of(i % 7)});
  }
  const Vector q = Vector::Zero(2);
  EXPECT_EQ(store.search(q, hash_of(2), 20), oracle::brute_search(store, q, hash_of(2), 20));
}

TEST(Search, ThreadedScanEqualsSerial) {
  Rng rng(7);
  const auto store = random_store(rng, 3000, 16);
  const Vector q = random_vector(rng, 16);
  EXPECT_EQ(store.search(q, sha256("q"), 20, 4), store.search(q, sha256("q"), 20, 1));
}

TEST(Search, QueryDimensionMismatch) {
  Rng rng(8);
  const auto store = random_store(rng, 3, 4);
  EXPECT_THROW(store.search(Vector(Vector::Zero(3)), sha256("q"), 1), Error);
}

TEST(StoreFile, RoundTrip) {
  Rng rng(9);
  const auto store = random_store(rng, 50, 6);
  const auto bytes = save_store(store);
  const auto back = load_store(bytes);
  EXPECT_EQ(back, store);
  EXPECT_EQ(save_store(back), bytes);
  EXPECT_NO_THROW(load_store(bytes, 6));
  EXPECT_THROW(load_store(bytes, 7), Error);
}

TEST(StoreFile, EmptyStoreRoundTrips) {
  const VectorStore store(5);
  const auto back = load_store(save_store(store));
  EXPECT_EQ(back, store);
  EXPECT_EQ(back.dimension(), 5u);
}

TEST(StoreFile, HeaderLayout) {
  const auto bytes = save_store(VectorStore(3));
  ASSERT_EQ(bytes.size(), 32u);
  EXPECT_EQ(bytes.substr(0, 8), std::string("RGNRVEC\0", 8));
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[16], 3);
}

TEST(StoreFile, CorruptionDetected) {
  Rng rng(10);
  const auto bytes = save_store(random_store(rng, 4, 3));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(load_store(bad_magic), Error);
  auto bad_version = bytes;
  bad_version[8] = 2;
  EXPECT_THROW(load_store(bad_version), Error);
  EXPECT_THROW(load_store(bytes.substr(0, bytes.size() - 1)), Error);
  EXPECT_THROW(load_store(bytes + "z"), Error);
}

}  // namespace
}  // namespace ragner
