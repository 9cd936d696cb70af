#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ragner/binary_io.hpp"
#include "ragner/digest.hpp"
#include "ragner/encoder.hpp"
#include "ragner/error.hpp"
#include "ragner/textdata.hpp"

namespace ragner {

struct RetrievalConfig {
  std::size_t k = 20;
  std::size_t d = 768;
  std::size_t chunk_len = 510;

  void validate() const {
    require(k >= 1, "retrieval k must be >= 1");
    require(d >= 1, "embedding dimension must be >= 1");
    require(chunk_len >= 1, "chunk length must be >= 1");
  }
};

struct EmbeddingVector {
  Vector values;
  std::string chunk_id;
  Digest text_hash{};

  friend bool operator==(const EmbeddingVector& a, const EmbeddingVector& b) {
    return a.chunk_id == b.chunk_id && a.text_hash == b.text_hash && a.values.size() == b.values.size() &&
           a.values == b.values;
  }
};

inline Digest text_hash(std::u32string_view text) { return sha256(utf8::encode(text)); }

inline double l2_distance(std::span<const double> t, std::span<const double> c) {
  if (t.size() != c.size()) {
    fail(ErrorCode::invalid_argument,
         "dimension mismatch: " + std::to_string(t.size()) + " vs " + std::to_string(c.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double diff = t[i] - c[i];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

inline double l2_distance(const Vector& t, const Vector& c) {
  return l2_distance(std::span<const double>(t.data(), static_cast<std::size_t>(t.size())),
                     std::span<const double>(c.data(), static_cast<std::size_t>(c.size())));
}

struct SearchHit {
  std::string chunk_id;
  double distance = 0.0;

  friend bool operator==(const SearchHit&, const SearchHit&) = default;
};

// Flat exact-search store. Rows keep insertion order; chunk ids are unique.
class VectorStore {
 public:
  explicit VectorStore(std::size_t dimension = 0) : dim_(dimension) {}

  std::size_t dimension() const { return dim_; }
  std::size_t size() const { return rows_.size(); }
  const std::vector<EmbeddingVector>& rows() const { return rows_; }

  void add(EmbeddingVector row) {
    if (static_cast<std::size_t>(row.values.size()) != dim_) {
      fail(ErrorCode::invalid_argument, "embedding of dimension " + std::to_string(row.values.size()) +
                                            " does not match store dimension " + std::to_string(dim_));
    }
    require(row.values.allFinite(), "embedding for '" + row.chunk_id + "' has non-finite values");
    if (!ids_.insert(row.chunk_id).second) fail(ErrorCode::invalid_argument, "duplicate chunk id '" + row.chunk_id + "'");
    rows_.push_back(std::move(row));
  }

  // Nearest rows by L2 distance, skipping rows whose text hash equals the
  // query's. Ties keep insertion order. `threads` splits the distance scan.
  std::vector<SearchHit> search(const Vector& query, const Digest& query_hash, std::size_t k,
                                std::size_t threads = 1) const {
    if (static_cast<std::size_t>(query.size()) != dim_) {
      fail(ErrorCode::invalid_argument, "query dimension " + std::to_string(query.size()) +
                                            " does not match store dimension " + std::to_string(dim_));
    }
    std::vector<double> dist(rows_.size());
    auto scan = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) dist[i] = l2_distance(query, rows_[i].values);
    };
    threads = std::max<std::size_t>(1, std::min(threads, rows_.size() / 256 + 1));
    if (threads == 1) {
      scan(0, rows_.size());
    } else {
      std::vector<std::thread> pool;
      const std::size_t step = (rows_.size() + threads - 1) / threads;
      for (std::size_t lo = 0; lo < rows_.size(); lo += step) pool.emplace_back(scan, lo, std::min(rows_.size(), lo + step));
      for (auto& t : pool) t.join();
    }

    std::vector<std::size_t> eligible;
    eligible.reserve(rows_.size());
    for (std::size_t i = 0; i < rows_.size(); ++i)
      if (rows_[i].text_hash != query_hash) eligible.push_back(i);
    const auto take = std::min(k, eligible.size());
    auto closer = [&](std::size_t a, std::size_t b) { return dist[a] != dist[b] ? dist[a] < dist[b] : a < b; };
    std::partial_sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(take), eligible.end(), closer);

    std::vector<SearchHit> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) out.push_back({rows_[eligible[i]].chunk_id, dist[eligible[i]]});
    return out;
  }

  friend bool operator==(const VectorStore& a, const VectorStore& b) { return a.dim_ == b.dim_ && a.rows_ == b.rows_; }

 private:
  std::size_t dim_;
  std::vector<EmbeddingVector> rows_;
  std::unordered_set<std::string> ids_;
};

struct Chunk {
  std::string id;  // "<doc_id>:<offset>"
  std::u32string text;
};

inline std::vector<Chunk> chunk_corpus(std::span<const Document> docs, std::size_t chunk_len) {
  std::vector<Chunk> out;
  for (const auto& doc : docs) {
    for (auto& s : segment(doc, chunk_len)) out.push_back({doc.id + ":" + std::to_string(s.offset), std::move(s.tokens)});
  }
  return out;
}

using Embedder = std::function<Vector(std::u32string_view)>;

// Mean-pooled encoder states over the raw character ids.
inline Embedder encoder_embedder(const EncoderConfig& cfg, const EncoderParams& params, const Vocabulary& vocab) {
  return [&cfg, &params, &vocab](std::u32string_view text) {
    const auto ids = encode_ids(text, vocab);
    const Mask mask(ids.size(), 1);
    return pool_mean(encode_forward(ids, mask, params, cfg, false, 0));
  };
}

inline VectorStore index_corpus(std::span<const Document> docs, const Embedder& embed, const RetrievalConfig& cfg) {
  cfg.validate();
  VectorStore store(cfg.d);
  for (auto& chunk : chunk_corpus(docs, cfg.chunk_len)) {
    EmbeddingVector row;
    row.values = embed(chunk.text);
    if (static_cast<std::size_t>(row.values.size()) != cfg.d) {
      fail(ErrorCode::invalid_argument, "embedder produced dimension " + std::to_string(row.values.size()) +
                                            ", expected " + std::to_string(cfg.d));
    }
    row.chunk_id = std::move(chunk.id);
    row.text_hash = text_hash(chunk.text);
    store.add(std::move(row));
  }
  return store;
}

inline constexpr std::string_view kStoreMagic{"RGNRVEC\0", 8};
inline constexpr std::uint64_t kStoreVersion = 1;

inline std::string save_store(const VectorStore& store) {
  bin::Writer w;
  w.bytes(kStoreMagic);
  w.u64(kStoreVersion);
  w.u64(store.dimension());
  w.u64(store.size());
  for (const auto& row : store.rows()) {
    w.str(row.chunk_id);
    w.bytes(std::string_view(reinterpret_cast<const char*>(row.text_hash.data()), row.text_hash.size()));
    for (Eigen::Index i = 0; i < row.values.size(); ++i) w.f64(row.values(i));
  }
  return w.buffer();
}

inline VectorStore load_store(std::string_view bytes, std::optional<std::size_t> expected_dim = std::nullopt) {
  bin::Reader rd(bytes);
  if (rd.bytes(8) != kStoreMagic) fail(ErrorCode::format, "bad vector store magic");
  const auto version = rd.u64();
  if (version != kStoreVersion) fail(ErrorCode::format, "unsupported vector store version " + std::to_string(version));
  const auto d = rd.u64();
  if (d == 0 || (expected_dim && d != *expected_dim)) {
    fail(ErrorCode::format, "vector store dimension " + std::to_string(d) + " does not match expectation");
  }
  const auto n = rd.u64();
  VectorStore store(d);
  for (std::uint64_t r = 0; r < n; ++r) {
    EmbeddingVector row;
    row.chunk_id = rd.str();
    const auto h = rd.bytes(32);
    std::copy(h.begin(), h.end(), reinterpret_cast<char*>(row.text_hash.data()));
    row.values.resize(static_cast<Eigen::Index>(d));
    for (std::uint64_t i = 0; i < d; ++i) row.values(static_cast<Eigen::Index>(i)) = rd.f64();
    try {
      store.add(std::move(row));
    } catch (const Error& e) {
      fail(ErrorCode::format, std::string("corrupt vector store row: ") + e.what());
    }
  }
  if (!rd.at_end()) fail(ErrorCode::format, "trailing bytes in vector store");
  return store;
}

}  // namespace ragner
