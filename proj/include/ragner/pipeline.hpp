#pragma once

#include <algorithm>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ragner/binary_io.hpp"
#include "ragner/digest.hpp"
#include "ragner/evaluation.hpp"
#include "ragner/retrieval.hpp"
#include "ragner/summarizer.hpp"
#include "ragner/textdata.hpp"
#include "ragner/toy.hpp"
#include "ragner/training.hpp"

// File-level pipeline stages driven by one JSON configuration.
namespace ragner::pipeline {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct Paths {
  std::string train, dev, test, pretrain;
  std::string corpus_dir;
  std::string work_dir;
  std::string index;           // default <work_dir>/index.bin
  std::string cache;           // default <work_dir>/summary-cache.jsonl
  std::string checkpoint_dir;  // default <work_dir>/checkpoints
};

struct Config {
  std::string profile = "A";
  std::string pretrain_profile = "B";
  Paths paths;
  std::size_t segment_len = 510;
  std::size_t vocab_size = 65536;
  RetrievalConfig retrieval;
  EncoderConfig embedder;  // d_model follows retrieval.d
  BackendSpec backend;
  std::size_t max_in_flight = 4;
  OptimizerConfig optimizer = OptimizerConfig::fine_tuning();
  OptimizerConfig pretrain_optimizer = OptimizerConfig::pretraining();
  EncoderConfig encoder;
  HeadConfig head;
  std::size_t epochs = 5;
  std::size_t pretrain_epochs = 2;
  bool use_context = true;
  bool use_pretraining_phase = true;
  DecodeMode decode = DecodeMode::viterbi;
  std::uint64_t seed = 42;
  std::vector<std::uint64_t> seeds{42, 123, 2025};
  std::size_t threads = 1;
  bool verbose = false;

  Config() {
    embedder.n_layers = 1;
    embedder.n_heads = 4;
    embedder.d_ffn = 1536;
  }

  TagProfile tag_profile() const { return TagProfile::by_name(profile); }
  TagProfile aux_profile() const { return TagProfile::by_name(pretrain_profile); }
  std::string run_dir(std::uint64_t s) const { return (fs::path(paths.checkpoint_dir) / ("seed" + std::to_string(s))).string(); }
  std::string split_path(const std::string& split) const;
  std::string retrieval_path(const std::string& split) const { return (fs::path(paths.work_dir) / ("retrieval-" + split + ".jsonl")).string(); }
  std::string summaries_path(const std::string& split) const { return (fs::path(paths.work_dir) / ("summaries-" + split + ".jsonl")).string(); }
  std::string embedder_path() const { return paths.index + ".embedder"; }
};

inline std::string Config::split_path(const std::string& split) const {
  if (split == "train") return paths.train;
  if (split == "dev") return paths.dev;
  if (split == "test") return paths.test;
  fail(ErrorCode::invalid_argument, "unknown split '" + split + "' (expected train, dev or test)");
}

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::parse, where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(ErrorCode::parse, "unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::parse, "bad value for '" + std::string(key) + "' in " + where);
  }
}

inline void read_optimizer(const nlohmann::json& j, OptimizerConfig& o, const std::string& where) {
  check_keys(j, {"epsilon", "encoder_lr", "head_lr", "encoder_wd", "head_wd", "beta1", "beta2", "warmup_steps",
                 "batch_size", "dropout", "max_input_len", "clip_norm"},
             where);
  read(j, "epsilon", o.epsilon, where);
  read(j, "encoder_lr", o.encoder_lr, where);
  read(j, "head_lr", o.head_lr, where);
  read(j, "encoder_wd", o.encoder_wd, where);
  read(j, "head_wd", o.head_wd, where);
  read(j, "beta1", o.beta1, where);
  read(j, "beta2", o.beta2, where);
  read(j, "warmup_steps", o.warmup_steps, where);
  read(j, "batch_size", o.batch_size, where);
  read(j, "dropout", o.dropout, where);
  read(j, "max_input_len", o.max_input_len, where);
  read(j, "clip_norm", o.clip_norm, where);
}

inline void read_encoder_shape(const nlohmann::json& j, EncoderConfig& e, const std::string& where) {
  check_keys(j, {"n_layers", "n_heads", "d_model", "d_ffn"}, where);
  read(j, "n_layers", e.n_layers, where);
  read(j, "n_heads", e.n_heads, where);
  read(j, "d_model", e.d_model, where);
  read(j, "d_ffn", e.d_ffn, where);
}

inline Json encoder_shape_json(const EncoderConfig& e) {
  return {{"n_layers", e.n_layers}, {"n_heads", e.n_heads}, {"d_model", e.d_model}, {"d_ffn", e.d_ffn}};
}

inline std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal().string();
}

}  // namespace detail

// Relative paths are taken relative to `base_dir`.
inline Config parse_config(const nlohmann::json& j, const fs::path& base_dir) {
  using detail::read;
  Config c;
  detail::check_keys(j,
                     {"profile", "pretrain_profile", "paths", "segment_len", "vocab_size", "retrieval", "embedder",
                      "backend", "optimizer", "pretrain_optimizer", "encoder", "head", "epochs", "pretrain_epochs",
                      "use_context", "use_pretraining_phase", "decode", "seed", "seeds", "threads"},
                     "config");
  read(j, "profile", c.profile, "config");
  read(j, "pretrain_profile", c.pretrain_profile, "config");
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::check_keys(p, {"train", "dev", "test", "pretrain", "corpus_dir", "work_dir", "index", "cache", "checkpoint_dir"},
                       "paths");
    read(p, "train", c.paths.train, "paths");
    read(p, "dev", c.paths.dev, "paths");
    read(p, "test", c.paths.test, "paths");
    read(p, "pretrain", c.paths.pretrain, "paths");
    read(p, "corpus_dir", c.paths.corpus_dir, "paths");
    read(p, "work_dir", c.paths.work_dir, "paths");
    read(p, "index", c.paths.index, "paths");
    read(p, "cache", c.paths.cache, "paths");
    read(p, "checkpoint_dir", c.paths.checkpoint_dir, "paths");
  }
  read(j, "segment_len", c.segment_len, "config");
  read(j, "vocab_size", c.vocab_size, "config");
  if (j.contains("retrieval")) {
    const auto& r = j.at("retrieval");
    detail::check_keys(r, {"k", "d", "chunk_len"}, "retrieval");
    read(r, "k", c.retrieval.k, "retrieval");
    read(r, "d", c.retrieval.d, "retrieval");
    read(r, "chunk_len", c.retrieval.chunk_len, "retrieval");
  }
  if (j.contains("embedder")) {
    const auto& e = j.at("embedder");
    detail::check_keys(e, {"n_layers", "n_heads", "d_ffn"}, "embedder");
    read(e, "n_layers", c.embedder.n_layers, "embedder");
    read(e, "n_heads", c.embedder.n_heads, "embedder");
    read(e, "d_ffn", c.embedder.d_ffn, "embedder");
  }
  if (j.contains("backend")) {
    const auto& b = j.at("backend");
    detail::check_keys(b, {"kind", "endpoint", "model", "auth_env", "retry_limit", "timeout_seconds", "backoff_seconds",
                           "max_in_flight"},
                       "backend");
    std::string kind = "mock";
    read(b, "kind", kind, "backend");
    if (kind != "mock" && kind != "remote") fail(ErrorCode::parse, "backend kind must be 'mock' or 'remote'");
    c.backend.kind = kind == "mock" ? BackendSpec::Kind::mock : BackendSpec::Kind::remote;
    read(b, "endpoint", c.backend.endpoint, "backend");
    read(b, "model", c.backend.model, "backend");
    read(b, "auth_env", c.backend.auth_env, "backend");
    read(b, "retry_limit", c.backend.retry_limit, "backend");
    read(b, "timeout_seconds", c.backend.timeout_seconds, "backend");
    read(b, "backoff_seconds", c.backend.backoff_seconds, "backend");
    read(b, "max_in_flight", c.max_in_flight, "backend");
  }
  if (j.contains("optimizer")) detail::read_optimizer(j.at("optimizer"), c.optimizer, "optimizer");
  if (j.contains("pretrain_optimizer")) detail::read_optimizer(j.at("pretrain_optimizer"), c.pretrain_optimizer, "pretrain_optimizer");
  if (j.contains("encoder")) detail::read_encoder_shape(j.at("encoder"), c.encoder, "encoder");
  if (j.contains("head")) {
    const auto& h = j.at("head");
    detail::check_keys(h, {"hidden", "n_layers"}, "head");
    read(h, "hidden", c.head.hidden, "head");
    read(h, "n_layers", c.head.n_layers, "head");
  }
  read(j, "epochs", c.epochs, "config");
  read(j, "pretrain_epochs", c.pretrain_epochs, "config");
  read(j, "use_context", c.use_context, "config");
  read(j, "use_pretraining_phase", c.use_pretraining_phase, "config");
  std::string decode = "viterbi";
  read(j, "decode", decode, "config");
  if (decode != "viterbi" && decode != "argmax") fail(ErrorCode::parse, "decode must be 'viterbi' or 'argmax'");
  c.decode = decode == "viterbi" ? DecodeMode::viterbi : DecodeMode::argmax;
  read(j, "seed", c.seed, "config");
  read(j, "seeds", c.seeds, "config");
  read(j, "threads", c.threads, "config");

  auto& p = c.paths;
  for (auto* s : {&p.train, &p.dev, &p.test, &p.pretrain, &p.corpus_dir, &p.work_dir, &p.index, &p.cache, &p.checkpoint_dir})
    *s = detail::resolve(base_dir, *s);
  if (p.work_dir.empty()) p.work_dir = detail::resolve(base_dir, "work");
  if (p.index.empty()) p.index = (fs::path(p.work_dir) / "index.bin").string();
  if (p.cache.empty()) p.cache = (fs::path(p.work_dir) / "summary-cache.jsonl").string();
  if (p.checkpoint_dir.empty()) p.checkpoint_dir = (fs::path(p.work_dir) / "checkpoints").string();
  return c;
}

inline Config load_config(const std::string& path) {
  if (!fs::exists(path)) fail(ErrorCode::io, "config file not found: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bin::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::parse, path + ": " + e.what());
  }
  return parse_config(j, fs::absolute(path).parent_path());
}

// Resolved configuration, as echoed into run manifests. Secrets are only
// referenced by environment variable name.
inline Json config_json(const Config& c) {
  const auto& p = c.paths;
  return {{"profile", c.profile},
          {"pretrain_profile", c.pretrain_profile},
          {"paths",
           {{"train", p.train}, {"dev", p.dev}, {"test", p.test}, {"pretrain", p.pretrain}, {"corpus_dir", p.corpus_dir},
            {"work_dir", p.work_dir}, {"index", p.index}, {"cache", p.cache}, {"checkpoint_dir", p.checkpoint_dir}}},
          {"segment_len", c.segment_len},
          {"vocab_size", c.vocab_size},
          {"retrieval", {{"k", c.retrieval.k}, {"d", c.retrieval.d}, {"chunk_len", c.retrieval.chunk_len}}},
          {"embedder", {{"n_layers", c.embedder.n_layers}, {"n_heads", c.embedder.n_heads}, {"d_ffn", c.embedder.d_ffn}}},
          {"backend",
           {{"kind", c.backend.kind == BackendSpec::Kind::mock ? "mock" : "remote"}, {"endpoint", c.backend.endpoint},
            {"model", c.backend.model}, {"auth_env", c.backend.auth_env}, {"retry_limit", c.backend.retry_limit},
            {"timeout_seconds", c.backend.timeout_seconds}, {"backoff_seconds", c.backend.backoff_seconds},
            {"max_in_flight", c.max_in_flight}}},
          {"optimizer", optimizer_json(c.optimizer)},
          {"pretrain_optimizer", optimizer_json(c.pretrain_optimizer)},
          {"encoder", detail::encoder_shape_json(c.encoder)},
          {"head", {{"hidden", c.head.hidden}, {"n_layers", c.head.n_layers}}},
          {"epochs", c.epochs},
          {"pretrain_epochs", c.pretrain_epochs},
          {"use_context", c.use_context},
          {"use_pretraining_phase", c.use_pretraining_phase},
          {"decode", c.decode == DecodeMode::viterbi ? "viterbi" : "argmax"},
          {"seed", c.seed},
          {"seeds", c.seeds},
          {"threads", c.threads}};
}

// Backend URL and model name from the environment override the file.
inline void apply_environment(Config& c) {
  if (const char* url = std::getenv("RAGNER_BACKEND_URL"); url && *url) c.backend.endpoint = url;
  if (const char* model = std::getenv("RAGNER_MODEL"); model && *model) c.backend.model = model;
}

inline void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) fail(ErrorCode::invalid_argument, what + " path is not configured");
  if (!fs::is_regular_file(path)) fail(ErrorCode::io, what + " not found: " + path);
}

inline void require_dir(const std::string& path, const std::string& what) {
  if (path.empty()) fail(ErrorCode::invalid_argument, what + " path is not configured");
  if (!fs::is_directory(path)) fail(ErrorCode::io, what + " not found: " + path);
}

inline void write_output(const std::string& path, std::string_view data) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  bin::write_file(path, data);
}

inline std::vector<Sequence> load_bio(const std::string& path, const TagProfile& profile) {
  require_file(path, "BIO file");
  try {
    return parse_bio(bin::read_file(path), profile);
  } catch (const Error& e) {
    fail(e.code(), path + ": " + e.what());
  }
}

// Every *.txt file of a directory, ordered by file name; the document id
// is the file stem.
inline std::vector<Document> load_corpus(const std::string& dir) {
  require_dir(dir, "corpus directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<Document> docs;
  for (const auto& f : files) {
    try {
      docs.push_back({f.stem().string(), utf8::decode(bin::read_file(f.string()))});
    } catch (const Error& e) {
      fail(e.code(), f.string() + ": " + e.what());
    }
  }
  return docs;
}

inline std::string jsonl(const std::vector<Json>& rows) {
  std::string out;
  for (const auto& r : rows) out += r.dump() + "\n";
  return out;
}

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  require_file(path, "JSONL file");
  std::vector<nlohmann::json> rows;
  const auto text = bin::read_file(path);
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    const auto line = std::string_view(text).substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error&) {
      fail(ErrorCode::parse, path + ":" + std::to_string(line_no) + ": not JSON");
    }
  }
  return rows;
}

// ---- segment ---------------------------------------------------------------

// Plain text input becomes JSONL segments {doc_id, offset, text}; a BIO
// input is re-segmented into BIO with tags cut at the same boundaries.
inline std::size_t segment_file(const std::string& in, const std::string& out, std::size_t max_len, bool bio,
                                const TagProfile& profile) {
  require_file(in, "input");
  std::size_t count = 0;
  if (bio) {
    std::vector<Sequence> segs;
    for (const auto& s : load_bio(in, profile))
      for (auto& part : segment(s, max_len)) segs.push_back(std::move(part));
    count = segs.size();
    write_output(out, serialize_bio(segs));
  } else {
    const Document doc{fs::path(in).stem().string(), utf8::decode(bin::read_file(in))};
    std::vector<Json> rows;
    for (const auto& s : segment(doc, max_len))
      rows.push_back({{"doc_id", s.doc_id}, {"offset", s.offset}, {"text", s.text()}});
    count = rows.size();
    write_output(out, jsonl(rows));
  }
  return count;
}

// ---- build-index / retrieve ------------------------------------------------

struct StoredEmbedder {
  EncoderConfig cfg;
  EncoderParams params;
  Vocabulary vocab;

  Vector embed(std::u32string_view text) const {
    const auto ids = encode_ids(text, vocab);
    return pool_mean(encode_forward(ids, Mask(ids.size(), 1), params, cfg, false, 0));
  }
};

inline constexpr std::string_view kEmbedderMagic{"RGNREMB\0", 8};

inline std::string save_embedder(const StoredEmbedder& e) {
  bin::Writer w;
  w.bytes(kEmbedderMagic);
  write_encoder(w, e.cfg, e.params);
  w.str(e.vocab.serialize());
  return w.buffer();
}

inline StoredEmbedder load_embedder(const std::string& path) {
  require_file(path, "embedder");
  const auto bytes = bin::read_file(path);
  bin::Reader rd(bytes);
  if (rd.bytes(8) != kEmbedderMagic) fail(ErrorCode::format, path + ": bad embedder magic");
  StoredEmbedder e;
  std::tie(e.cfg, e.params) = read_encoder(rd);
  e.vocab = Vocabulary::parse(rd.str());
  if (!rd.at_end()) fail(ErrorCode::format, path + ": trailing bytes");
  return e;
}

struct IndexSummary {
  std::size_t documents = 0;
  std::size_t rows = 0;
};

// Embeds every corpus chunk with a seeded, mean-pooled encoder whose width
// is the retrieval dimension. The store and the embedder are saved side by
// side so queries use the same mapping.
inline IndexSummary build_index(const Config& c) {
  c.retrieval.validate();
  const auto docs = load_corpus(c.paths.corpus_dir);
  StoredEmbedder e;
  e.vocab = build_vocab(docs, c.vocab_size);
  e.cfg = c.embedder;
  e.cfg.d_model = c.retrieval.d;
  e.cfg.vocab_size = e.vocab.size();
  e.cfg.max_len = std::max(c.retrieval.chunk_len, c.segment_len);
  e.cfg.dropout_rate = 0.0;
  e.cfg.validate();
  e.params = EncoderParams::init(e.cfg, mix_seed(c.seed, 0x454d42));
  const auto chunks = chunk_corpus(docs, c.retrieval.chunk_len);
  std::vector<Vector> vecs(chunks.size());
  ragner::detail::parallel_for(chunks.size(), c.threads, [&](std::size_t i) { vecs[i] = e.embed(chunks[i].text); });
  VectorStore store(c.retrieval.d);
  for (std::size_t i = 0; i < chunks.size(); ++i) store.add({std::move(vecs[i]), chunks[i].id, text_hash(chunks[i].text)});
  write_output(c.paths.index, save_store(store));
  write_output(c.embedder_path(), save_embedder(e));
  return {docs.size(), store.size()};
}

// One JSONL row per sequence: {index, doc_id, hits: [{chunk_id, distance}]}.
inline std::size_t retrieve(const Config& c, const std::string& in, const std::string& out) {
  const auto seqs = load_bio(in, c.tag_profile());
  require_file(c.paths.index, "vector store");
  const auto store = load_store(bin::read_file(c.paths.index), c.retrieval.d);
  const auto e = load_embedder(c.embedder_path());
  std::vector<std::vector<SearchHit>> hits(seqs.size());
  ragner::detail::parallel_for(seqs.size(), c.threads, [&](std::size_t i) {
    if (seqs[i].tokens.empty()) return;
    hits[i] = store.search(e.embed(seqs[i].tokens), text_hash(seqs[i].tokens), c.retrieval.k);
  });
  std::vector<Json> rows;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    Json h = Json::array();
    for (const auto& hit : hits[i]) h.push_back({{"chunk_id", hit.chunk_id}, {"distance", hit.distance}});
    rows.push_back({{"index", i}, {"doc_id", seqs[i].doc_id}, {"hits", std::move(h)}});
  }
  write_output(out, jsonl(rows));
  return rows.size();
}

// ---- summarize ---------------------------------------------------------------

class CountingBackend : public Backend {
 public:
  explicit CountingBackend(Backend& inner) : inner_(inner) {}
  std::string complete(const SummaryRequest& req, const Prompt& prompt) override {
    ++calls_;
    return inner_.complete(req, prompt);
  }
  std::size_t calls() const { return calls_.load(); }

 private:
  Backend& inner_;
  std::atomic<std::size_t> calls_{0};
};

inline std::size_t summaries_per_example(const std::string& split) { return split == "test" ? 1 : kTrainSummaries; }

struct SummarizeOutcome {
  std::size_t sequences = 0;
  std::size_t backend_calls = 0;
};

// One JSONL row per sequence: {index, summaries: [...]}.
inline SummarizeOutcome summarize_split(const Config& c, const std::string& split, const std::string& in,
                                        const std::string& retrieval, const std::string& out) {
  const auto seqs = load_bio(in, c.tag_profile());
  const auto rows = read_jsonl(retrieval);
  if (rows.size() != seqs.size()) {
    fail(ErrorCode::format, retrieval + " has " + std::to_string(rows.size()) + " rows for " + std::to_string(seqs.size()) +
                                " sequences; rerun retrieve");
  }
  std::unordered_map<std::string, std::u32string> chunk_text;
  if (!c.paths.corpus_dir.empty())
    for (auto& ch : chunk_corpus(load_corpus(c.paths.corpus_dir), c.retrieval.chunk_len)) chunk_text.emplace(ch.id, std::move(ch.text));

  std::vector<SummaryRequest> reqs;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    SummaryRequest r;
    r.target = seqs[i].tokens;
    r.profile = c.tag_profile();
    r.n_summaries = summaries_per_example(split);
    for (const auto& h : rows[i].at("hits")) {
      const auto id = h.at("chunk_id").get<std::string>();
      auto it = chunk_text.find(id);
      if (it == chunk_text.end()) fail(ErrorCode::format, retrieval + ": unknown chunk '" + id + "'; rebuild the index");
      r.contexts.push_back(it->second);
    }
    reqs.push_back(std::move(r));
  }

  std::unique_ptr<Backend> inner;
  if (c.backend.kind == BackendSpec::Kind::mock) {
    inner = std::make_unique<MockBackend>(c.seed);
  } else {
    auto spec = c.backend;
    spec.verbose = c.verbose;
    inner = std::make_unique<RemoteBackend>(spec);
  }
  CountingBackend backend(*inner);
  const auto cache_parent = fs::path(c.paths.cache).parent_path();
  if (!cache_parent.empty()) fs::create_directories(cache_parent);
  SummaryCache cache(c.paths.cache);
  const auto results = summarize_all(reqs, backend, cache, c.max_in_flight);
  std::vector<Json> out_rows;
  for (std::size_t i = 0; i < results.size(); ++i) {
    Json texts = Json::array();
    for (const auto& s : results[i]) texts.push_back(s.text);
    out_rows.push_back({{"index", i}, {"summaries", std::move(texts)}});
  }
  write_output(out, jsonl(out_rows));
  return {results.size(), backend.calls()};
}

inline std::vector<std::vector<std::u32string>> load_summaries(const std::string& path, std::size_t expected_rows) {
  const auto rows = read_jsonl(path);
  if (rows.size() != expected_rows) {
    fail(ErrorCode::format, path + " has " + std::to_string(rows.size()) + " rows for " + std::to_string(expected_rows) +
                                " sequences; rerun summarize");
  }
  std::vector<std::vector<std::u32string>> out;
  for (const auto& r : rows) {
    out.emplace_back();
    for (const auto& s : r.at("summaries")) out.back().push_back(utf8::decode(s.get<std::string>()));
  }
  return out;
}

// ---- train / predict / ablate ------------------------------------------------

inline std::string file_digest(const std::string& path) { return to_hex(sha256(bin::read_file(path))); }

// Labelled splits plus, when context is on, their summary files.
struct Workspace {
  TrainInputs inputs;
  std::vector<Sequence> test;
  std::deque<StaticContexts> contexts;  // train, dev, test
  Json digests = Json::object();

  Workspace() = default;
  Workspace(const Workspace&) = delete;
  Workspace& operator=(const Workspace&) = delete;
};

inline void load_workspace(const Config& c, Workspace& w, bool with_test) {
  const auto profile = c.tag_profile();
  w.inputs.profile = profile;
  w.inputs.train.seqs = load_bio(c.paths.train, profile);
  w.digests["train"] = file_digest(c.paths.train);
  if (!c.paths.dev.empty()) {
    w.inputs.dev.seqs = load_bio(c.paths.dev, profile);
    w.digests["dev"] = file_digest(c.paths.dev);
  }
  if (with_test) {
    w.test = load_bio(c.paths.test, profile);
    w.digests["test"] = file_digest(c.paths.test);
  }
  if (!c.paths.pretrain.empty()) {
    PretrainPhase aux;
    aux.profile = c.aux_profile();
    aux.data.seqs = load_bio(c.paths.pretrain, aux.profile);
    w.digests["pretrain"] = file_digest(c.paths.pretrain);
    w.inputs.pretrain = std::move(aux);
  }

  std::vector<Document> docs;
  for (const auto* split : {&w.inputs.train.seqs, &w.inputs.dev.seqs})
    for (const auto& s : *split) docs.push_back({s.doc_id, s.tokens});
  if (w.inputs.pretrain)
    for (const auto& s : w.inputs.pretrain->data.seqs) docs.push_back({s.doc_id, s.tokens});
  if (c.use_context && !c.paths.corpus_dir.empty()) {
    auto corpus = load_corpus(c.paths.corpus_dir);
    docs.insert(docs.end(), corpus.begin(), corpus.end());
  }
  w.inputs.vocab = build_vocab(docs, c.vocab_size);

  if (c.use_context) {
    auto attach = [&](const std::string& split, Split& target, const std::vector<Sequence>& seqs) {
      const auto path = c.summaries_path(split);
      if (!fs::exists(path)) fail(ErrorCode::io, "summaries not found: " + path + " (run summarize --split " + split + ")");
      w.contexts.emplace_back(load_summaries(path, seqs.size()));
      w.digests["summaries-" + split] = file_digest(path);
      target.contexts = &w.contexts.back();
    };
    attach("train", w.inputs.train, w.inputs.train.seqs);
    if (!w.inputs.dev.seqs.empty()) attach("dev", w.inputs.dev, w.inputs.dev.seqs);
  }
}

inline TrainRun make_run(const Config& c, std::uint64_t seed) {
  TrainRun run;
  run.seed = seed;
  run.optimizer = c.optimizer;
  run.pretrain_optimizer = c.pretrain_optimizer;
  run.use_context = c.use_context;
  run.use_pretraining_phase = c.use_pretraining_phase;
  run.epochs = c.epochs;
  run.pretrain_epochs = c.pretrain_epochs;
  run.encoder = c.encoder;
  run.head = c.head;
  run.decode = c.decode;
  run.threads = c.threads;
  run.verbose = c.verbose;
  return run;
}

// Removes "<epoch>-<f1>.ckpt" files left by an earlier run in `dir`.
inline void clear_checkpoints(const std::string& dir) {
  if (!fs::is_directory(dir)) return;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    const auto dash = name.find('-');
    if (entry.is_regular_file() && name.ends_with(".ckpt") && dash != std::string::npos && dash > 0 &&
        std::all_of(name.begin(), name.begin() + static_cast<std::ptrdiff_t>(dash), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); })) {
      fs::remove(entry.path());
    }
  }
}

struct TrainOutcome {
  std::string run_dir;
  std::string manifest;
  std::string best_checkpoint;
  double best_f1 = 0.0;
  std::size_t best_epoch = 0;
};

// Trains one seed into <checkpoint_dir>/seed<seed>/ and writes the vocabulary
// and the run manifest (resolved config, input digests, per-epoch metrics).
inline TrainOutcome train_run(const Config& c) {
  Workspace w;
  load_workspace(c, w, false);
  TrainOutcome o;
  o.run_dir = c.run_dir(c.seed);
  clear_checkpoints(o.run_dir);
  fs::create_directories(o.run_dir);
  auto run = make_run(c, c.seed);
  run.checkpoint_dir = o.run_dir;
  const auto result = train(w.inputs, run);
  write_output((fs::path(o.run_dir) / "vocab.txt").string(), w.inputs.vocab.serialize());
  for (const auto& e : result.history)
    if (e.phase == "finetune" && e.epoch == result.best_epoch) o.best_checkpoint = e.checkpoint;
  o.best_f1 = result.best_f1;
  o.best_epoch = result.best_epoch;
  Json manifest;
  manifest["command"] = "train";
  manifest["config"] = config_json(c);
  manifest["inputs"] = w.digests;
  manifest["vocab_size"] = w.inputs.vocab.size();
  manifest["history"] = history_json(result.history);
  manifest["best"] = {{"epoch", result.best_epoch}, {"dev_f1", format_percent(result.best_f1)}, {"checkpoint", o.best_checkpoint}};
  o.manifest = (fs::path(o.run_dir) / "run.json").string();
  write_output(o.manifest, manifest.dump(2) + "\n");
  return o;
}

struct LoadedModel {
  NerModel model;
  Vocabulary vocab;
};

// Explicit checkpoint path, or the best checkpoint named in the run
// manifest of the configured seed. The vocabulary sits next to it.
inline LoadedModel load_trained(const Config& c, const std::string& model_path) {
  std::string ckpt = model_path;
  if (ckpt.empty()) {
    const auto manifest = (fs::path(c.run_dir(c.seed)) / "run.json").string();
    require_file(manifest, "run manifest");
    ckpt = nlohmann::json::parse(bin::read_file(manifest)).at("best").at("checkpoint").get<std::string>();
  }
  require_file(ckpt, "model checkpoint");
  const auto vocab_path = (fs::path(ckpt).parent_path() / "vocab.txt").string();
  require_file(vocab_path, "vocabulary");
  return {load_model(bin::read_file(ckpt)), Vocabulary::parse(bin::read_file(vocab_path))};
}

// Tags every sequence of `in`; with context on, each uses its first summary.
inline std::size_t predict_file(const Config& c, const LoadedModel& m, const std::string& in, const std::string& summaries,
                                const std::string& out) {
  Split split;
  split.seqs = load_bio(in, c.tag_profile());
  std::optional<StaticContexts> ctx;
  if (c.use_context) {
    ctx.emplace(load_summaries(summaries, split.seqs.size()));
    split.contexts = &*ctx;
  }
  const auto pred = predict_split(m.model, m.vocab, split, c.use_context, c.decode, c.threads);
  write_output(out, serialize_bio(pred));
  return pred.size();
}

inline ScoreReport evaluate_files(const std::string& gold, const std::string& pred, const TagProfile& profile) {
  return score(load_bio(gold, profile), load_bio(pred, profile));
}

// All three configurations under every configured seed, scored on test.
inline AblationReport ablate_runs(const Config& c, const std::function<void(const std::string&, std::uint64_t, double)>& on_run) {
  Workspace w;
  load_workspace(c, w, true);
  Split test{w.test, nullptr};
  if (c.use_context) {
    w.contexts.emplace_back(load_summaries(c.summaries_path("test"), w.test.size()));
    test.contexts = &w.contexts.back();
  }
  auto base = make_run(c, c.seed);
  base.checkpoint_dir = (fs::path(c.paths.checkpoint_dir) / "ablation").string();
  return ablate(w.inputs, test, base, c.seeds, on_run);
}

// ---- toy data ------------------------------------------------------------------

struct ToySpec {
  std::size_t train = 2000;
  std::size_t dev = 200;
  std::size_t test = 200;
  std::size_t pretrain = 400;
  std::size_t corpus_docs = 40;
  std::size_t seqs_per_doc = 8;
  std::uint64_t seed = 42;
};

// Writes profile-A splits, a profile-B auxiliary split, a corpus directory
// and a ready-to-run config.json into `dir`.
inline void make_toy(const std::string& dir, const ToySpec& spec) {
  const auto a = TagProfile::dataset_a();
  const auto b = TagProfile::dataset_b();
  const fs::path root(dir);
  write_output((root / "train.bio").string(), serialize_bio(toy::make_split(mix_seed(spec.seed, 1), spec.train, a, {}, "train")));
  write_output((root / "dev.bio").string(), serialize_bio(toy::make_split(mix_seed(spec.seed, 2), spec.dev, a, {}, "dev")));
  write_output((root / "test.bio").string(), serialize_bio(toy::make_split(mix_seed(spec.seed, 3), spec.test, a, {}, "test")));
  write_output((root / "pretrain.bio").string(),
               serialize_bio(toy::make_split(mix_seed(spec.seed, 4), spec.pretrain, b, {}, "aux")));
  fs::create_directories(root / "corpus");
  for (const auto& d : toy::make_corpus(mix_seed(spec.seed, 5), spec.corpus_docs, spec.seqs_per_doc, a))
    write_output((root / "corpus" / (d.id + ".txt")).string(), utf8::encode(d.text));
  const Json cfg = {
      {"profile", "A"},
      {"pretrain_profile", "B"},
      {"paths",
       {{"train", "train.bio"}, {"dev", "dev.bio"}, {"test", "test.bio"}, {"pretrain", "pretrain.bio"},
        {"corpus_dir", "corpus"}, {"work_dir", "work"}}},
      {"segment_len", 510},
      {"retrieval", {{"k", 4}, {"d", 32}, {"chunk_len", 16}}},
      {"embedder", {{"n_layers", 1}, {"n_heads", 4}, {"d_ffn", 64}}},
      {"backend", {{"kind", "mock"}}},
      {"optimizer", {{"max_input_len", 128}}},
      {"pretrain_optimizer", {{"max_input_len", 128}}},
      {"encoder", {{"n_layers", 2}, {"n_heads", 4}, {"d_model", 32}, {"d_ffn", 64}}},
      {"epochs", 12},
      {"pretrain_epochs", 1},
      {"seed", spec.seed},
      {"seeds", {42, 123, 2025}}};
  write_output((root / "config.json").string(), cfg.dump(2) + "\n");
}

}  // namespace ragner::pipeline
