#pragma once

// Eigen must precede httplib: <resolv.h> defines a `_res` macro that
// collides with Eigen parameter names.
#include "ragner/tensor.hpp"

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ragner/digest.hpp"
#include "ragner/error.hpp"
#include "ragner/textdata.hpp"

namespace ragner {

struct SummaryRequest {
  std::u32string target;
  std::vector<std::u32string> contexts;  // retrieval order
  TagProfile profile = TagProfile::dataset_a();
  std::size_t n_summaries = 1;

  void validate() const { require(n_summaries >= 1 && n_summaries <= 5, "n_summaries must be in 1..5"); }
};

struct ContextSummary {
  std::string text;
  std::size_t index = 1;  // 1-based
  std::string request_digest;

  friend bool operator==(const ContextSummary&, const ContextSummary&) = default;
};

struct Prompt {
  std::string system;
  std::string user;
};

namespace detail {

struct TypeDisplay {
  std::string_view key;
  std::string_view name;
  std::string_view examples;
};

inline constexpr TypeDisplay kTypeDisplay[] = {
    {"person", "Person name", "荆軻, 伏羲"},
    {"location", "Geographical location", "長平, 黄河"},
    {"book", "Book title", "易, 易經"},
    {"official", "Official title", "中大夫"},
    {"country", "Country name", "秦"},
    {"time", "Time expression", "三月, 丙戌, 丁亥"},
    {"disease", "Disease name", ""},
    {"syndrome", "Syndrome", ""},
    {"formula", "Medicinal formula", ""},
    {"decoction", "Decoction piece", ""},
    {"symptom", "Symptom", ""},
    {"acupoint", "Acupuncture point", ""},
};

inline std::string count_word(std::size_t n) {
  static constexpr std::string_view words[] = {"zero", "one", "two", "three", "four", "five"};
  return n < std::size(words) ? std::string(words[n]) : std::to_string(n);
}

}  // namespace detail

inline constexpr std::string_view kSystemPrompt =
    "You are an expert in Chinese history and literature. You provide clear, concise answers in Classical Chinese "
    "and can leverage additional context to enhance your explanations.";

inline Prompt build_prompt(const SummaryRequest& req) {
  req.validate();
  Prompt p;
  p.system = std::string(kSystemPrompt);
  std::string u =
      "Read carefully the following text and extract all clues that can help identify the following entities in the "
      "target sentence:\n";
  for (const auto& type : req.profile.entity_types()) {
    std::string name = type;
    std::string_view examples;
    for (const auto& d : detail::kTypeDisplay) {
      if (d.key == type) {
        name = d.name;
        examples = d.examples;
      }
    }
    u += "- " + name;
    if (!examples.empty()) u += " (e.g., " + std::string(examples) + ")";
    u += "\n";
  }
  u += "Target Sentence: " + utf8::encode(req.target) + "\n";
  u += "Context: ";
  for (std::size_t i = 0; i < req.contexts.size(); ++i) {
    if (i) u += "\n";
    u += utf8::encode(req.contexts[i]);
  }
  u += "\n\n";
  if (req.n_summaries == 1) {
    u += "Provide one explanation of your findings in Classical Chinese. Output your response as a JSON array of "
         "objects, with each object containing a brief textual explanation.";
  } else {
    u += "Provide " + detail::count_word(req.n_summaries) +
         " distinct explanations of your findings in Classical Chinese. Output your responses as a JSON array of "
         "objects, with each object containing a brief textual explanation.";
  }
  p.user = std::move(u);
  return p;
}

// Cache key over everything that determines the prompt.
inline std::string request_digest(const SummaryRequest& req) {
  nlohmann::json j;
  j["target"] = utf8::encode(req.target);
  j["contexts"] = nlohmann::json::array();
  for (const auto& c : req.contexts) j["contexts"].push_back(utf8::encode(c));
  j["profile"] = req.profile.name();
  j["types"] = req.profile.entity_types();
  j["n"] = req.n_summaries;
  return to_hex(sha256(j.dump()));
}

// Accepts a JSON array of `expected` objects, each with exactly one
// string-valued field; a surrounding ``` fence is stripped first.
inline std::vector<std::string> parse_reply(std::string_view raw, std::size_t expected) {
  auto excerpt = [&] { return std::string(raw.substr(0, 160)); };
  auto trim = [](std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return std::string_view{};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  };
  std::string_view body = trim(raw);
  if (body.starts_with("```")) {
    const auto nl = body.find('\n');
    body = nl == std::string_view::npos ? std::string_view{} : body.substr(nl + 1);
    body = trim(body);
    if (body.ends_with("```")) body = trim(body.substr(0, body.size() - 3));
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error&) {
    fail(ErrorCode::reply_not_json, "reply is not JSON: " + excerpt());
  }
  if (!j.is_array()) fail(ErrorCode::reply_not_array, "reply is not a JSON array: " + excerpt());
  if (j.size() != expected) {
    fail(ErrorCode::reply_arity, "expected " + std::to_string(expected) + " explanations, got " +
                                     std::to_string(j.size()) + ": " + excerpt());
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& item = j[i];
    if (!item.is_object()) fail(ErrorCode::reply_bad_item, "reply item " + std::to_string(i + 1) + " is not an object");
    const nlohmann::json* text = nullptr;
    for (const auto& [key, value] : item.items()) {
      if (!value.is_string()) continue;
      if (text) fail(ErrorCode::reply_bad_item, "reply item " + std::to_string(i + 1) + " has several text fields");
      text = &value;
    }
    if (!text) fail(ErrorCode::reply_bad_item, "reply item " + std::to_string(i + 1) + " has no text field");
    auto s = text->get<std::string>();
    if (trim(s).empty()) fail(ErrorCode::reply_empty_text, "reply item " + std::to_string(i + 1) + " is empty");
    out.push_back(std::move(s));
  }
  return out;
}

class Backend {
 public:
  virtual ~Backend() = default;
  // Raw reply text for one request.
  virtual std::string complete(const SummaryRequest& req, const Prompt& prompt) = 0;
};

// Offline backend: each explanation is the first min(200, total)
// characters of the concatenated contexts followed by its 1-based index.
class MockBackend : public Backend {
 public:
  explicit MockBackend(std::uint64_t seed = 0) : seed_(seed) {}

  std::string complete(const SummaryRequest& req, const Prompt&) override {
    ++calls_;
    std::u32string joined;
    for (const auto& c : req.contexts) joined += c;
    const auto head = utf8::encode(joined.substr(0, 200));
    nlohmann::json reply = nlohmann::json::array();
    for (std::size_t i = 1; i <= req.n_summaries; ++i) reply.push_back({{"explanation", head + std::to_string(i)}});
    return reply.dump();
  }

  std::size_t calls() const { return calls_.load(); }
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::atomic<std::size_t> calls_{0};
};

struct BackendSpec {
  enum class Kind { remote, mock } kind = Kind::mock;
  std::string endpoint;   // base URL, e.g. https://api.example.com/v1
  std::string model;
  std::string auth_env = "RAGNER_API_KEY";  // environment variable holding the bearer token
  std::uint64_t seed = 0;
  std::size_t retry_limit = 3;
  double timeout_seconds = 120.0;
  double backoff_seconds = 1.0;  // first retry delay, doubled per attempt
  bool verbose = false;
};

// Chat-completions style HTTP+JSON client.
class RemoteBackend : public Backend {
 public:
  explicit RemoteBackend(BackendSpec spec) : spec_(std::move(spec)) {
    require(!spec_.endpoint.empty(), "remote backend needs an endpoint URL");
    require(!spec_.model.empty(), "remote backend needs a model name");
    const auto scheme_end = spec_.endpoint.find("://");
    require(scheme_end != std::string::npos, "endpoint URL needs a scheme");
    const auto path_start = spec_.endpoint.find('/', scheme_end + 3);
    origin_ = spec_.endpoint.substr(0, path_start);
    path_ = path_start == std::string::npos ? std::string() : spec_.endpoint.substr(path_start);
    while (!path_.empty() && path_.back() == '/') path_.pop_back();
    path_ += "/chat/completions";
  }

  static nlohmann::json request_body(const std::string& model, const Prompt& prompt) {
    return {{"model", model},
            {"messages",
             nlohmann::json::array({{{"role", "system"}, {"content", prompt.system}},
                                    {{"role", "user"}, {"content", prompt.user}}})}};
  }

  std::string complete(const SummaryRequest&, const Prompt& prompt) override {
    const auto body = request_body(spec_.model, prompt).dump();
    httplib::Headers headers;
    std::string token;
    if (const char* t = std::getenv(spec_.auth_env.c_str())) token = t;
    if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
    if (spec_.verbose) {
      std::cerr << "POST " << origin_ << path_ << " (Authorization: " << (token.empty() ? "none" : "<redacted>")
                << ")\n"
                << body << "\n";
    }
    std::string last_error;
    double delay = spec_.backoff_seconds;
    for (std::size_t attempt = 0; attempt <= spec_.retry_limit; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::duration<double>(delay));
        delay *= 2.0;
      }
      httplib::Client cli(origin_);
      const auto secs = static_cast<time_t>(spec_.timeout_seconds);
      const auto usecs = static_cast<time_t>((spec_.timeout_seconds - static_cast<double>(secs)) * 1e6);
      cli.set_connection_timeout(secs, usecs);
      cli.set_read_timeout(secs, usecs);
      cli.set_write_timeout(secs, usecs);
      auto res = cli.Post(path_, headers, body, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (spec_.verbose) std::cerr << "HTTP " << res->status << "\n" << res->body << "\n";
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        fail(ErrorCode::transport, "backend returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 160));
      }
      try {
        const auto j = nlohmann::json::parse(res->body);
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const nlohmann::json::exception&) {
        fail(ErrorCode::reply_not_json, "unexpected completion envelope: " + res->body.substr(0, 160));
      }
    }
    fail(ErrorCode::transport, "backend unreachable after " + std::to_string(spec_.retry_limit + 1) +
                                   " attempts: " + last_error);
  }

 private:
  BackendSpec spec_;
  std::string origin_;
  std::string path_;
};

// Summary texts by digest, mirrored to a JSONL sidecar file
// ({"digest", "index", "text"} per line). Safe for concurrent use; the
// last write of a key wins.
class SummaryCache {
 public:
  SummaryCache() = default;

  explicit SummaryCache(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        const auto index = j.at("index").get<std::size_t>();
        require(index >= 1, "index must be >= 1");
        auto& texts = entries_[j.at("digest").get<std::string>()];
        if (texts.size() < index) texts.resize(index);
        texts[index - 1] = j.at("text").get<std::string>();
      } catch (const std::exception& e) {
        fail(ErrorCode::format, path_ + ":" + std::to_string(line_no) + ": bad cache record: " + e.what());
      }
    }
  }

  std::optional<std::vector<std::string>> get(const std::string& digest, std::size_t n) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(digest);
    if (it == entries_.end() || it->second.size() < n) return std::nullopt;
    for (std::size_t i = 0; i < n; ++i)
      if (it->second[i].empty()) return std::nullopt;
    return std::vector<std::string>(it->second.begin(), it->second.begin() + static_cast<std::ptrdiff_t>(n));
  }

  void put(const std::string& digest, const std::vector<std::string>& texts) {
    std::lock_guard lock(mu_);
    entries_[digest] = texts;
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    if (!out) fail(ErrorCode::io, "cannot append to cache " + path_);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      out << nlohmann::json{{"digest", digest}, {"index", i + 1}, {"text", texts[i]}}.dump() << "\n";
    }
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::map<std::string, std::vector<std::string>> entries_;
};

inline std::vector<ContextSummary> summarize(const SummaryRequest& req, Backend& backend, SummaryCache& cache) {
  req.validate();
  const auto digest = request_digest(req);
  auto texts = cache.get(digest, req.n_summaries);
  if (!texts) {
    const auto prompt = build_prompt(req);
    texts = parse_reply(backend.complete(req, prompt), req.n_summaries);
    cache.put(digest, *texts);
  }
  std::vector<ContextSummary> out;
  for (std::size_t i = 0; i < req.n_summaries; ++i) out.push_back({(*texts)[i], i + 1, digest});
  return out;
}

// Runs requests with at most `max_in_flight` outstanding backend calls.
// Results keep request order.
inline std::vector<std::vector<ContextSummary>> summarize_all(const std::vector<SummaryRequest>& reqs, Backend& backend,
                                                              SummaryCache& cache, std::size_t max_in_flight = 1) {
  std::vector<std::vector<ContextSummary>> out(reqs.size());
  if (max_in_flight <= 1 || reqs.size() <= 1) {
    for (std::size_t i = 0; i < reqs.size(); ++i) out[i] = summarize(reqs[i], backend, cache);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < reqs.size(); i = next++) {
      try {
        out[i] = summarize(reqs[i], backend, cache);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(max_in_flight, reqs.size()); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace ragner
