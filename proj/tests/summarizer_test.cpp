#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>

#include "ragner/summarizer.hpp"
#include "support.hpp"

namespace ragner {
namespace {

using testing::u32;

SummaryRequest request(std::string_view target, std::vector<std::string_view> contexts, std::size_t n) {
  SummaryRequest req;
  req.target = u32(target);
  for (auto c : contexts) req.contexts.push_back(u32(c));
  req.n_summaries = n;
  return req;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::invalid_argument;
}

TEST(Prompt, ProfileABullets) {
  const auto p = build_prompt(request("秦王", {"甲"}, 3));
  for (const char* bullet : {"- Person name (e.g., 荆軻, 伏羲)\n", "- Geographical location (e.g., 長平, 黄河)\n",
                             "- Book title (e.g., 易, 易經)\n", "- Official title (e.g., 中大夫)\n",
                             "- Country name (e.g., 秦)\n", "- Time expression (e.g., 三月, 丙戌, 丁亥)\n"}) {
    EXPECT_NE(p.user.find(bullet), std::string::npos) << bullet;
  }
  EXPECT_NE(p.user.find("Target Sentence: 秦王\n"), std::string::npos);
  EXPECT_NE(p.user.find("Provide three distinct explanations"), std::string::npos);
  EXPECT_NE(p.user.find("a JSON array of objects"), std::string::npos);
  EXPECT_NE(p.system.find("expert in Chinese history and literature"), std::string::npos);
}

TEST(Prompt, OtherProfilesUseTheirTypes) {
  auto req = request("甲", {}, 1);
  req.profile = TagProfile::dataset_c();
  const auto p = build_prompt(req);
  EXPECT_NE(p.user.find("- Disease name\n"), std::string::npos);
  EXPECT_NE(p.user.find("- Acupuncture point\n"), std::string::npos);
  EXPECT_EQ(p.user.find("Person name"), std::string::npos);
  req.profile = TagProfile::by_name("custom:weapon");
  EXPECT_NE(build_prompt(req).user.find("- weapon\n"), std::string::npos);
}

TEST(Prompt, EmptyContextSectionStillPresent) {
  const auto p = build_prompt(request("甲", {}, 1));
  EXPECT_NE(p.user.find("Context: \n\n"), std::string::npos);
}

TEST(Prompt, ContextsInRetrievalOrder) {
  const auto p = build_prompt(request("甲", {"乙乙", "丙丙", "丁丁"}, 5));
  EXPECT_NE(p.user.find("Context: 乙乙\n丙丙\n丁丁\n"), std::string::npos);
  EXPECT_NE(p.user.find("Provide five distinct explanations"), std::string::npos);
}

TEST(Prompt, SingleExplanationWording) {
  const auto p = build_prompt(request("甲", {"乙"}, 1));
  EXPECT_NE(p.user.find("Provide one explanation"), std::string::npos);
  EXPECT_EQ(p.user.find("distinct"), std::string::npos);
}

TEST(Prompt, RejectsBadCount) {
  EXPECT_THROW(build_prompt(request("甲", {}, 0)), Error);
  EXPECT_THROW(build_prompt(request("甲", {}, 6)), Error);
}

TEST(ParseReply, SingleObject) {
  EXPECT_EQ(parse_reply(R"([{"explanation":"甲"}])", 1), std::vector<std::string>{"甲"});
}

TEST(ParseReply, FencedSameAsUnfenced) {
  const std::string body = R"([{"explanation":"甲"},{"note":"乙"}])";
  EXPECT_EQ(parse_reply("```json\n" + body + "\n```", 2), parse_reply(body, 2));
  EXPECT_EQ(parse_reply("```\n" + body + "\n```\n", 2), parse_reply(body, 2));
}

TEST(ParseReply, ErrorKinds) {
  EXPECT_EQ(code_of([] { parse_reply(R"({"explanation":"甲"})", 1); }), ErrorCode::reply_not_array);
  EXPECT_EQ(code_of([] { parse_reply("not json", 1); }), ErrorCode::reply_not_json);
  EXPECT_EQ(code_of([] { parse_reply(R"([{"a":""}])", 1); }), ErrorCode::reply_empty_text);
  EXPECT_EQ(code_of([] { parse_reply(R"([{"a":"x","b":"y"}])", 1); }), ErrorCode::reply_bad_item);
  EXPECT_EQ(code_of([] { parse_reply(R"([{"a":1}])", 1); }), ErrorCode::reply_bad_item);
  EXPECT_EQ(code_of([] { parse_reply(R"(["x"])", 1); }), ErrorCode::reply_bad_item);
}

TEST(ParseReply, ArityErrorNamesCounts) {
  try {
    parse_reply(R"([{"e":"a"},{"e":"b"},{"e":"c"}])", 5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::reply_arity);
    EXPECT_NE(std::string(e.what()).find("expected 5 explanations, got 3"), std::string::npos);
  }
}

TEST(ParseReply, NonStringFieldsIgnored) {
  EXPECT_EQ(parse_reply(R"([{"id":1,"text":"甲"}])", 1), std::vector<std::string>{"甲"});
}

TEST(Mock, DeterministicContentCorrelated) {
  const auto req = request("甲", {"乙丙", "丁"}, 3);
  MockBackend a(1), b(1);
  SummaryCache ca, cb;
  const auto x = summarize(req, a, ca);
  const auto y = summarize(req, b, cb);
  EXPECT_EQ(x, y);
  ASSERT_EQ(x.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(x[i].index, i + 1);
    EXPECT_EQ(x[i].text, "乙丙丁" + std::to_string(i + 1));
    EXPECT_EQ(x[i].request_digest, request_digest(req));
  }
}

TEST(Mock, TruncatesToTwoHundredCharacters) {
  std::string long_ctx;
  for (int i = 0; i < 300; ++i) long_ctx += "乙";
  const auto req = request("甲", {long_ctx}, 1);
  MockBackend mock;
  SummaryCache cache;
  EXPECT_EQ(summarize(req, mock, cache)[0].text, long_ctx.substr(0, 200 * 3) + "1");
}

TEST(Mock, EmptyContextsStillNonempty) {
  MockBackend mock;
  SummaryCache cache;
  EXPECT_EQ(summarize(request("甲", {}, 2), mock, cache)[1].text, "2");
}

TEST(Cache, SecondRequestMakesNoCalls) {
  const auto req = request("甲", {"乙"}, 5);
  MockBackend mock;
  SummaryCache cache;
  const auto first = summarize(req, mock, cache);
  EXPECT_EQ(mock.calls(), 1u);
  const auto second = summarize(req, mock, cache);
  EXPECT_EQ(mock.calls(), 1u);
  EXPECT_EQ(first, second);
}

TEST(Cache, ReloadsFromFile) {
  testing::TempDir dir("cache");
  const auto path = dir / "summaries.jsonl";
  const auto req = request("甲", {"乙"}, 2);
  {
    MockBackend mock;
    SummaryCache cache(path);
    summarize(req, mock, cache);
  }
  MockBackend mock;
  SummaryCache cache(path);
  EXPECT_EQ(cache.size(), 1u);
  const auto out = summarize(req, mock, cache);
  EXPECT_EQ(mock.calls(), 0u);
  EXPECT_EQ(out[1].text, "乙2");
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("digest"), request_digest(req));
  EXPECT_EQ(j.at("index"), 1);
}

TEST(Cache, CorruptFileRejected) {
  testing::TempDir dir("badcache");
  const auto path = dir / "summaries.jsonl";
  std::ofstream(path) << "{not json\n";
  EXPECT_THROW(SummaryCache{path}, Error);
}

TEST(Cache, ConcurrentRequestsKeepOrder) {
  std::vector<SummaryRequest> reqs;
  for (int i = 0; i < 40; ++i) reqs.push_back(request("甲", {std::to_string(i)}, 1 + i % 5));
  MockBackend mock;
  SummaryCache cache;
  const auto out = summarize_all(reqs, mock, cache, 4);
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    ASSERT_EQ(out[i].size(), reqs[i].n_summaries);
    EXPECT_EQ(out[i][0].text, std::to_string(i) + "1");
  }
  EXPECT_EQ(mock.calls(), reqs.size());
}

TEST(Digest, DistinctRequestsDistinctKeys) {
  Rng rng(1);
  std::set<std::string> seen;
  std::size_t made = 0;
  std::set<std::tuple<std::u32string, std::vector<std::u32string>, std::string, std::size_t>> inputs;
  for (int i = 0; i < 500; ++i) {
    SummaryRequest req;
    const auto target_len = 1 + rng.below(3), n_contexts = rng.below(3);
    for (std::size_t k = 0; k < target_len; ++k) req.target.push_back(U'甲' + static_cast<char32_t>(rng.below(3)));
    for (std::size_t c = 0; c < n_contexts; ++c) req.contexts.push_back(std::u32string(1 + rng.below(2), U'乙'));
    req.profile = rng.below(2) ? TagProfile::dataset_a() : TagProfile::dataset_b();
    req.n_summaries = 1 + rng.below(5);
    if (inputs.insert({req.target, req.contexts, req.profile.name(), req.n_summaries}).second) {
      ++made;
      seen.insert(request_digest(req));
    }
  }
  EXPECT_EQ(seen.size(), made);
}

TEST(Digest, ContextBoundariesMatter) {
  EXPECT_NE(request_digest(request("甲", {"乙丙"}, 1)), request_digest(request("甲", {"乙", "丙"}, 1)));
}

// Local chat-completions endpoint for exercising RemoteBackend.
class FakeEndpoint {
 public:
  FakeEndpoint() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu_);
      ++hits_;
      auth_ = req.get_header_value("Authorization");
      body_ = req.body;
      if (failures_left_ > 0) {
        --failures_left_;
        res.status = 503;
        return;
      }
      res.status = status_;
      nlohmann::json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", content_}}}}}}};
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeEndpoint() {
    server_.stop();
    thread_.join();
  }

  BackendSpec spec() const {
    BackendSpec s;
    s.kind = BackendSpec::Kind::remote;
    s.endpoint = "http://127.0.0.1:" + std::to_string(port_) + "/v1";
    s.model = "test-model";
    s.auth_env = "RAGNER_TEST_TOKEN";
    s.backoff_seconds = 0.01;
    s.timeout_seconds = 5.0;
    return s;
  }

  std::mutex mu_;
  int hits_ = 0;
  int failures_left_ = 0;
  int status_ = 200;
  std::string content_ = R"([{"explanation":"秦，國名也"}])";
  std::string auth_, body_;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

TEST(Remote, SuccessfulCompletion) {
  FakeEndpoint ep;
  ::setenv("RAGNER_TEST_TOKEN", "secret-token", 1);
  RemoteBackend backend(ep.spec());
  SummaryCache cache;
  const auto out = summarize(request("秦王", {"秦者"}, 1), backend, cache);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].text, "秦，國名也");
  EXPECT_EQ(ep.hits_, 1);
  EXPECT_EQ(ep.auth_, "Bearer secret-token");
  const auto body = nlohmann::json::parse(ep.body_);
  EXPECT_EQ(body.at("model"), "test-model");
  EXPECT_EQ(body.at("messages").at(0).at("role"), "system");
  EXPECT_NE(body.at("messages").at(1).at("content").get<std::string>().find("Target Sentence: 秦王"), std::string::npos);
  ::unsetenv("RAGNER_TEST_TOKEN");
}

TEST(Remote, RetriesServerErrors) {
  FakeEndpoint ep;
  ep.failures_left_ = 2;
  RemoteBackend backend(ep.spec());
  SummaryCache cache;
  EXPECT_EQ(summarize(request("甲", {}, 1), backend, cache)[0].text, "秦，國名也");
  EXPECT_EQ(ep.hits_, 3);
  EXPECT_TRUE(ep.auth_.empty());
}

TEST(Remote, GivesUpAfterRetryLimit) {
  FakeEndpoint ep;
  ep.failures_left_ = 100;
  auto spec = ep.spec();
  spec.retry_limit = 2;
  RemoteBackend backend(spec);
  SummaryCache cache;
  EXPECT_EQ(code_of([&] { summarize(request("甲", {}, 1), backend, cache); }), ErrorCode::transport);
  EXPECT_EQ(ep.hits_, 3);
}

TEST(Remote, ClientErrorNotRetried) {
  FakeEndpoint ep;
  ep.status_ = 401;
  RemoteBackend backend(ep.spec());
  SummaryCache cache;
  EXPECT_EQ(code_of([&] { summarize(request("甲", {}, 1), backend, cache); }), ErrorCode::transport);
  EXPECT_EQ(ep.hits_, 1);
}

TEST(Remote, MalformedReplyIsParseError) {
  FakeEndpoint ep;
  ep.content_ = R"([{"explanation":"a"},{"explanation":"b"}])";
  RemoteBackend backend(ep.spec());
  SummaryCache cache;
  EXPECT_EQ(code_of([&] { summarize(request("甲", {}, 5), backend, cache); }), ErrorCode::reply_arity);
  EXPECT_EQ(cache.size(), 0u);
}

TEST(Remote, UnreachableEndpoint) {
  BackendSpec spec;
  spec.kind = BackendSpec::Kind::remote;
  spec.endpoint = "http://127.0.0.1:1/v1";
  spec.model = "m";
  spec.retry_limit = 1;
  spec.backoff_seconds = 0.01;
  spec.timeout_seconds = 1.0;
  RemoteBackend backend(spec);
  SummaryCache cache;
  EXPECT_EQ(code_of([&] { summarize(request("甲", {}, 1), backend, cache); }), ErrorCode::transport);
}

TEST(Remote, VerboseLogRedactsToken) {
  FakeEndpoint ep;
  ::setenv("RAGNER_TEST_TOKEN", "secret-token", 1);
  auto spec = ep.spec();
  spec.verbose = true;
  RemoteBackend backend(spec);
  SummaryCache cache;
  ::testing::internal::CaptureStderr();
  summarize(request("甲", {}, 1), backend, cache);
  const auto log = ::testing::internal::GetCapturedStderr();
  ::unsetenv("RAGNER_TEST_TOKEN");
  EXPECT_EQ(log.find("secret-token"), std::string::npos);
  EXPECT_NE(log.find("<redacted>"), std::string::npos);
  EXPECT_NE(log.find("test-model"), std::string::npos);
}

TEST(Remote, SpecValidation) {
  BackendSpec spec;
  EXPECT_THROW(RemoteBackend{spec}, Error);
  spec.endpoint = "no-scheme";
  spec.model = "m";
  EXPECT_THROW(RemoteBackend{spec}, Error);
}

}  // namespace
}  // namespace ragner
