#include <gtest/gtest.h>

#include "ragner/nerhead.hpp"
#include "ragner/training.hpp"
#include "oracles.hpp"

namespace ragner {
namespace {

using testing::u32;

Vocabulary vocab_of(std::string_view chars) {
  const std::vector<Document> corpus{{"v", u32(chars)}};
  return build_vocab(corpus, 100);
}

TEST(Composite, LayoutWithSummary) {
  const auto vocab = vocab_of("甲乙丙丁戊己庚辛壬");
  const auto x = build_composite(u32("甲乙丙丁戊"), u32("己庚辛壬"), vocab, 2048);
  EXPECT_EQ(x.size(), 12u);
  EXPECT_EQ(x.target_len, 5u);
  EXPECT_EQ(x.summary_len, 4u);
  EXPECT_EQ(std::count(x.target_mask.begin(), x.target_mask.end(), 1), 5);
  for (std::size_t i = 1; i <= 5; ++i) EXPECT_EQ(x.target_mask[i], 1);
  EXPECT_EQ(x.ids.front(), kClsId);
  EXPECT_EQ(x.ids[6], kSepId);
  EXPECT_EQ(x.ids.back(), kSepId);
  EXPECT_EQ(std::count(x.ids.begin(), x.ids.end(), kSepId), 2);
  EXPECT_EQ(std::count(x.ids.begin(), x.ids.end(), kClsId), 1);
  EXPECT_EQ(x.ids[1], vocab.id_of(U'甲'));
  EXPECT_EQ(x.ids[7], vocab.id_of(U'己'));
}

TEST(Composite, AbsentSummary) {
  const auto vocab = vocab_of("甲乙");
  const auto x = build_composite(u32("甲乙"), std::nullopt, vocab, 2048);
  EXPECT_EQ(x.ids, (std::vector<int>{kClsId, vocab.id_of(U'甲'), vocab.id_of(U'乙'), kSepId}));
  EXPECT_EQ(x.summary_len, 0u);
}

TEST(Composite, EmptySummaryIsAbsent) {
  const auto vocab = vocab_of("甲乙");
  const auto a = build_composite(u32("甲乙"), std::nullopt, vocab, 2048);
  const auto b = build_composite(u32("甲乙"), std::u32string_view(), vocab, 2048);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.target_mask, b.target_mask);
}

TEST(Composite, SummaryTruncatedFromTheRight) {
  const auto vocab = vocab_of("0123456789abcdefghij");
  const auto x = build_composite(u32("0123456789"), u32("abcdefghij"), vocab, 16);
  EXPECT_EQ(x.summary_len, 3u);
  EXPECT_EQ(x.size(), 16u);
  EXPECT_EQ(x.ids[12], vocab.id_of(U'a'));
  EXPECT_EQ(x.ids[14], vocab.id_of(U'c'));
}

TEST(Composite, TargetNeverTruncated) {
  const auto vocab = vocab_of("0123456789");
  EXPECT_THROW(build_composite(u32("0123456789"), u32("0"), vocab, 12), Error);
  EXPECT_NO_THROW(build_composite(u32("0123456789"), std::nullopt, vocab, 12));
  EXPECT_THROW(build_composite(u32("0123456789"), std::nullopt, vocab, 11), Error);
}

TEST(Predict, OneLabelPerTargetToken) {
  auto m = oracle::gradient_check_model(8, 1, 0.0, 3);
  const auto vocab = vocab_of("甲乙丙丁戊己庚辛");
  for (const char* s : {"", "己", "己庚辛己庚辛己庚辛"}) {
    const auto out = predict(m, vocab, u32("甲乙丙"), u32(s));
    EXPECT_EQ(out.labels.size(), 3u);
  }
  EXPECT_TRUE(predict(m, vocab, u32(""), std::nullopt).labels.empty());
}

TEST(Predict, PureFunctionOfInput) {
  auto m = oracle::gradient_check_model(8, 2, 0.3, 4);
  const auto vocab = vocab_of("甲乙丙丁戊己庚辛");
  const auto a = predict(m, vocab, u32("甲乙丙丁"), u32("戊己"));
  const auto b = predict(m, vocab, u32("甲乙丙丁"), u32("戊己"));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.score, b.score);
}

TEST(Predict, ArgmaxModeAvailable) {
  auto m = oracle::gradient_check_model(8, 1, 0.0, 5);
  const auto vocab = vocab_of("甲乙丙");
  const auto x = build_composite(u32("甲乙丙"), std::nullopt, vocab, 64);
  const Matrix em = compute_emissions(m, x, false, 0);
  const auto got = decode(m, x, DecodeMode::argmax);
  for (Eigen::Index t = 0; t < em.rows(); ++t) {
    Eigen::Index arg = 0;
    em.row(t).maxCoeff(&arg);
    EXPECT_EQ(got.labels[static_cast<std::size_t>(t)], arg);
  }
}

TEST(Emissions, OnlyTargetRows) {
  auto m = oracle::gradient_check_model(8, 1, 0.0, 6);
  const auto vocab = vocab_of("甲乙丙丁戊己");
  const auto x = build_composite(u32("甲乙"), u32("丙丁戊己"), vocab, 64);
  const Matrix em = compute_emissions(m, x, false, 0);
  EXPECT_EQ(em.rows(), 2);
  EXPECT_EQ(em.cols(), static_cast<Eigen::Index>(m.labels.size()));
}

TEST(Gradients, FullModelMatchesFiniteDifferences) {
  auto m = oracle::gradient_check_model(8, 2, 0.0, 7);
  const auto vocab = vocab_of("甲乙丙丁戊己庚辛");
  const auto x = build_composite(u32("甲乙丙丁"), u32("戊己庚"), vocab, 64);
  const std::vector<int> gold{1, 2, 0, 5};
  const auto r = oracle::check_model_gradients(m, x, gold, false, 0);
  EXPECT_LE(r.worst_error, 1e-4) << r.worst_tensor;
}

TEST(Gradients, WithDropoutMatchFiniteDifferences) {
  auto m = oracle::gradient_check_model(8, 1, 0.2, 8);
  const auto vocab = vocab_of("甲乙丙丁戊己庚辛");
  const auto x = build_composite(u32("甲乙丙"), u32("丁戊己庚辛"), vocab, 64);
  const std::vector<int> gold{3, 4, 0};
  const auto r = oracle::check_model_gradients(m, x, gold, true, 99);
  EXPECT_LE(r.worst_error, 1e-4) << r.worst_tensor;
}

TEST(Checkpoint, ModelRoundTrip) {
  const auto m = oracle::gradient_check_model(8, 2, 0.3, 9);
  const auto bytes = save_model(m);
  const auto back = load_model(bytes);
  EXPECT_EQ(back.labels, m.labels);
  EXPECT_EQ(back.head_cfg, m.head_cfg);
  EXPECT_EQ(back.encoder_cfg, m.encoder_cfg);
  EXPECT_EQ(save_model(back), bytes);
  EXPECT_THROW(load_model(bytes + "x"), Error);
  EXPECT_THROW(load_model(bytes.substr(0, bytes.size() - 1)), Error);
  auto corrupt = bytes;
  corrupt[bytes.find("RGNRHEAD")] = 'X';
  EXPECT_THROW(load_model(corrupt), Error);
}

// A toy task where one ambiguous character is a person or a location
// depending only on a cue character in the summary.
TEST(Predict, SummaryChangesPredictionsOfTrainedModel) {
  const auto profile = TagProfile::by_name("custom:person,location");
  const std::u32string filler = U"abcde";
  Rng rng(12);
  auto make = [&](std::size_t n, std::vector<std::vector<std::u32string>>& ctx) {
    std::vector<Sequence> out;
    for (std::size_t i = 0; i < n; ++i) {
      Sequence s{"t" + std::to_string(i), 0, {}, std::vector<std::string>{}};
      const auto len = 3 + rng.below(4);
      const auto at = rng.below(len);
      const bool person = rng.below(2) == 0;
      for (std::size_t k = 0; k < len; ++k) {
        if (k == at) {
          s.tokens.push_back(U'X');
          s.tags->push_back(person ? "B-person" : "B-location");
        } else {
          s.tokens.push_back(filler[rng.below(filler.size())]);
          s.tags->push_back("O");
        }
      }
      ctx.emplace_back(5, std::u32string(3, person ? U'p' : U'l'));
      out.push_back(std::move(s));
    }
    return out;
  };
  std::vector<std::vector<std::u32string>> train_ctx, dev_ctx;
  TrainInputs in;
  in.profile = profile;
  in.vocab = vocab_of("abcdeXpl");
  in.train.seqs = make(400, train_ctx);
  in.dev.seqs = make(40, dev_ctx);
  StaticContexts train_src(train_ctx), dev_src(dev_ctx);
  in.train.contexts = &train_src;
  in.dev.contexts = &dev_src;

  TrainRun run;
  run.seed = 5;
  run.use_pretraining_phase = false;
  run.epochs = 6;
  run.encoder.n_layers = 1;
  run.encoder.n_heads = 2;
  run.encoder.d_model = 16;
  run.encoder.d_ffn = 32;
  run.optimizer.warmup_steps = 20;
  run.optimizer.max_input_len = 64;
  const auto result = train(in, run);
  EXPECT_GE(result.best_f1, 90.0);

  std::size_t changed = 0;
  for (const char* t : {"aXb", "Xcd", "eeX", "abXde"}) {
    const auto as_person = predict(result.model, in.vocab, u32(t), u32("ppp"));
    const auto as_location = predict(result.model, in.vocab, u32(t), u32("lll"));
    EXPECT_EQ(as_person.labels.size(), as_location.labels.size());
    if (as_person.labels != as_location.labels) ++changed;
  }
  EXPECT_GE(changed, 1u);
}

}  // namespace
}  // namespace ragner
