#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ragner/binary_io.hpp"
#include "ragner/digest.hpp"
#include "ragner/evaluation.hpp"
#include "ragner/nerhead.hpp"
#include "ragner/optim.hpp"
#include "ragner/rng.hpp"
#include "ragner/textdata.hpp"

namespace ragner {

// Supplies the generated summaries of one example, in index order.
class ContextSource {
 public:
  virtual ~ContextSource() = default;
  virtual std::vector<std::u32string> summaries(std::size_t example) const = 0;
};

class StaticContexts : public ContextSource {
 public:
  StaticContexts() = default;
  explicit StaticContexts(std::vector<std::vector<std::u32string>> data) : data_(std::move(data)) {}

  std::vector<std::u32string> summaries(std::size_t example) const override {
    ++calls_;
    if (example >= data_.size()) fail(ErrorCode::invalid_argument, "no summaries for example " + std::to_string(example));
    return data_[example];
  }

  std::size_t calls() const { return calls_.load(); }

 private:
  std::vector<std::vector<std::u32string>> data_;
  mutable std::atomic<std::size_t> calls_{0};
};

inline constexpr std::size_t kTrainSummaries = 5;

// Uniform draw from 1..5 keyed by (example, epoch, seed).
inline std::size_t sample_summary(std::uint64_t example_id, std::uint64_t epoch, std::uint64_t run_seed,
                                  std::size_t available = kTrainSummaries) {
  if (available < kTrainSummaries) {
    fail(ErrorCode::invalid_argument, "example " + std::to_string(example_id) + " has " + std::to_string(available) +
                                          " summaries, expected " + std::to_string(kTrainSummaries));
  }
  const auto h = mix_seed(mix_seed(run_seed, example_id), epoch);
  return 1 + static_cast<std::size_t>(h % kTrainSummaries);
}

struct Split {
  std::vector<Sequence> seqs;
  const ContextSource* contexts = nullptr;
};

// View of another source through an index map.
class SubsetContexts : public ContextSource {
 public:
  SubsetContexts(const ContextSource* base, std::vector<std::size_t> index) : base_(base), index_(std::move(index)) {}

  std::vector<std::u32string> summaries(std::size_t example) const override {
    return base_->summaries(index_.at(example));
  }

 private:
  const ContextSource* base_;
  std::vector<std::size_t> index_;
};

struct PretrainPhase {
  TagProfile profile = TagProfile::dataset_b();
  Split data;
};

struct TrainInputs {
  TagProfile profile = TagProfile::dataset_a();
  Vocabulary vocab;
  Split train;
  Split dev;
  std::optional<PretrainPhase> pretrain;
};

struct TrainRun {
  std::uint64_t seed = 42;
  OptimizerConfig optimizer = OptimizerConfig::fine_tuning();
  OptimizerConfig pretrain_optimizer = OptimizerConfig::pretraining();
  bool use_context = true;
  bool use_pretraining_phase = true;
  std::size_t epochs = 5;
  std::size_t pretrain_epochs = 2;
  EncoderConfig encoder;  // vocab_size, max_len and dropout are filled in from the inputs
  HeadConfig head;
  DecodeMode decode = DecodeMode::viterbi;
  std::size_t threads = 1;
  std::string checkpoint_dir;  // empty: keep the best model in memory only
  bool verbose = false;
};

struct EpochMetrics {
  std::string phase;  // "pretrain" or "finetune"
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  Counts dev;
  std::string checkpoint;
};

struct TrainResult {
  NerModel model;  // best dev-F1 fine-tuned model
  std::size_t best_epoch = 0;
  double best_f1 = -1.0;
  std::vector<EpochMetrics> history;
};

namespace detail {

inline std::optional<std::u32string> pick_summary(const Split& split, std::size_t i, bool use_context,
                                                  std::optional<std::uint64_t> epoch, std::uint64_t seed) {
  if (!use_context) return std::nullopt;
  if (!split.contexts) fail(ErrorCode::invalid_argument, "context requested but no summaries supplied");
  auto all = split.contexts->summaries(i);
  if (!epoch) {
    if (all.empty()) fail(ErrorCode::invalid_argument, "example " + std::to_string(i) + " has no summary");
    return all.front();
  }
  return all[sample_summary(i, *epoch, seed, all.size()) - 1];
}

inline void check_split(const Split& s, const TagProfile& profile, const std::string& what) {
  for (std::size_t i = 0; i < s.seqs.size(); ++i) {
    if (!s.seqs[i].tagged()) fail(ErrorCode::invalid_argument, what + " sequence " + std::to_string(i) + " is untagged");
    (void)profile.to_ids(*s.seqs[i].tags);
  }
}

// Copies label-indexed head rows/columns whose label names match.
inline void transfer_head(const NerModel& from, NerModel& to) {
  to.encoder = from.encoder;
  to.head.lstm = from.head.lstm;
  for (std::size_t a = 0; a < to.labels.size(); ++a) {
    const auto ia = std::find(from.labels.begin(), from.labels.end(), to.labels[a]);
    if (ia == from.labels.end()) continue;
    const auto fa = static_cast<Eigen::Index>(ia - from.labels.begin());
    const auto ta = static_cast<Eigen::Index>(a);
    to.head.proj.col(ta) = from.head.proj.col(fa);
    to.head.proj_bias(0, ta) = from.head.proj_bias(0, fa);
    to.head.start(0, ta) = from.head.start(0, fa);
    to.head.end(0, ta) = from.head.end(0, fa);
    for (std::size_t b = 0; b < to.labels.size(); ++b) {
      const auto ib = std::find(from.labels.begin(), from.labels.end(), to.labels[b]);
      if (ib == from.labels.end()) continue;
      to.head.transitions(ta, static_cast<Eigen::Index>(b)) =
          from.head.transitions(fa, static_cast<Eigen::Index>(ib - from.labels.begin()));
    }
  }
}

// Runs fn(0..n-1) on up to `threads` workers; the first exception thrown
// by any worker is rethrown after all have joined.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

inline std::vector<Sequence> predict_split(const NerModel& m, const Vocabulary& vocab, const Split& split,
                                           bool use_context, DecodeMode mode = DecodeMode::viterbi,
                                           std::size_t threads = 1) {
  std::vector<Sequence> out(split.seqs.size());
  auto work = [&](std::size_t i) {
    const auto& s = split.seqs[i];
    out[i] = s;
    if (s.tokens.empty()) {
      out[i].tags.emplace();
      return;
    }
    const auto summary = detail::pick_summary(split, i, use_context, std::nullopt, 0);
    std::optional<std::u32string_view> sv;
    if (summary) sv = *summary;
    out[i].tags = predict(m, vocab, s.tokens, sv, mode).labels;
  };
  detail::parallel_for(out.size(), threads, work);
  return out;
}

inline std::string checkpoint_name(std::size_t epoch, double f1) { return std::to_string(epoch) + "-" + format_percent(f1) + ".ckpt"; }

namespace detail {

struct PhaseOutcome {
  std::vector<EpochMetrics> history;
  std::optional<NerModel> best;
  std::size_t best_epoch = 0;
  double best_f1 = -1.0;
};

// Mini-batch training of `model` on one labelled split. With a dev split,
// the best dev-F1 model is kept (and saved when a directory is given).
inline PhaseOutcome run_phase(NerModel& model, const std::string& phase, const TagProfile& profile,
                              const Vocabulary& vocab, const Split& train, const Split* dev,
                              const OptimizerConfig& opt, std::size_t epochs, const TrainRun& run) {
  PhaseOutcome outcome;
  std::vector<std::vector<int>> gold;
  for (const auto& s : train.seqs) gold.push_back(profile.to_ids(*s.tags));

  auto enc_params = tensor_list(model.encoder);
  auto head_params = tensor_list(model.head);
  const auto enc_names = tensor_names(model.encoder);
  const auto head_names = tensor_names(model.head);
  auto enc_moments = AdamMoments::like(enc_params);
  auto head_moments = AdamMoments::like(head_params);
  const ParamGroup enc_group{opt.encoder_lr, opt.encoder_wd, opt.beta1, opt.beta2, opt.epsilon};
  const ParamGroup head_group{opt.head_lr, opt.head_wd, opt.beta1, opt.beta2, opt.epsilon};

  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < train.seqs.size(); ++i)
    if (!train.seqs[i].tokens.empty()) usable.push_back(i);
  if (usable.empty()) fail(ErrorCode::invalid_argument, phase + " split has no non-empty sequences");

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::vector<std::size_t> order = usable;
    Rng shuffler(mix_seed(run.seed, 1000 + epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffler.below(i)]);

    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += opt.batch_size) {
      const auto b1 = std::min(order.size(), b0 + opt.batch_size);
      ++step;
      const auto batch = std::span(order).subspan(b0, b1 - b0);
      std::vector<CompositeInput> inputs;
      for (auto i : batch) {
        const auto summary = pick_summary(train, i, run.use_context, epoch, run.seed);
        std::optional<std::u32string_view> sv;
        if (summary) sv = *summary;
        inputs.push_back(build_composite(train.seqs[i].tokens, sv, vocab, model.encoder_cfg.max_len));
      }
      auto example_seed = [&](std::size_t k) { return mix_seed(mix_seed(run.seed, step), batch[k]); };

      ModelGradients grads = ModelGradients::zeros(model);
      std::vector<double> losses(batch.size());
      if (run.threads <= 1 || batch.size() == 1) {
        for (std::size_t k = 0; k < batch.size(); ++k)
          losses[k] = loss_and_gradients(model, inputs[k], gold[batch[k]], true, example_seed(k), grads);
      } else {
        // Per-example buffers reduced in batch order keep results independent of scheduling.
        std::vector<ModelGradients> parts(batch.size(), ModelGradients::zeros(model));
        parallel_for(batch.size(), run.threads, [&](std::size_t k) {
          losses[k] = loss_and_gradients(model, inputs[k], gold[batch[k]], true, example_seed(k), parts[k]);
        });
        for (const auto& p : parts) grads.add(p);
      }
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (double l : losses) loss_sum += l;
      auto grad_list = tensor_list(grads);
      for (Matrix* g : grad_list) *g *= inv;
      clip_global_norm(grad_list, opt.clip_norm);

      auto enc_grads = tensor_list(std::as_const(grads.encoder));
      auto head_grads = tensor_list(std::as_const(grads.head));
      ParamGroup eg = enc_group, hg = head_group;
      eg.lr = lr_at(step, enc_group.lr, opt.warmup_steps);
      hg.lr = lr_at(step, head_group.lr, opt.warmup_steps);
      adamw_step(enc_params, enc_grads, enc_names, enc_moments, step, eg);
      adamw_step(head_params, head_grads, head_names, head_moments, step, hg);
    }

    EpochMetrics em;
    em.phase = phase;
    em.epoch = epoch;
    em.mean_loss = loss_sum / static_cast<double>(order.size());
    if (dev) {
      const auto pred = predict_split(model, vocab, *dev, run.use_context, run.decode, run.threads);
      em.dev = score(dev->seqs, pred).overall;
      const double f1 = em.dev.f1();
      if (f1 > outcome.best_f1) {
        outcome.best_f1 = f1;
        outcome.best_epoch = epoch;
        outcome.best = model;
        if (!run.checkpoint_dir.empty()) {
          std::filesystem::create_directories(run.checkpoint_dir);
          em.checkpoint = (std::filesystem::path(run.checkpoint_dir) / checkpoint_name(epoch, f1)).string();
          bin::write_file(em.checkpoint, save_model(model));
        }
      }
    }
    if (run.verbose) {
      std::fprintf(stderr, "[%s] epoch %zu loss %.4f dev F1 %s\n", phase.c_str(), epoch, em.mean_loss,
                   format_percent(em.dev.f1()).c_str());
    }
    outcome.history.push_back(em);
  }
  return outcome;
}

inline NerModel fresh_model(const TrainRun& run, const OptimizerConfig& opt, const Vocabulary& vocab,
                            const TagProfile& profile, std::uint64_t seed) {
  EncoderConfig ecfg = run.encoder;
  ecfg.vocab_size = vocab.size();
  ecfg.max_len = opt.max_input_len;
  ecfg.dropout_rate = opt.dropout;
  HeadConfig hcfg = run.head;
  hcfg.dropout_rate = opt.dropout;
  return NerModel::init(ecfg, hcfg, profile.labels(), seed);
}

inline void set_dropout(NerModel& m, double rate) {
  m.encoder_cfg.dropout_rate = rate;
  m.head_cfg.dropout_rate = rate;
}

}  // namespace detail

// Optional auxiliary-data phase, then fine-tuning with per-group learning
// rates, linear warmup and clipped mean-CRF-NLL batches. Dev F1 is scored
// every epoch and the best model is returned.
inline TrainResult train(const TrainInputs& in, const TrainRun& run) {
  run.optimizer.validate();
  if (in.train.seqs.empty()) fail(ErrorCode::invalid_argument, "training split is empty");
  detail::check_split(in.train, in.profile, "train");
  detail::check_split(in.dev, in.profile, "dev");

  // Without a dev split, every tenth training sequence is held out.
  Split train_split = in.train;
  Split dev = in.dev;
  std::optional<SubsetContexts> train_view, dev_view;
  if (dev.seqs.empty()) {
    require(in.train.seqs.size() >= 2, "need a dev split or at least two training sequences");
    std::vector<std::size_t> ti, di;
    for (std::size_t i = 0; i < in.train.seqs.size(); ++i) (i % 10 == 9 ? di : ti).push_back(i);
    if (di.empty()) {
      di.push_back(ti.back());
      ti.pop_back();
    }
    train_split.seqs.clear();
    for (auto i : ti) train_split.seqs.push_back(in.train.seqs[i]);
    for (auto i : di) dev.seqs.push_back(in.train.seqs[i]);
    if (in.train.contexts) {
      train_view.emplace(in.train.contexts, ti);
      dev_view.emplace(in.train.contexts, di);
      train_split.contexts = &*train_view;
      dev.contexts = &*dev_view;
    }
  }

  TrainResult result;
  NerModel model = detail::fresh_model(run, run.optimizer, in.vocab, in.profile, run.seed);

  if (run.use_pretraining_phase && in.pretrain && !in.pretrain->data.seqs.empty()) {
    run.pretrain_optimizer.validate();
    detail::check_split(in.pretrain->data, in.pretrain->profile, "pretrain");
    NerModel aux = detail::fresh_model(run, run.pretrain_optimizer, in.vocab, in.pretrain->profile, run.seed);
    // The auxiliary split carries no retrieved summaries.
    TrainRun aux_run = run;
    aux_run.use_context = false;
    aux_run.checkpoint_dir.clear();
    auto phase = detail::run_phase(aux, "pretrain", in.pretrain->profile, in.vocab, in.pretrain->data, nullptr,
                                   run.pretrain_optimizer, run.pretrain_epochs, aux_run);
    result.history = std::move(phase.history);
    detail::transfer_head(aux, model);
    detail::set_dropout(model, run.optimizer.dropout);
  }

  auto phase = detail::run_phase(model, "finetune", in.profile, in.vocab, train_split, &dev, run.optimizer, run.epochs, run);
  result.history.insert(result.history.end(), phase.history.begin(), phase.history.end());
  result.model = phase.best ? std::move(*phase.best) : std::move(model);
  result.best_epoch = phase.best_epoch;
  result.best_f1 = phase.best_f1;
  return result;
}

inline nlohmann::ordered_json optimizer_json(const OptimizerConfig& c) {
  return {{"epsilon", c.epsilon},         {"encoder_lr", c.encoder_lr}, {"head_lr", c.head_lr},
          {"encoder_wd", c.encoder_wd},   {"head_wd", c.head_wd},       {"beta1", c.beta1},
          {"beta2", c.beta2},             {"warmup_steps", c.warmup_steps}, {"batch_size", c.batch_size},
          {"dropout", c.dropout},         {"max_input_len", c.max_input_len}, {"clip_norm", c.clip_norm}};
}

inline nlohmann::ordered_json history_json(const std::vector<EpochMetrics>& history) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : history) {
    arr.push_back({{"phase", e.phase},
                   {"epoch", e.epoch},
                   {"mean_loss", e.mean_loss},
                   {"dev_precision", format_percent(e.dev.precision())},
                   {"dev_recall", format_percent(e.dev.recall())},
                   {"dev_f1", format_percent(e.dev.f1())},
                   {"checkpoint", e.checkpoint}});
  }
  return arr;
}

struct AblationConfig {
  std::string label;
  bool use_context = true;
  bool use_pretraining_phase = true;
};

// The three ablation configurations, in report order.
inline std::vector<AblationConfig> ablation_configs() {
  return {{"w/ Context", true, true}, {"w/o Context", false, true}, {"w/o Pretraining", true, false}};
}

struct AblationRow {
  std::string label;
  std::vector<double> f1s;  // one per seed, percent
  MeanStd summary;
};

struct AblationReport {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  std::string to_text() const {
    std::string out = "configuration        F1 (mean ± sample std)   per-seed\n";
    char line[256];
    for (const auto& r : rows) {
      std::string per;
      for (std::size_t i = 0; i < r.f1s.size(); ++i) {
        if (i) per += " ";
        per += std::to_string(seeds[i]) + ":" + format_percent(r.f1s[i]);
      }
      std::snprintf(line, sizeof line, "%-20s %-24s %s\n", r.label.c_str(), r.summary.render().c_str(), per.c_str());
      out += line;
    }
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["seeds"] = seeds;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      auto per = nlohmann::ordered_json::array();
      for (double f : r.f1s) per.push_back(format_percent(f));
      j["rows"].push_back({{"configuration", r.label},
                           {"mean", format_percent(r.summary.mean)},
                           {"std", format_percent(r.summary.std)},
                           {"rendered", r.summary.render()},
                           {"f1", per}});
    }
    return j;
  }
};

// Trains every configuration under every seed and scores the best-dev
// model on `test`. Each row reports mean and sample std over seeds.
inline AblationReport ablate(const TrainInputs& in, const Split& test, const TrainRun& base,
                             std::span<const std::uint64_t> seeds,
                             const std::function<void(const std::string&, std::uint64_t, double)>& on_run = {}) {
  if (seeds.size() < 2) fail(ErrorCode::invalid_argument, "ablation needs at least two seeds");
  AblationReport report;
  report.seeds.assign(seeds.begin(), seeds.end());
  for (const auto& cfg : ablation_configs()) {
    AblationRow row;
    row.label = cfg.label;
    for (auto seed : seeds) {
      TrainRun run = base;
      run.seed = seed;
      run.use_context = cfg.use_context;
      run.use_pretraining_phase = cfg.use_pretraining_phase;
      if (!base.checkpoint_dir.empty()) {
        std::string slug;
        for (char c : cfg.label) slug.push_back(std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : '-');
        run.checkpoint_dir = (std::filesystem::path(base.checkpoint_dir) / (slug + "-seed" + std::to_string(seed))).string();
      }
      const auto result = train(in, run);
      const auto pred = predict_split(result.model, in.vocab, test, cfg.use_context, run.decode, run.threads);
      const double f1 = score(test.seqs, pred).overall.f1();
      if (on_run) on_run(cfg.label, seed, f1);
      row.f1s.push_back(f1);
    }
    row.summary = aggregate(row.f1s);
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace ragner
