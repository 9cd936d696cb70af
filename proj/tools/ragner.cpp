#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "ragner/pipeline.hpp"

namespace {

namespace pl = ragner::pipeline;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  bool verbose = false;
  std::string backend;
};

pl::Config resolve_config(const Globals& g) {
  pl::Config c = g.config_path.empty() ? pl::parse_config(nlohmann::json::object(), std::filesystem::current_path())
                                       : pl::load_config(g.config_path);
  pl::apply_environment(c);
  if (g.seed) c.seed = *g.seed;
  if (g.threads) c.threads = *g.threads;
  c.verbose = g.verbose;
  if (g.backend == "mock") c.backend.kind = ragner::BackendSpec::Kind::mock;
  if (g.backend == "remote") c.backend.kind = ragner::BackendSpec::Kind::remote;
  ragner::require(c.threads >= 1, "--threads must be >= 1");
  c.tag_profile();
  return c;
}

void log(const pl::Config& c, const std::string& msg) {
  if (c.verbose) std::cerr << msg << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ragner: retrieval-augmented character-level NER pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "pipeline configuration (JSON)");
  app.add_option("--seed", g.seed, "override the configured seed");
  app.add_option("--threads", g.threads, "worker thread cap");
  app.add_flag("--verbose", g.verbose, "progress on stderr");
  app.add_option("--backend", g.backend, "summarizer backend")->check(CLI::IsMember({"remote", "mock"}));

  std::function<void()> action;

  auto* seg = app.add_subcommand("segment", "split text or BIO into bounded sequences");
  std::string seg_in, seg_out, seg_profile;
  std::optional<std::size_t> seg_len;
  bool seg_bio = false;
  seg->add_option("--in", seg_in, "input file")->required();
  seg->add_option("--out", seg_out, "output file")->required();
  seg->add_option("--max-len", seg_len, "maximum sequence length");
  seg->add_flag("--bio", seg_bio, "input is BIO; output is BIO");
  seg->add_option("--profile", seg_profile, "tag profile for BIO input");
  seg->callback([&] {
    action = [&] {
      auto c = resolve_config(g);
      if (!seg_profile.empty()) c.profile = seg_profile;
      const auto n = pl::segment_file(seg_in, seg_out, seg_len.value_or(c.segment_len), seg_bio, c.tag_profile());
      std::cout << "segments " << n << "\n";
    };
  });

  auto* idx = app.add_subcommand("build-index", "embed the corpus into a vector store");
  idx->callback([&] {
    action = [&] {
      const auto c = resolve_config(g);
      pl::require_dir(c.paths.corpus_dir, "corpus directory");
      const auto s = pl::build_index(c);
      std::cout << "documents " << s.documents << "\nrows " << s.rows << "\nindex " << c.paths.index << "\n";
    };
  });

  auto* ret = app.add_subcommand("retrieve", "nearest corpus chunks for every sequence of a split");
  std::string ret_split, ret_in, ret_out;
  ret->add_option("--split", ret_split, "train, dev or test")->required()->check(CLI::IsMember({"train", "dev", "test"}));
  ret->add_option("--in", ret_in, "BIO input (default: the split's configured path)");
  ret->add_option("--out", ret_out, "output JSONL (default: <work_dir>/retrieval-<split>.jsonl)");
  ret->callback([&] {
    action = [&] {
      const auto c = resolve_config(g);
      const auto in = ret_in.empty() ? c.split_path(ret_split) : ret_in;
      pl::require_file(in, "input");
      const auto out = ret_out.empty() ? c.retrieval_path(ret_split) : ret_out;
      const auto n = pl::retrieve(c, in, out);
      std::cout << "sequences " << n << "\nout " << out << "\n";
    };
  });

  auto* sum = app.add_subcommand("summarize", "context summaries for every sequence of a split");
  std::string sum_split, sum_in, sum_ret, sum_out;
  sum->add_option("--split", sum_split, "train, dev or test")->required()->check(CLI::IsMember({"train", "dev", "test"}));
  sum->add_option("--in", sum_in, "BIO input (default: the split's configured path)");
  sum->add_option("--retrieval", sum_ret, "retrieval JSONL (default: <work_dir>/retrieval-<split>.jsonl)");
  sum->add_option("--out", sum_out, "output JSONL (default: <work_dir>/summaries-<split>.jsonl)");
  sum->callback([&] {
    action = [&] {
      const auto c = resolve_config(g);
      const auto in = sum_in.empty() ? c.split_path(sum_split) : sum_in;
      const auto retrieval = sum_ret.empty() ? c.retrieval_path(sum_split) : sum_ret;
      pl::require_file(in, "input");
      pl::require_file(retrieval, "retrieval output");
      const auto out = sum_out.empty() ? c.summaries_path(sum_split) : sum_out;
      const auto r = pl::summarize_split(c, sum_split, in, retrieval, out);
      std::cout << "sequences " << r.sequences << "\nsummaries_per_sequence " << pl::summaries_per_example(sum_split)
                << "\nbackend_calls " << r.backend_calls << "\nout " << out << "\n";
    };
  });

  auto* trn = app.add_subcommand("train", "train one seed and keep the best dev checkpoint");
  trn->callback([&] {
    action = [&] {
      const auto c = resolve_config(g);
      pl::require_file(c.paths.train, "train split");
      log(c, "training seed " + std::to_string(c.seed));
      const auto o = pl::train_run(c);
      std::cout << "best_epoch " << o.best_epoch << "\nbest_dev_f1 " << ragner::format_percent(o.best_f1)
                << "\ncheckpoint " << o.best_checkpoint << "\nmanifest " << o.manifest << "\n";
    };
  });

  auto* prd = app.add_subcommand("predict", "tag a BIO file with a trained model");
  std::string prd_split, prd_in, prd_out, prd_model, prd_sum;
  prd->add_option("--split", prd_split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
  prd->add_option("--in", prd_in, "BIO input (overrides --split)");
  prd->add_option("--out", prd_out, "predicted BIO")->required();
  prd->add_option("--model", prd_model, "checkpoint (default: best of the configured seed)");
  prd->add_option("--summaries", prd_sum, "summaries JSONL (default: <work_dir>/summaries-<split>.jsonl)");
  prd->callback([&] {
    action = [&] {
      const auto c = resolve_config(g);
      if (prd_in.empty() && prd_split.empty()) ragner::fail(ragner::ErrorCode::invalid_argument, "predict needs --split or --in");
      const auto in = prd_in.empty() ? c.split_path(prd_split) : prd_in;
      pl::require_file(in, "input");
      std::string summaries = prd_sum;
      if (c.use_context && summaries.empty()) {
        if (prd_split.empty()) ragner::fail(ragner::ErrorCode::invalid_argument, "context is on: pass --summaries or --split");
        summaries = c.summaries_path(prd_split);
      }
      if (c.use_context) pl::require_file(summaries, "summaries");
      const auto model = pl::load_trained(c, prd_model);
      const auto n = pl::predict_file(c, model, in, summaries, prd_out);
      std::cout << "sequences " << n << "\nout " << prd_out << "\n";
    };
  });

  auto* ev = app.add_subcommand("evaluate", "strict entity-level scores");
  std::string ev_gold, ev_pred, ev_profile, ev_out;
  ev->add_option("--gold", ev_gold, "gold BIO")->required();
  ev->add_option("--pred", ev_pred, "predicted BIO")->required();
  ev->add_option("--profile", ev_profile, "tag profile (default: configured)");
  ev->add_option("--out", ev_out, "JSON report");
  ev->callback([&] {
    action = [&] {
      auto c = resolve_config(g);
      if (!ev_profile.empty()) c.profile = ev_profile;
      pl::require_file(ev_gold, "gold file");
      pl::require_file(ev_pred, "prediction file");
      const auto r = pl::evaluate_files(ev_gold, ev_pred, c.tag_profile());
      if (!ev_out.empty()) pl::write_output(ev_out, r.to_json().dump(2) + "\n");
      std::cout << r.to_text();
    };
  });

  auto* abl = app.add_subcommand("ablate", "three configurations under every configured seed");
  abl->callback([&] {
    action = [&] {
      const auto c = resolve_config(g);
      pl::require_file(c.paths.train, "train split");
      pl::require_file(c.paths.test, "test split");
      const auto report = pl::ablate_runs(c, [&](const std::string& label, std::uint64_t seed, double f1) {
        log(c, label + " seed " + std::to_string(seed) + " test F1 " + ragner::format_percent(f1));
      });
      const auto base = std::filesystem::path(c.paths.work_dir);
      pl::write_output((base / "ablation.json").string(), report.to_json().dump(2) + "\n");
      pl::write_output((base / "ablation.txt").string(), report.to_text());
      std::cout << report.to_text();
    };
  });

  auto* toy = app.add_subcommand("make-toy", "write a synthetic dataset, corpus and config");
  std::string toy_out;
  pl::ToySpec spec;
  toy->add_option("--out", toy_out, "output directory")->required();
  toy->add_option("--train", spec.train, "train sequences");
  toy->add_option("--dev", spec.dev, "dev sequences");
  toy->add_option("--test", spec.test, "test sequences");
  toy->add_option("--pretrain", spec.pretrain, "auxiliary sequences");
  toy->add_option("--corpus-docs", spec.corpus_docs, "corpus documents");
  toy->callback([&] {
    action = [&] {
      spec.seed = g.seed.value_or(spec.seed);
      pl::make_toy(toy_out, spec);
      std::cout << "config " << (std::filesystem::path(toy_out) / "config.json").string() << "\n";
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "ragner-error[usage]: " << e.what() << "\n";
    return 2;
  }

  try {
    action();
  } catch (const ragner::Error& e) {
    std::cerr << "ragner-error[" << ragner::to_string(e.code()) << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "ragner-error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
