#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ragner/crf.hpp"
#include "ragner/encoder.hpp"
#include "ragner/lstm.hpp"
#include "ragner/textdata.hpp"

namespace ragner {

// X = [CLS] T [SEP] S [SEP], or [CLS] T [SEP] when S is absent or empty.
struct CompositeInput {
  std::vector<int> ids;
  Mask target_mask;
  std::size_t target_len = 0;
  std::size_t summary_len = 0;

  std::size_t size() const { return ids.size(); }
  // T occupies positions [1, 1 + target_len).
  static constexpr std::size_t target_begin() { return 1; }
};

// Budget for S is max_len - |T| - 3; S is trimmed from its right end.
inline CompositeInput build_composite(std::u32string_view target, std::optional<std::u32string_view> summary,
                                      const Vocabulary& vocab, std::size_t max_len) {
  const bool with_summary = summary.has_value() && !summary->empty();
  const std::size_t overhead = with_summary ? 3 : 2;
  if (target.size() + overhead > max_len) {
    fail(ErrorCode::invalid_argument, "target of " + std::to_string(target.size()) +
                                          " tokens does not fit input budget " + std::to_string(max_len));
  }
  CompositeInput x;
  x.target_len = target.size();
  x.ids.push_back(kClsId);
  for (char32_t c : target) x.ids.push_back(vocab.id_of(c));
  x.ids.push_back(kSepId);
  if (with_summary) {
    const auto budget = max_len - target.size() - 3;
    const auto s = summary->substr(0, budget);
    for (char32_t c : s) x.ids.push_back(vocab.id_of(c));
    x.ids.push_back(kSepId);
    x.summary_len = s.size();
  }
  x.target_mask.assign(x.ids.size(), 0);
  for (std::size_t i = 0; i < x.target_len; ++i) x.target_mask[CompositeInput::target_begin() + i] = 1;
  return x;
}

struct HeadConfig {
  std::size_t input_dim = 0;
  std::size_t hidden = 0;  // LSTM units per direction; defaults to input_dim
  std::size_t n_layers = 2;
  std::size_t num_labels = 0;
  double dropout_rate = 0.0;

  void validate() const {
    require(input_dim >= 1 && hidden >= 1 && n_layers >= 1, "head dimensions must be positive");
    require(num_labels >= 1, "head needs at least one label");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout rate must lie in [0, 1)");
  }

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

struct HeadParams {
  lstm::Params lstm;
  Matrix proj;       // 2h x L
  Matrix proj_bias;  // 1 x L
  Matrix transitions;
  Matrix start;
  Matrix end;

  static HeadParams zeros(const HeadConfig& cfg) {
    HeadParams p;
    p.lstm = lstm::Params::zeros(cfg.input_dim, cfg.hidden, cfg.n_layers);
    const auto L = static_cast<Eigen::Index>(cfg.num_labels);
    p.proj = Matrix::Zero(static_cast<Eigen::Index>(2 * cfg.hidden), L);
    p.proj_bias = Matrix::Zero(1, L);
    p.transitions = Matrix::Zero(L, L);
    p.start = Matrix::Zero(1, L);
    p.end = Matrix::Zero(1, L);
    return p;
  }

  static HeadParams init(const HeadConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    auto p = zeros(cfg);
    p.lstm = lstm::Params::init(cfg.input_dim, cfg.hidden, cfg.n_layers, rng);
    fill_uniform(p.proj, rng, 1.0 / std::sqrt(static_cast<double>(2 * cfg.hidden)));
    return p;
  }

  crf::Scores crf_scores() const { return {transitions, start, end}; }

  template <typename F>
  void for_each_tensor(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit_all(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_all(Self& self, F& f) {
    lstm::Params::visit(self.lstm, f);
    f(std::string("proj"), self.proj);
    f(std::string("proj_bias"), self.proj_bias);
    f(std::string("crf.transitions"), self.transitions);
    f(std::string("crf.start"), self.start);
    f(std::string("crf.end"), self.end);
  }
};

// Encoder + head with their configurations and label names.
struct NerModel {
  EncoderConfig encoder_cfg;
  EncoderParams encoder;
  HeadConfig head_cfg;
  HeadParams head;
  std::vector<std::string> labels;

  static NerModel init(const EncoderConfig& ecfg, HeadConfig hcfg, std::vector<std::string> labels,
                       std::uint64_t seed) {
    ecfg.validate();
    hcfg.input_dim = ecfg.d_model;
    if (hcfg.hidden == 0) hcfg.hidden = ecfg.d_model;
    hcfg.num_labels = labels.size();
    hcfg.validate();
    NerModel m;
    m.encoder_cfg = ecfg;
    m.encoder = EncoderParams::init(ecfg, mix_seed(seed, 1));
    m.head_cfg = hcfg;
    m.head = HeadParams::init(hcfg, mix_seed(seed, 2));
    m.labels = std::move(labels);
    return m;
  }

  template <typename F>
  void for_each_tensor(F&& f) {
    encoder.for_each_tensor([&](const std::string& n, Matrix& t) { f("encoder." + n, t); });
    head.for_each_tensor([&](const std::string& n, Matrix& t) { f("head." + n, t); });
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    encoder.for_each_tensor([&](const std::string& n, const Matrix& t) { f("encoder." + n, t); });
    head.for_each_tensor([&](const std::string& n, const Matrix& t) { f("head." + n, t); });
  }
};

struct ModelGradients {
  EncoderParams encoder;
  HeadParams head;

  static ModelGradients zeros(const NerModel& m) {
    return {EncoderParams::zeros(m.encoder_cfg), HeadParams::zeros(m.head_cfg)};
  }

  template <typename F>
  void for_each_tensor(F&& f) {
    encoder.for_each_tensor([&](const std::string& n, Matrix& t) { f("encoder." + n, t); });
    head.for_each_tensor([&](const std::string& n, Matrix& t) { f("head." + n, t); });
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    encoder.for_each_tensor([&](const std::string& n, const Matrix& t) { f("encoder." + n, t); });
    head.for_each_tensor([&](const std::string& n, const Matrix& t) { f("head." + n, t); });
  }

  void add(const ModelGradients& o) {
    auto dst = tensor_list(*this);
    auto src = tensor_list(o);
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] += *src[i];
  }
};

enum class DecodeMode { viterbi, argmax };

struct HeadCache {
  EncoderCache encoder;
  Matrix lstm_drop;
  lstm::Cache lstm;
  Matrix features;  // target rows of the BiLSTM output, before dropout
  Matrix proj_drop;
};

// The BiLSTM reads the whole composite; only T's rows are projected to
// label scores, so the CRF chain has exactly |T| steps.
inline Matrix compute_emissions(const NerModel& m, const CompositeInput& x, bool train_mode, std::uint64_t seed,
                                HeadCache* cache = nullptr) {
  require(x.target_len >= 1, "target sequence is empty");
  HeadCache local;
  HeadCache& c = cache ? *cache : local;
  const Mask full(x.ids.size(), 1);
  const auto hidden = encode_forward(x.ids, full, m.encoder, m.encoder_cfg, train_mode, mix_seed(seed, 11), &c.encoder);
  const bool dropping = train_mode && m.head_cfg.dropout_rate > 0.0;
  Rng rng(mix_seed(seed, 12));
  Matrix lstm_in = hidden.values;
  c.lstm_drop.resize(0, 0);
  c.proj_drop.resize(0, 0);
  if (dropping) {
    c.lstm_drop = dropout_mask(lstm_in.rows(), lstm_in.cols(), m.head_cfg.dropout_rate, rng);
    lstm_in = lstm_in.cwiseProduct(c.lstm_drop);
  }
  const Matrix out = lstm::forward(m.head.lstm, lstm_in, &c.lstm);
  const auto T = static_cast<Eigen::Index>(x.target_len);
  c.features = out.middleRows(static_cast<Eigen::Index>(CompositeInput::target_begin()), T);
  Matrix f = c.features;
  if (dropping) {
    c.proj_drop = dropout_mask(f.rows(), f.cols(), m.head_cfg.dropout_rate, rng);
    f = f.cwiseProduct(c.proj_drop);
  }
  Matrix em = f * m.head.proj;
  em.rowwise() += m.head.proj_bias.row(0);
  return em;
}

// CRF NLL of the gold labels over T for one example. Gradients are
// accumulated into `grads`.
inline double loss_and_gradients(const NerModel& m, const CompositeInput& x, std::span<const int> gold,
                                 bool train_mode, std::uint64_t seed, ModelGradients& grads) {
  require(gold.size() == x.target_len, "gold label count differs from target length");
  HeadCache c;
  const Matrix em = compute_emissions(m, x, train_mode, seed, &c);
  crf::NllGradients g;
  const double loss = crf::nll_with_gradients(em, gold, m.head.crf_scores(), g);
  grads.head.transitions += g.transitions;
  grads.head.start += g.start;
  grads.head.end += g.end;
  grads.head.proj_bias.row(0) += g.emissions.colwise().sum();
  const Matrix f = c.proj_drop.size() ? Matrix(c.features.cwiseProduct(c.proj_drop)) : c.features;
  grads.head.proj += f.transpose() * g.emissions;
  Matrix dfeat = g.emissions * m.head.proj.transpose();
  if (c.proj_drop.size()) dfeat = dfeat.cwiseProduct(c.proj_drop);

  const auto n = static_cast<Eigen::Index>(x.size());
  Matrix dout = Matrix::Zero(n, dfeat.cols());
  dout.middleRows(static_cast<Eigen::Index>(CompositeInput::target_begin()), dfeat.rows()) = dfeat;
  Matrix dhidden = lstm::backward(m.head.lstm, c.lstm, dout, grads.head.lstm);
  if (c.lstm_drop.size()) dhidden = dhidden.cwiseProduct(c.lstm_drop);
  const auto eg = encode_backward(dhidden, c.encoder, m.encoder, m.encoder_cfg);
  auto dst = tensor_list(grads.encoder);
  auto src = tensor_list(eg.params);
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] += *src[i];
  return loss;
}

struct TagSequence {
  std::vector<std::string> labels;
  double score = 0.0;
};

inline crf::Path decode(const NerModel& m, const CompositeInput& x, DecodeMode mode = DecodeMode::viterbi) {
  const Matrix em = compute_emissions(m, x, false, 0);
  return mode == DecodeMode::viterbi ? crf::viterbi(em, m.head.crf_scores()) : crf::argmax(em, m.head.crf_scores());
}

// Encodes [CLS] T [SEP] S [SEP] jointly and labels T only.
inline TagSequence predict(const NerModel& m, const Vocabulary& vocab, std::u32string_view target,
                           std::optional<std::u32string_view> summary, DecodeMode mode = DecodeMode::viterbi) {
  if (target.empty()) return {};
  const auto x = build_composite(target, summary, vocab, m.encoder_cfg.max_len);
  const auto path = decode(m, x, mode);
  TagSequence out;
  out.score = path.score;
  for (int y : path.labels) out.labels.push_back(m.labels.at(static_cast<std::size_t>(y)));
  return out;
}

// Head section: "RGNRHEAD", version, input_dim, hidden, n_layers,
// num_labels, dropout rate, label names, then tensors in declaration order.
inline constexpr std::string_view kHeadMagic{"RGNRHEAD", 8};
inline constexpr std::uint64_t kHeadVersion = 1;

inline std::string save_model(const NerModel& m) {
  bin::Writer w;
  write_encoder(w, m.encoder_cfg, m.encoder);
  w.bytes(kHeadMagic);
  w.u64(kHeadVersion);
  for (auto v : {m.head_cfg.input_dim, m.head_cfg.hidden, m.head_cfg.n_layers, m.head_cfg.num_labels}) w.u64(v);
  w.f64(m.head_cfg.dropout_rate);
  for (const auto& l : m.labels) w.str(l);
  m.head.for_each_tensor([&](const std::string&, const Matrix& t) { write_tensor(w, t); });
  return w.buffer();
}

inline NerModel load_model(std::string_view bytes) {
  bin::Reader rd(bytes);
  NerModel m;
  std::tie(m.encoder_cfg, m.encoder) = read_encoder(rd);
  if (rd.bytes(8) != kHeadMagic) fail(ErrorCode::format, "bad head checkpoint magic");
  if (rd.u64() != kHeadVersion) fail(ErrorCode::format, "unsupported head checkpoint version");
  m.head_cfg.input_dim = rd.u64();
  m.head_cfg.hidden = rd.u64();
  m.head_cfg.n_layers = rd.u64();
  m.head_cfg.num_labels = rd.u64();
  m.head_cfg.dropout_rate = rd.f64();
  if (m.head_cfg.input_dim != m.encoder_cfg.d_model || m.head_cfg.num_labels > 4096) {
    fail(ErrorCode::format, "head section inconsistent with encoder");
  }
  m.head_cfg.validate();
  for (std::size_t i = 0; i < m.head_cfg.num_labels; ++i) m.labels.push_back(rd.str());
  m.head = HeadParams::zeros(m.head_cfg);
  m.head.for_each_tensor([&](const std::string&, Matrix& t) { read_tensor(rd, t); });
  if (!rd.at_end()) fail(ErrorCode::format, "trailing bytes after head section");
  return m;
}

}  // namespace ragner
