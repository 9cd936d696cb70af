#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "ragner/error.hpp"
#include "ragner/textdata.hpp"

namespace ragner {

struct Counts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  // Percentages; each is 0 when its denominator is 0.
  double precision() const { return tp + fp == 0 ? 0.0 : 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fp); }
  double recall() const { return tp + fn == 0 ? 0.0 : 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double f1() const;

  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }

  friend bool operator==(const Counts&, const Counts&) = default;
};

// Harmonic mean of two percentages; 0 when both are 0.
inline double f1_from(double precision, double recall) {
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

inline double Counts::f1() const { return f1_from(precision(), recall()); }

// Half-up rounding to two decimals.
inline std::string format_percent(double x) {
  const double r = std::floor(x * 100.0 + 0.5 + 1e-9) / 100.0;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", r);
  return buf;
}

struct ScoreReport {
  std::map<std::string, Counts> per_type;
  Counts overall;

  std::string to_text() const {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof line, "%-16s %8s %8s %8s %8s %8s %8s\n", "type", "TP", "FP", "FN", "Prec.", "Rec.", "F1");
    out += line;
    auto row = [&](const std::string& name, const Counts& c) {
      std::snprintf(line, sizeof line, "%-16s %8zu %8zu %8zu %8s %8s %8s\n", name.c_str(), c.tp, c.fp, c.fn,
                    format_percent(c.precision()).c_str(), format_percent(c.recall()).c_str(),
                    format_percent(c.f1()).c_str());
      out += line;
    };
    for (const auto& [name, c] : per_type) row(name, c);
    row("overall", overall);
    return out;
  }

  nlohmann::ordered_json to_json() const {
    auto block = [](const Counts& c) {
      return nlohmann::ordered_json{{"tp", c.tp},
                                    {"fp", c.fp},
                                    {"fn", c.fn},
                                    {"precision", format_percent(c.precision())},
                                    {"recall", format_percent(c.recall())},
                                    {"f1", format_percent(c.f1())}};
    };
    nlohmann::ordered_json j;
    j["per_type"] = nlohmann::ordered_json::object();
    for (const auto& [name, c] : per_type) j["per_type"][name] = block(c);
    j["overall"] = block(overall);
    return j;
  }
};

// Strict entity matching: a prediction is a true positive only if type,
// start and end all equal a gold entity's. Micro scores pool all types.
inline ScoreReport score(std::span<const Sequence> gold, std::span<const Sequence> pred) {
  if (gold.size() != pred.size()) {
    fail(ErrorCode::invalid_argument,
         "gold has " + std::to_string(gold.size()) + " sequences, prediction has " + std::to_string(pred.size()));
  }
  ScoreReport r;
  using Key = std::tuple<std::string, std::size_t, std::size_t>;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (!gold[i].tagged() || !pred[i].tagged() || gold[i].tags->size() != pred[i].tags->size()) {
      fail(ErrorCode::invalid_argument, "sequence " + std::to_string(i) + " is misaligned between gold and prediction");
    }
    std::set<Key> g, p;
    for (const auto& e : extract_entities(*gold[i].tags)) g.emplace(e.etype, e.start, e.end);
    for (const auto& e : extract_entities(*pred[i].tags)) p.emplace(e.etype, e.start, e.end);
    for (const auto& k : p) {
      auto& c = r.per_type[std::get<0>(k)];
      if (g.contains(k)) ++c.tp;
      else ++c.fp;
    }
    for (const auto& k : g)
      if (!p.contains(k)) ++r.per_type[std::get<0>(k)].fn;
  }
  for (const auto& [name, c] : r.per_type) r.overall += c;
  return r;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;

  std::string render() const { return format_percent(mean) + " ± " + format_percent(std); }
};

// Arithmetic mean and sample (n - 1) standard deviation.
inline MeanStd aggregate(std::span<const double> values) {
  if (values.size() < 2) fail(ErrorCode::invalid_argument, "aggregate needs at least two values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

}  // namespace ragner
