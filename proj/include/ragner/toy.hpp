#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ragner/rng.hpp"
#include "ragner/textdata.hpp"

// Procedural NER data: every entity type draws its characters from its own
// alphabet, and entities are embedded in filler text from a further,
// disjoint alphabet. Alphabets are keyed by type name, so profiles that
// share a type (A and B share person, location, time) share its alphabet.
namespace ragner::toy {

struct Options {
  std::size_t min_len = 12;
  std::size_t max_len = 32;
  std::size_t alphabet_size = 10;
  std::size_t filler_size = 40;
  double entity_rate = 0.18;  // chance of starting an entity at a free position
  std::size_t max_entity_len = 3;
};

namespace detail {

inline std::size_t type_slot(const std::string& type) {
  static const std::vector<std::string> known = {"person",  "location", "book",    "official",  "country", "time",
                                                 "disease", "syndrome", "formula", "decoction", "symptom", "acupoint"};
  for (std::size_t i = 0; i < known.size(); ++i)
    if (known[i] == type) return i;
  std::size_t h = 0;
  for (char c : type) h = h * 131 + static_cast<unsigned char>(c);
  return known.size() + h % 64;
}

}  // namespace detail

inline constexpr char32_t kFillerBase = 0x4E00;
inline constexpr char32_t kEntityBase = 0x5000;

inline char32_t entity_char(const std::string& type, std::size_t k, const Options& opt) {
  return kEntityBase + static_cast<char32_t>(detail::type_slot(type) * opt.alphabet_size + k);
}

inline char32_t filler_char(std::size_t k) { return kFillerBase + static_cast<char32_t>(k); }

inline Sequence make_sequence(Rng& rng, const TagProfile& profile, const Options& opt, std::string doc_id) {
  Sequence s;
  s.doc_id = std::move(doc_id);
  s.tags.emplace();
  const auto len = opt.min_len + rng.below(opt.max_len - opt.min_len + 1);
  const auto& types = profile.entity_types();
  while (s.tokens.size() < len) {
    const bool after_entity = !s.tags->empty() && s.tags->back() != "O";
    const auto room = len - s.tokens.size();
    if (!after_entity && rng.uniform() < opt.entity_rate) {
      const auto& type = types[rng.below(types.size())];
      const auto n = std::min<std::size_t>(room, 1 + rng.below(opt.max_entity_len));
      for (std::size_t i = 0; i < n; ++i) {
        s.tokens.push_back(entity_char(type, rng.below(opt.alphabet_size), opt));
        s.tags->push_back((i == 0 ? "B-" : "I-") + type);
      }
    } else {
      s.tokens.push_back(filler_char(rng.below(opt.filler_size)));
      s.tags->push_back("O");
    }
  }
  return s;
}

inline std::vector<Sequence> make_split(std::uint64_t seed, std::size_t count, const TagProfile& profile,
                                        const Options& opt = {}, const std::string& prefix = "toy") {
  Rng rng(seed);
  std::vector<Sequence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_sequence(rng, profile, opt, prefix + std::to_string(i)));
  return out;
}

// Untagged documents built from concatenated toy sequences.
inline std::vector<Document> make_corpus(std::uint64_t seed, std::size_t docs, std::size_t seqs_per_doc,
                                         const TagProfile& profile, const Options& opt = {}) {
  Rng rng(seed);
  std::vector<Document> out;
  for (std::size_t d = 0; d < docs; ++d) {
    Document doc;
    doc.id = "doc" + std::to_string(d);
    for (std::size_t k = 0; k < seqs_per_doc; ++k) doc.text += make_sequence(rng, profile, opt, doc.id).tokens;
    out.push_back(std::move(doc));
  }
  return out;
}

}  // namespace ragner::toy
