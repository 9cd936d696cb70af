#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ragner/error.hpp"
#include "ragner/utf8.hpp"

namespace ragner {

struct Document {
  std::string id;
  std::u32string text;
};

// A tokenized span (one token per Unicode scalar) with optional BIO tags.
struct Sequence {
  std::string doc_id;
  std::size_t offset = 0;
  std::u32string tokens;
  std::optional<std::vector<std::string>> tags;

  bool tagged() const { return tags.has_value(); }
  std::string text() const { return utf8::encode(tokens); }

  friend bool operator==(const Sequence&, const Sequence&) = default;
};

struct Entity {
  std::string etype;
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::u32string text;

  friend bool operator==(const Entity&, const Entity&) = default;
};

// BIO label set over an ordered list of entity types. Label ids are
// O = 0, B-t_k = 1 + 2k, I-t_k = 2 + 2k.
class TagProfile {
 public:
  TagProfile(std::string name, std::vector<std::string> entity_types)
      : name_(std::move(name)), types_(std::move(entity_types)) {
    require(!types_.empty(), "tag profile needs at least one entity type");
    std::unordered_set<std::string> seen;
    labels_.push_back("O");
    for (const auto& t : types_) {
      require(!t.empty(), "empty entity type name");
      require(seen.insert(t).second, "duplicate entity type '" + t + "'");
      labels_.push_back("B-" + t);
      labels_.push_back("I-" + t);
    }
    for (std::size_t i = 0; i < labels_.size(); ++i) index_.emplace(labels_[i], static_cast<int>(i));
  }

  static TagProfile dataset_a() {
    return {"A", {"person", "location", "book", "official", "country", "time"}};
  }
  static TagProfile dataset_b() { return {"B", {"person", "location", "time"}}; }
  static TagProfile dataset_c() {
    return {"C", {"disease", "syndrome", "formula", "decoction", "symptom", "acupoint"}};
  }

  // "A", "B", "C", or "custom:<t1>,<t2>,...".
  static TagProfile by_name(std::string_view name) {
    if (name == "A") return dataset_a();
    if (name == "B") return dataset_b();
    if (name == "C") return dataset_c();
    constexpr std::string_view prefix = "custom:";
    if (name.starts_with(prefix)) {
      std::vector<std::string> types;
      std::string_view rest = name.substr(prefix.size());
      while (!rest.empty()) {
        const auto comma = rest.find(',');
        types.emplace_back(rest.substr(0, comma));
        if (comma == std::string_view::npos) break;
        rest = rest.substr(comma + 1);
      }
      return {"custom", std::move(types)};
    }
    fail(ErrorCode::invalid_argument, "unknown tag profile '" + std::string(name) + "'");
  }

  const std::string& name() const { return name_; }
  const std::vector<std::string>& entity_types() const { return types_; }
  const std::vector<std::string>& labels() const { return labels_; }
  std::size_t num_labels() const { return labels_.size(); }

  std::optional<int> label_id(std::string_view label) const {
    auto it = index_.find(std::string(label));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool has_type(std::string_view t) const { return std::find(types_.begin(), types_.end(), t) != types_.end(); }

  std::vector<int> to_ids(std::span<const std::string> tags) const {
    std::vector<int> out;
    out.reserve(tags.size());
    for (const auto& t : tags) {
      auto id = label_id(t);
      if (!id) fail(ErrorCode::invalid_argument, "label '" + t + "' not in profile " + name_);
      out.push_back(*id);
    }
    return out;
  }

  std::vector<std::string> to_labels(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(labels_.at(static_cast<std::size_t>(id)));
    return out;
  }

 private:
  std::string name_;
  std::vector<std::string> types_;
  std::vector<std::string> labels_;
  std::unordered_map<std::string, int> index_;
};

// Greedy fixed-width split; concatenating the output reproduces doc.text.
inline std::vector<Sequence> segment(const Document& doc, std::size_t max_len) {
  require(max_len >= 1, "segment length must be >= 1");
  std::vector<Sequence> out;
  for (std::size_t off = 0; off < doc.text.size(); off += max_len) {
    Sequence s;
    s.doc_id = doc.id;
    s.offset = off;
    s.tokens = doc.text.substr(off, max_len);
    out.push_back(std::move(s));
  }
  return out;
}

// Splits a tagged sequence; tag lists are cut at the same boundaries.
inline std::vector<Sequence> segment(const Sequence& seq, std::size_t max_len) {
  require(max_len >= 1, "segment length must be >= 1");
  std::vector<Sequence> out;
  for (std::size_t off = 0; off < seq.tokens.size(); off += max_len) {
    Sequence s;
    s.doc_id = seq.doc_id;
    s.offset = seq.offset + off;
    s.tokens = seq.tokens.substr(off, max_len);
    if (seq.tags) {
      const auto end = std::min(seq.tags->size(), off + max_len);
      s.tags.emplace(seq.tags->begin() + static_cast<std::ptrdiff_t>(off),
                     seq.tags->begin() + static_cast<std::ptrdiff_t>(end));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Column format: "<char>\t<tag>" per line (a single space is accepted in
// place of the tab), one blank line after each sequence; the final
// terminator may be omitted. Parsed sequences get
// doc_id = block index and offset 0.
inline std::vector<Sequence> parse_bio(std::string_view text, const TagProfile& profile) {
  std::vector<Sequence> out;
  Sequence cur;
  cur.tags.emplace();
  bool open = false;
  auto finish = [&] {
    cur.doc_id = std::to_string(out.size());
    out.push_back(std::move(cur));
    cur = Sequence{};
    cur.tags.emplace();
    open = false;
  };

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.ends_with('\r')) line.remove_suffix(1);
    if (line.empty()) {
      finish();
      continue;
    }
    const auto chars = utf8::decode(line);
    if (chars.size() < 3 || (chars[1] != U'\t' && chars[1] != U' ')) {
      fail(ErrorCode::parse, "line " + std::to_string(line_no) + ": expected <char><TAB><tag>");
    }
    const auto tag = utf8::encode(std::u32string_view(chars).substr(2));
    if (!profile.label_id(tag)) {
      fail(ErrorCode::parse,
           "line " + std::to_string(line_no) + ": tag '" + tag + "' is not valid for profile " + profile.name());
    }
    cur.tokens.push_back(chars[0]);
    cur.tags->emplace_back(tag);
    open = true;
  }
  if (open) finish();
  return out;
}

inline std::string serialize_bio(std::span<const Sequence> seqs) {
  std::string out;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    if (!s.tags) fail(ErrorCode::invalid_argument, "sequence " + std::to_string(i) + " is untagged");
    if (s.tags->size() != s.tokens.size()) {
      fail(ErrorCode::invalid_argument, "sequence " + std::to_string(i) + " has mismatched tag count");
    }
    for (std::size_t k = 0; k < s.tokens.size(); ++k) {
      utf8::append(out, s.tokens[k]);
      out.push_back('\t');
      out += (*s.tags)[k];
      out.push_back('\n');
    }
    out.push_back('\n');
  }
  return out;
}

inline constexpr int kClsId = 0;
inline constexpr int kSepId = 1;
inline constexpr int kPadId = 2;
inline constexpr int kUnkId = 3;
inline constexpr std::size_t kNumSpecials = 4;

class Vocabulary {
 public:
  Vocabulary() : tokens_{"[CLS]", "[SEP]", "[PAD]", "[UNK]"} {}

  std::size_t size() const { return tokens_.size(); }

  int id_of(char32_t c) const {
    auto it = ids_.find(c);
    return it == ids_.end() ? kUnkId : it->second;
  }

  std::optional<int> find(char32_t c) const {
    auto it = ids_.find(c);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& token(std::size_t id) const { return tokens_.at(id); }

  void add(char32_t c) {
    if (ids_.contains(c)) fail(ErrorCode::invalid_argument, "duplicate vocabulary character");
    ids_.emplace(c, static_cast<int>(tokens_.size()));
    tokens_.push_back(utf8::encode(c));
  }

  // One token per line, line number = id. Newline, carriage return and
  // backslash characters are written as \n, \r and \\.
  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) {
      for (char ch : t) {
        if (ch == '\n') out += "\\n";
        else if (ch == '\r') out += "\\r";
        else if (ch == '\\') out += "\\\\";
        else out.push_back(ch);
      }
      out.push_back('\n');
    }
    return out;
  }

  static Vocabulary parse(std::string_view text) {
    Vocabulary v;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
      auto nl = text.find('\n', pos);
      if (nl == std::string_view::npos) nl = text.size();
      std::string_view raw = text.substr(pos, nl - pos);
      pos = nl + 1;
      std::string line;
      for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i] == '\\' && i + 1 < raw.size()) {
          const char e = raw[++i];
          line.push_back(e == 'n' ? '\n' : e == 'r' ? '\r' : e);
        } else {
          line.push_back(raw[i]);
        }
      }
      if (line_no < kNumSpecials) {
        if (line != v.tokens_[line_no]) fail(ErrorCode::format, "vocabulary special token mismatch at line " + std::to_string(line_no + 1));
      } else {
        const auto cps = utf8::decode(line);
        if (cps.size() != 1) fail(ErrorCode::format, "vocabulary line " + std::to_string(line_no + 1) + " is not one character");
        v.add(cps[0]);
      }
      ++line_no;
    }
    if (line_no < kNumSpecials) fail(ErrorCode::format, "vocabulary file lacks special tokens");
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<char32_t, int> ids_;
};

// Specials take ids 0-3; characters follow by descending frequency, ties
// broken by ascending code point, truncated at max_size entries.
template <typename Range>
Vocabulary build_vocab(const Range& corpus, std::size_t max_size) {
  require(max_size >= kNumSpecials + 1, "vocabulary max_size must be >= 5");
  std::unordered_map<char32_t, std::uint64_t> freq;
  for (const Document& doc : corpus) {
    for (char32_t c : doc.text) ++freq[c];
  }
  std::vector<std::pair<char32_t, std::uint64_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [c, n] : ranked) {
    if (v.size() >= max_size) break;
    v.add(c);
  }
  return v;
}

inline std::vector<int> encode_ids(std::u32string_view tokens, const Vocabulary& vocab) {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (char32_t c : tokens) out.push_back(vocab.id_of(c));
  return out;
}

inline std::vector<int> encode_ids(const Sequence& seq, const Vocabulary& vocab) { return encode_ids(seq.tokens, vocab); }

namespace detail {

struct SplitLabel {
  char prefix;  // 'B', 'I' or 'O'
  std::string_view type;
};

inline SplitLabel split_label(std::string_view label) {
  if (label == "O") return {'O', {}};
  if (label.size() > 2 && (label[0] == 'B' || label[0] == 'I') && label[1] == '-') return {label[0], label.substr(2)};
  fail(ErrorCode::invalid_argument, "malformed BIO label '" + std::string(label) + "'");
}

}  // namespace detail

// Maximal B-led runs become entities. An I-t that does not continue a
// run of type t opens a new entity, as if it were B-t.
inline std::vector<Entity> extract_entities(std::span<const std::string> tags, std::u32string_view tokens = {}) {
  std::vector<Entity> out;
  std::optional<Entity> cur;
  auto close = [&](std::size_t end) {
    if (!cur) return;
    cur->end = end;
    if (!tokens.empty()) cur->text = std::u32string(tokens.substr(cur->start, end - cur->start));
    out.push_back(std::move(*cur));
    cur.reset();
  };
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto [prefix, type] = detail::split_label(tags[i]);
    if (prefix == 'O') {
      close(i);
    } else if (prefix == 'B' || !cur || cur->etype != type) {
      close(i);
      cur = Entity{std::string(type), i, i, {}};
    }
  }
  close(tags.size());
  return out;
}

inline std::vector<Entity> extract_entities(const Sequence& seq) {
  require(seq.tagged(), "cannot extract entities from an untagged sequence");
  return extract_entities(*seq.tags, seq.tokens);
}

// Inverse of extract_entities for non-overlapping spans.
inline std::vector<std::string> tags_from_entities(std::size_t length, std::span<const Entity> entities) {
  std::vector<std::string> tags(length, "O");
  for (const auto& e : entities) {
    require(e.start < e.end && e.end <= length, "entity span out of range");
    for (std::size_t i = e.start; i < e.end; ++i) {
      require(tags[i] == "O", "overlapping entities");
      tags[i] = (i == e.start ? "B-" : "I-") + e.etype;
    }
  }
  return tags;
}

}  // namespace ragner
