#pragma once

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "dspert/errors.hpp"
#include "dspert/rng.hpp"

namespace dspert {

/// Typed gold or predicted span, end-exclusive.
struct Entity {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string type;

  std::size_t width() const { return end - start; }
  auto operator<=>(const Entity&) const = default;
};

struct Sentence {
  std::vector<std::string> tokens;
  std::set<Entity> gold;

  /// Adds a gold span after bounds and duplicate checks.
  void add_entity(Entity e) {
    if (e.start >= e.end || e.end > tokens.size()) {
      throw DataError("entity (" + std::to_string(e.start) + ", " + std::to_string(e.end) +
                      ", " + e.type + ") invalid for " + std::to_string(tokens.size()) +
                      " tokens");
    }
    for (const auto& g : gold) {
      if (g.start == e.start && g.end == e.end && g.type != e.type) {
        throw DataError("span (" + std::to_string(e.start) + ", " + std::to_string(e.end) +
                        ") labelled both " + g.type + " and " + e.type);
      }
    }
    gold.insert(std::move(e));
  }

  bool operator==(const Sentence&) const = default;
};

/// Collects non-fatal parser diagnostics; without one they go to stderr.
using WarningSink = std::vector<std::string>;

namespace detail {

inline void warn(WarningSink* sink, std::string message) {
  if (sink) {
    sink->push_back(std::move(message));
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

inline std::string_view trim_cr(std::string_view line) {
  while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
  return line;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Vocabulary

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kUnkId = 1;
inline constexpr std::size_t kNonEntity = 0;
inline constexpr std::string_view kNonEntityName = "O";

/// Token and type indices, frozen after construction from the training split.
class Vocab {
 public:
  Vocab() : Vocab({"<pad>", "<unk>"}, {std::string(kNonEntityName)}) {}

  /// Explicit tables; index 0/1 of `tokens` and 0 of `types` are the reserved
  /// entries.
  Vocab(const std::vector<std::string>& tokens, const std::vector<std::string>& types) {
    for (const auto& t : tokens) add_token(t);
    for (const auto& t : types) add_type(t);
  }

  static Vocab build(const std::vector<Sentence>& train) {
    Vocab v;
    std::set<std::string> words, types;
    for (const auto& s : train) {
      words.insert(s.tokens.begin(), s.tokens.end());
      for (const auto& e : s.gold) types.insert(e.type);
    }
    for (const auto& w : words) v.add_token(w);
    for (const auto& t : types) v.add_type(t);
    return v;
  }

  std::size_t token_count() const { return tokens_.size(); }
  std::size_t type_count() const { return types_.size(); }

  std::size_t token_id(const std::string& word) const {
    auto it = token_index_.find(word);
    return it == token_index_.end() ? kUnkId : it->second;
  }

  std::vector<std::size_t> encode(const std::vector<std::string>& words) const {
    std::vector<std::size_t> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(token_id(w));
    return ids;
  }

  std::optional<std::size_t> type_index(const std::string& type) const {
    auto it = type_index_.find(type);
    if (it == type_index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& type_name(std::size_t index) const { return types_.at(index); }
  const std::vector<std::string>& types() const { return types_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::json to_json() const { return {{"tokens", tokens_}, {"types", types_}}; }

  static Vocab from_json(const nlohmann::json& j) {
    Vocab v(j.at("tokens").get<std::vector<std::string>>(),
            j.at("types").get<std::vector<std::string>>());
    if (v.tokens_.size() < 2 || v.types_.empty() || v.types_[0] != kNonEntityName) {
      throw DataError("vocabulary is missing reserved entries");
    }
    return v;
  }

 private:
  void add_token(const std::string& w) {
    if (token_index_.emplace(w, tokens_.size()).second) tokens_.push_back(w);
  }
  void add_type(const std::string& t) {
    if (type_index_.emplace(t, types_.size()).second) types_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::vector<std::string> types_;
  std::unordered_map<std::string, std::size_t> token_index_;
  std::unordered_map<std::string, std::size_t> type_index_;
};

// ---------------------------------------------------------------------------
// BIO TSV

struct BioOptions {
  bool strict = false;  // reject orphan I- tags instead of repairing them
};

/// "token<TAB>tag" lines, blank-line separated. Contiguous B-X/I-X runs
/// become end-exclusive spans.
inline std::vector<Sentence> parse_bio(std::string_view text, BioOptions options = {},
                                       WarningSink* warnings = nullptr) {
  std::vector<Sentence> out;
  Sentence current;
  std::optional<Entity> open;
  std::size_t line_no = 0;

  auto close_open = [&] {
    if (open) {
      open->end = current.tokens.size();
      current.add_entity(*open);
      open.reset();
    }
  };
  auto flush = [&] {
    close_open();
    if (!current.tokens.empty()) out.push_back(std::move(current));
    current = Sentence{};
  };

  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string_view line = detail::trim_cr(raw);
    if (line.empty()) {
      flush();
      continue;
    }
    if (line.starts_with("-DOCSTART-")) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) {
      throw DataError("line " + std::to_string(line_no) + ": expected token<TAB>tag");
    }
    const std::string token(line.substr(0, tab));
    const std::string_view tag = line.substr(tab + 1);
    if (tag == "O") {
      close_open();
    } else if (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') {
      const std::string type(tag.substr(2));
      const bool continues = tag[0] == 'I' && open && open->type == type;
      if (!continues) {
        if (tag[0] == 'I') {
          const std::string msg = "line " + std::to_string(line_no) + ": orphan I-" + type;
          if (options.strict) throw DataError(msg);
          detail::warn(warnings, msg + " repaired as B-" + type);
        }
        close_open();
        open = Entity{current.tokens.size(), 0, type};
      }
    } else {
      throw DataError("line " + std::to_string(line_no) + ": unknown tag '" + std::string(tag) +
                      "'");
    }
    current.tokens.push_back(token);
  }
  flush();
  return out;
}

/// Inverse of parse_bio for sentences without overlapping spans.
inline std::string serialize_bio(const std::vector<Sentence>& sentences) {
  std::ostringstream os;
  for (const auto& s : sentences) {
    std::vector<std::string> tags(s.tokens.size(), "O");
    for (const auto& e : s.gold) {
      for (std::size_t i = e.start; i < e.end; ++i) {
        if (tags[i] != "O") throw DataError("overlapping spans cannot be written as BIO");
        tags[i] = (i == e.start ? "B-" : "I-") + e.type;
      }
    }
    for (std::size_t i = 0; i < s.tokens.size(); ++i) os << s.tokens[i] << '\t' << tags[i] << '\n';
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// JSONL spans: {"tokens":[...],"entities":[{"start":0,"end":2,"type":"PER"}]}

inline std::vector<Sentence> parse_json_spans(std::string_view text) {
  std::vector<Sentence> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim_cr(line).empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    try {
      const auto j = nlohmann::json::parse(line);
      Sentence s;
      s.tokens = j.at("tokens").get<std::vector<std::string>>();
      if (j.contains("entities")) {
        for (const auto& e : j.at("entities")) {
          const auto start = e.at("start").get<std::int64_t>();
          const auto end = e.at("end").get<std::int64_t>();
          if (start < 0 || end <= start || end > static_cast<std::int64_t>(s.tokens.size())) {
            throw DataError("entity (" + std::to_string(start) + ", " + std::to_string(end) +
                            ") out of range for " + std::to_string(s.tokens.size()) + " tokens");
          }
          s.add_entity({static_cast<std::size_t>(start), static_cast<std::size_t>(end),
                        e.at("type").get<std::string>()});
        }
      }
      out.push_back(std::move(s));
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    }
  }
  return out;
}

inline nlohmann::json sentence_to_json(const Sentence& s) {
  nlohmann::json entities = nlohmann::json::array();
  for (const auto& e : s.gold)
    entities.push_back({{"start", e.start}, {"end", e.end}, {"type", e.type}});
  return {{"tokens", s.tokens}, {"entities", entities}};
}

inline std::string serialize_json_spans(const std::vector<Sentence>& sentences) {
  std::string out;
  for (const auto& s : sentences) out += sentence_to_json(s).dump() + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Nested-structure tags

enum class NestednessTag { Nested, Covering, Both, Flat };

inline std::string_view to_string(NestednessTag tag) {
  switch (tag) {
    case NestednessTag::Nested: return "Nested";
    case NestednessTag::Covering: return "Covering";
    case NestednessTag::Both: return "Both";
    case NestednessTag::Flat: return "Flat";
  }
  return "?";
}

/// How a candidate span must sit relative to a gold entity to count as
/// inside/covering it. Strict requires both boundaries to differ
/// (outer.start < inner.start and inner.end < outer.end); Proper only excludes
/// equal ranges. Gold-gold nesting always uses proper inclusion.
enum class Containment { Strict, Proper };

inline bool properly_contains(std::size_t os, std::size_t oe, std::size_t is, std::size_t ie) {
  return os <= is && ie <= oe && (os != is || oe != ie);
}

inline bool contains(Containment mode, std::size_t os, std::size_t oe, std::size_t is,
                     std::size_t ie) {
  if (mode == Containment::Strict) return os < is && ie < oe;
  return properly_contains(os, oe, is, ie);
}

/// Nested: the span lies inside a gold entity that covers another gold entity.
/// Covering: the span covers a gold entity that lies inside another gold
/// entity. Both: both hold. Flat: neither.
inline NestednessTag nestedness_tag(std::size_t start, std::size_t end, const std::set<Entity>& gold,
                                    Containment mode = Containment::Strict) {
  bool nested = false, covering = false;
  for (const auto& outer : gold) {
    for (const auto& inner : gold) {
      if (!properly_contains(outer.start, outer.end, inner.start, inner.end)) continue;
      nested = nested || contains(mode, outer.start, outer.end, start, end);
      covering = covering || contains(mode, start, end, inner.start, inner.end);
    }
  }
  if (nested && covering) return NestednessTag::Both;
  if (nested) return NestednessTag::Nested;
  if (covering) return NestednessTag::Covering;
  return NestednessTag::Flat;
}

// ---------------------------------------------------------------------------
// Synthetic nested corpus

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t n_sentences = 100;
  std::size_t vocab_size = 20;  // filler words
  double nest_rate = 0.5;
  std::size_t max_len = 14;
  std::size_t num_types = 3;
};

namespace synth {

inline const std::vector<std::string>& type_names() {
  static const std::vector<std::string> names{"PER", "ORG", "LOC", "MISC", "GPE", "FAC"};
  return names;
}

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string opener(const std::string& type, std::size_t variant) {
  return "<" + lower(type) + std::to_string(variant);
}
inline std::string closer(const std::string& type, std::size_t variant) {
  return lower(type) + std::to_string(variant) + ">";
}
inline std::string atom(const std::string& type) { return "@" + lower(type); }

struct Marker {
  enum Kind { None, Open, Close, Atom } kind = None;
  std::string type;
};

inline Marker classify_token(const std::string& tok, std::size_t num_types) {
  for (std::size_t t = 0; t < num_types; ++t) {
    const auto& name = type_names()[t];
    if (tok == atom(name)) return {Marker::Atom, name};
    for (std::size_t v = 0; v < 2; ++v) {
      if (tok == opener(name, v)) return {Marker::Open, name};
      if (tok == closer(name, v)) return {Marker::Close, name};
    }
  }
  return {};
}

/// Gold labels as a pure function of the tokens: an atom token is a width-1
/// entity of its type; (i, j) is an entity of type X when it starts with an X
/// opener, ends with an X closer and contains no other X marker.
inline std::set<Entity> label(const std::vector<std::string>& tokens, std::size_t num_types) {
  std::vector<Marker> marks;
  for (const auto& t : tokens) marks.push_back(classify_token(t, num_types));
  std::set<Entity> gold;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (marks[i].kind == Marker::Atom) gold.insert({i, i + 1, marks[i].type});
    if (marks[i].kind != Marker::Open) continue;
    for (std::size_t j = i + 1; j < tokens.size(); ++j) {
      if (marks[j].type != marks[i].type) continue;
      if (marks[j].kind == Marker::Close) gold.insert({i, j + 1, marks[i].type});
      break;  // first same-type marker ends the search either way
    }
  }
  return gold;
}

}  // namespace synth

/// Deterministic nested-NER corpus. Entities are bracketed by type-marked
/// opener/closer tokens or are single atom tokens; with probability
/// nest_rate an entity is wrapped in a longer entity of another type, and
/// some of those wrapped entities hold a third-level atom. Entity widths
/// never exceed 6.
inline std::vector<Sentence> gen_synthetic(const SynthConfig& cfg) {
  if (!(cfg.nest_rate >= 0.0 && cfg.nest_rate <= 1.0)) {
    throw ConfigError("nest_rate must lie in [0, 1]");
  }
  if (cfg.num_types < 2 || cfg.num_types > synth::type_names().size()) {
    throw ConfigError("num_types must lie in [2, " + std::to_string(synth::type_names().size()) +
                      "]");
  }
  if (cfg.vocab_size == 0 || cfg.max_len < 8) {
    throw ConfigError("synthetic corpus needs vocab_size >= 1 and max_len >= 8");
  }
  Rng rng(cfg.seed);
  const auto& names = synth::type_names();
  auto filler = [&] { return "w" + std::to_string(rng.below(cfg.vocab_size)); };
  auto pick_type = [&] { return names[rng.below(cfg.num_types)]; };

  // An entity of at most max_width tokens, bracketed or atomic.
  auto simple_entity = [&](const std::string& type, std::size_t max_width) {
    std::vector<std::string> toks;
    if (max_width == 1 || rng.below(3) == 0) return std::vector<std::string>{synth::atom(type)};
    toks.push_back(synth::opener(type, rng.below(2)));
    const std::size_t content = rng.below(std::min<std::size_t>(max_width - 2, 2) + 1);
    for (std::size_t c = 0; c < content; ++c) toks.push_back(filler());
    toks.push_back(synth::closer(type, rng.below(2)));
    return toks;
  };

  std::vector<Sentence> corpus;
  corpus.reserve(cfg.n_sentences);
  while (corpus.size() < cfg.n_sentences) {
    std::vector<std::string> tokens;
    bool has_nested = false;
    const std::size_t target_entities = 1 + rng.below(3);
    for (std::size_t e = 0; e < target_entities; ++e) {
      std::vector<std::string> piece;
      const std::string outer = pick_type();
      if (rng.bernoulli(cfg.nest_rate)) {
        std::string inner = pick_type();
        while (inner == outer) inner = pick_type();
        std::vector<std::string> core;
        if (cfg.num_types >= 3 && rng.bernoulli(0.3)) {
          // Third level: the inner entity wraps an atom of yet another type.
          std::string third = pick_type();
          while (third == outer || third == inner) third = pick_type();
          core = {synth::opener(inner, rng.below(2)), synth::atom(third),
                  synth::closer(inner, rng.below(2))};
        } else {
          core = simple_entity(inner, 3);
        }
        const std::size_t room = 4 - core.size();  // outer width <= 6
        const std::size_t before = room > 0 ? rng.below(2) : 0;
        const std::size_t after = room > before ? rng.below(2) : 0;
        piece.push_back(synth::opener(outer, rng.below(2)));
        for (std::size_t i = 0; i < before; ++i) piece.push_back(filler());
        piece.insert(piece.end(), core.begin(), core.end());
        for (std::size_t i = 0; i < after; ++i) piece.push_back(filler());
        piece.push_back(synth::closer(outer, rng.below(2)));
        has_nested = true;
      } else {
        piece = simple_entity(outer, 4);
      }
      const std::size_t gap = 1 + rng.below(2);
      if (tokens.size() + gap + piece.size() > cfg.max_len) break;
      for (std::size_t i = 0; i < gap; ++i) tokens.push_back(filler());
      tokens.insert(tokens.end(), piece.begin(), piece.end());
    }
    if (tokens.size() < cfg.max_len && rng.bernoulli(0.5)) tokens.push_back(filler());
    if (tokens.empty()) continue;
    // nest_rate = 1 promises a nested pair in every sentence.
    if (cfg.nest_rate == 1.0 && !has_nested) continue;
    Sentence s;
    s.tokens = std::move(tokens);
    s.gold = synth::label(s.tokens, cfg.num_types);
    corpus.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace dspert
