#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dspert/data.hpp"
#include "dspert/errors.hpp"
#include "dspert/model.hpp"
#include "dspert/training.hpp"

namespace dspert {

// ---------------------------------------------------------------------------
// Flat key/value files
//
//   # comment
//   seeds = 1, 2, 3
//   [model]
//   maximum_span_size = 6
//   train.batch_size = 8
//
// A [section] header prefixes the keys below it; dotted keys may also name
// the section directly. Values may be double-quoted.

struct ConfigEntry {
  std::string value;
  std::size_t line = 0;
};

using ConfigEntries = std::map<std::string, ConfigEntry>;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace detail

inline ConfigEntries parse_config_text(std::string_view text) {
  ConfigEntries out;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    std::string line = raw;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = detail::trim(line);
    if (line.empty()) continue;
    auto where = [&] { return "line " + std::to_string(line_no) + ": "; };
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where() + "unterminated section header");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where() + "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where() + "expected key = value");
    std::string key = detail::trim(std::string_view(line).substr(0, eq));
    std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError(where() + "empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    if (out.count(key)) throw ConfigError(where() + "duplicate key '" + key + "'");
    out[key] = {value, line_no};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration

enum class DataFormat { Bio, JsonSpans };

inline std::string_view to_string(DataFormat f) { return f == DataFormat::Bio ? "bio" : "jsonl"; }

inline DataFormat parse_data_format(std::string_view name) {
  if (name == "bio") return DataFormat::Bio;
  if (name == "jsonl") return DataFormat::JsonSpans;
  throw ConfigError("unknown data format '" + std::string(name) + "' (expected bio or jsonl)");
}

struct DataConfig {
  std::string train;
  std::string dev;
  std::string test;
  DataFormat format = DataFormat::JsonSpans;
  // Used when no train path is given.
  SynthConfig synth;
  std::size_t synth_train = 50;
  std::size_t synth_dev = 20;

  bool synthetic() const { return train.empty(); }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::vector<std::uint64_t> seeds{1};

  void validate() const {
    model.validate();
    train.validate();
    if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
    if (!data.synthetic() && data.dev.empty())
      throw ConfigError("data.dev is required when data.train is set");
  }
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const ConfigEntry& e) {
  T value{};
  const char* begin = e.value.data();
  const char* end = begin + e.value.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("line " + std::to_string(e.line) + ": key '" + key +
                      "' expects a number, got '" + e.value + "'");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const ConfigEntry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  throw ConfigError("line " + std::to_string(e.line) + ": key '" + key +
                    "' expects true or false, got '" + e.value + "'");
}

}  // namespace detail

inline std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  std::vector<std::uint64_t> out;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    out.push_back(detail::parse_number<std::uint64_t>("seeds", {item, 0}));
  }
  return out;
}

inline std::vector<std::size_t> parse_size_list(std::string_view text, const std::string& what) {
  std::vector<std::size_t> out;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    out.push_back(detail::parse_number<std::size_t>(what, {item, 0}));
  }
  return out;
}

/// Builds a RunConfig from parsed entries. Relative data paths resolve against
/// base_dir. Unknown keys are rejected.
inline RunConfig run_config_from_entries(const ConfigEntries& entries,
                                         const std::filesystem::path& base_dir = {}) {
  RunConfig c;
  auto& m = c.model;
  auto& t = c.train;
  auto& d = c.data;
  auto path = [&](const ConfigEntry& e) {
    std::filesystem::path p(e.value);
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    return p.string();
  };
  for (const auto& [key, e] : entries) {
    using detail::parse_bool;
    using detail::parse_number;
    auto size = [&] { return parse_number<std::size_t>(key, e); };
    auto real = [&] { return parse_number<double>(key, e); };
    if (key == "seeds") c.seeds = parse_seed_list(e.value);
    else if (key == "model.num_layers") m.num_layers = size();
    else if (key == "model.hidden_size") m.hidden_size = size();
    else if (key == "model.num_heads") m.num_heads = size();
    else if (key == "model.transformer_ffn_size") m.ffn_size = size();
    else if (key == "model.max_len") m.max_len = size();
    else if (key == "model.maximum_span_size") m.max_span_size = size();
    else if (key == "model.span_depth") m.span_depth = size();
    else if (key == "model.initial_aggregation") m.aggregation = parse_aggregation(e.value);
    else if (key == "model.share_weights") m.share_weights = parse_bool(key, e);
    else if (key == "model.per_width_span_params") m.per_width_span_params = parse_bool(key, e);
    else if (key == "model.use_bilstm") m.use_bilstm = parse_bool(key, e);
    else if (key == "model.sinusoidal_positions") m.sinusoidal_positions = parse_bool(key, e);
    else if (key == "model.lstm_hidden_size") m.lstm_hidden_size = size();
    else if (key == "model.width_embedding_size") m.width_embedding_size = size();
    else if (key == "model.ffn_hidden_size") m.ffn_hidden_size = size();
    else if (key == "model.biaffine_size") m.biaffine_size = size();
    else if (key == "model.head") m.head = parse_head_kind(e.value);
    else if (key == "model.dropout") m.dropout = real();
    else if (key == "model.ffn_dropout") m.ffn_dropout = real();
    else if (key == "model.lstm_dropout") m.lstm_dropout = real();
    else if (key == "train.number_of_epochs") t.epochs = size();
    else if (key == "train.batch_size") t.batch_size = size();
    else if (key == "train.learning_rate_pretrained") t.lr_pretrained = real();
    else if (key == "train.learning_rate_other") t.lr_fresh = real();
    else if (key == "train.warmup_fraction") t.warmup_fraction = real();
    else if (key == "train.gradient_clip_norm") t.clip_norm = real();
    else if (key == "train.boundary_smoothing_epsilon") t.smoothing_epsilon = real();
    else if (key == "train.boundary_smoothing_distance") t.smoothing_distance = size();
    else if (key == "train.weight_decay") t.weight_decay = real();
    else if (key == "train.seed") t.seed = parse_number<std::uint64_t>(key, e);
    else if (key == "train.eval_train") t.eval_train = parse_bool(key, e);
    else if (key == "data.train") d.train = path(e);
    else if (key == "data.dev") d.dev = path(e);
    else if (key == "data.test") d.test = path(e);
    else if (key == "data.format") d.format = parse_data_format(e.value);
    else if (key == "synth.seed") d.synth.seed = parse_number<std::uint64_t>(key, e);
    else if (key == "synth.train_sentences") d.synth_train = size();
    else if (key == "synth.dev_sentences") d.synth_dev = size();
    else if (key == "synth.nest_rate") d.synth.nest_rate = real();
    else if (key == "synth.vocab_size") d.synth.vocab_size = size();
    else if (key == "synth.max_len") d.synth.max_len = size();
    else if (key == "synth.num_types") d.synth.num_types = size();
    else {
      throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + key + "'");
    }
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return run_config_from_entries(parse_config_text(buf.str()), path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// JSON snapshots (checkpoint blobs and metrics metadata)

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"vocab_size", m.vocab_size},
          {"max_len", m.max_len},
          {"num_classes", m.num_classes},
          {"num_layers", m.num_layers},
          {"hidden_size", m.hidden_size},
          {"num_heads", m.num_heads},
          {"transformer_ffn_size", m.ffn_size},
          {"maximum_span_size", m.max_span_size},
          {"span_depth", m.span_depth},
          {"initial_aggregation", std::string(to_string(m.aggregation))},
          {"share_weights", m.share_weights},
          {"per_width_span_params", m.per_width_span_params},
          {"use_bilstm", m.use_bilstm},
          {"sinusoidal_positions", m.sinusoidal_positions},
          {"lstm_hidden_size", m.lstm_hidden_size},
          {"width_embedding_size", m.width_embedding_size},
          {"ffn_hidden_size", m.ffn_hidden_size},
          {"biaffine_size", m.biaffine_size},
          {"head", std::string(to_string(m.head))},
          {"dropout", m.dropout},
          {"ffn_dropout", m.ffn_dropout},
          {"lstm_dropout", m.lstm_dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.vocab_size = j.at("vocab_size").get<std::size_t>();
  m.max_len = j.at("max_len").get<std::size_t>();
  m.num_classes = j.at("num_classes").get<std::size_t>();
  m.num_layers = j.at("num_layers").get<std::size_t>();
  m.hidden_size = j.at("hidden_size").get<std::size_t>();
  m.num_heads = j.at("num_heads").get<std::size_t>();
  m.ffn_size = j.at("transformer_ffn_size").get<std::size_t>();
  m.max_span_size = j.at("maximum_span_size").get<std::size_t>();
  m.span_depth = j.at("span_depth").get<std::size_t>();
  m.aggregation = parse_aggregation(j.at("initial_aggregation").get<std::string>());
  m.share_weights = j.at("share_weights").get<bool>();
  m.per_width_span_params = j.at("per_width_span_params").get<bool>();
  m.use_bilstm = j.at("use_bilstm").get<bool>();
  m.sinusoidal_positions = j.value("sinusoidal_positions", false);
  m.lstm_hidden_size = j.at("lstm_hidden_size").get<std::size_t>();
  m.width_embedding_size = j.at("width_embedding_size").get<std::size_t>();
  m.ffn_hidden_size = j.at("ffn_hidden_size").get<std::size_t>();
  m.biaffine_size = j.at("biaffine_size").get<std::size_t>();
  m.head = parse_head_kind(j.at("head").get<std::string>());
  m.dropout = j.at("dropout").get<double>();
  m.ffn_dropout = j.at("ffn_dropout").get<double>();
  m.lstm_dropout = j.at("lstm_dropout").get<double>();
  return m;
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"number_of_epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"learning_rate_pretrained", t.lr_pretrained},
          {"learning_rate_other", t.lr_fresh},
          {"warmup_fraction", t.warmup_fraction},
          {"gradient_clip_norm", t.clip_norm},
          {"boundary_smoothing_epsilon", t.smoothing_epsilon},
          {"boundary_smoothing_distance", t.smoothing_distance},
          {"weight_decay", t.weight_decay},
          {"seed", t.seed}};
}

}  // namespace dspert
