#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dspert/config.hpp"
#include "dspert/data.hpp"
#include "dspert/errors.hpp"
#include "dspert/model.hpp"
#include "dspert/rng.hpp"

namespace dspert {

// Layout (all integers little-endian):
//   "DSPERTCK" | u32 version
//   config:  u64 length | JSON bytes | u64 checksum
//   u64 tensor count
//   tensor:  u32 name length | name | u32 ndim | u64 dims... | f64 values... | u64 checksum
//   rng:     u64 seed | u64 position | u64 checksum
// Each checksum is FNV-1a over the bytes of its own section.

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'P', 'E', 'R', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model_config;
  Vocab vocab;
  nlohmann::json run;  // free-form snapshot of the run settings
  Model model;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_position = 0;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes, std::size_t from, std::size_t to) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = from; i < to; ++i) {
    h ^= static_cast<unsigned char>(bytes[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const std::string& s) { buf_ += s; }
  std::size_t size() const { return buf_.size(); }
  void checksum_since(std::size_t mark) { u64(fnv1a(buf_, mark, buf_.size())); }
  const std::string& bytes() const { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : buf_(std::move(bytes)) {}

  std::uint32_t u32(const std::string& section) { return static_cast<std::uint32_t>(get(4, section)); }
  std::uint64_t u64(const std::string& section) { return get(8, section); }
  double f64(const std::string& section) { return std::bit_cast<double>(get(8, section)); }
  std::string raw(std::size_t n, const std::string& section) {
    need(n, section);
    std::string out = buf_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::size_t pos() const { return pos_; }
  /// Rejects a declared payload that cannot fit in the remaining bytes.
  void expect_payload(std::uint64_t count, std::uint64_t width, const std::string& section) const {
    const std::uint64_t left = buf_.size() - pos_;
    if (width != 0 && count > left / width) {
      throw IntegrityError("corrupt or truncated checkpoint in section " + section + ": declares " +
                           std::to_string(count) + " items, " + std::to_string(left) + " bytes remain");
    }
  }
  bool at_end() const { return pos_ == buf_.size(); }
  void verify_since(std::size_t mark, const std::string& section) {
    const std::uint64_t expected = fnv1a(buf_, mark, pos_);
    if (u64(section) != expected) throw IntegrityError("checksum mismatch in section " + section);
  }

 private:
  void need(std::size_t n, const std::string& section) {
    if (buf_.size() - pos_ < n) throw IntegrityError("truncated checkpoint in section " + section);
  }
  std::uint64_t get(int n, const std::string& section) {
    need(static_cast<std::size_t>(n), section);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Model& model, const Vocab& vocab,
                                     const nlohmann::json& run = nlohmann::json::object(),
                                     const Rng& rng = Rng()) {
  detail::ByteWriter w;
  w.raw(std::string(kCheckpointMagic, sizeof(kCheckpointMagic)));
  w.u32(kCheckpointVersion);

  const std::string blob =
      nlohmann::json{{"model", to_json(model.config())}, {"vocab", vocab.to_json()}, {"run", run}}.dump();
  std::size_t mark = w.size();
  w.u64(blob.size());
  w.raw(blob);
  w.checksum_since(mark);

  const auto params = model.named_parameters();
  w.u64(params.size());
  for (const auto& [name, t] : params) {
    mark = w.size();
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
    w.checksum_since(mark);
  }

  mark = w.size();
  w.u64(rng.seed());
  w.u64(rng.position());
  w.checksum_since(mark);
  return w.bytes();
}

/// Decodes a checkpoint. When `expected` is given the model is built from it
/// instead of the stored config, so shape disagreements name the parameter.
inline Checkpoint decode_checkpoint(std::string bytes, const ModelConfig* expected = nullptr) {
  detail::ByteReader r(std::move(bytes));
  if (r.raw(sizeof(kCheckpointMagic), "header") != std::string(kCheckpointMagic, sizeof(kCheckpointMagic)))
    throw IntegrityError("not a checkpoint file (bad magic bytes in section header)");
  const std::uint32_t version = r.u32("header");
  if (version != kCheckpointVersion) {
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version) +
                         " (expected " + std::to_string(kCheckpointVersion) + ")");
  }

  Checkpoint ck;
  std::size_t mark = r.pos();
  const std::uint64_t blob_len = r.u64("config");
  const std::string blob = r.raw(blob_len, "config");
  r.verify_since(mark, "config");
  try {
    const auto j = nlohmann::json::parse(blob);
    ck.model_config = model_config_from_json(j.at("model"));
    ck.vocab = Vocab::from_json(j.at("vocab"));
    ck.run = j.at("run");
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed section config: ") + e.what());
  }
  const ModelConfig& cfg = expected ? *expected : ck.model_config;
  Rng scratch(0);
  ck.model = Model::create(cfg, scratch);

  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : ck.model.named_parameters()) by_name.emplace(name, t);

  const std::uint64_t count = r.u64("tensor table");
  if (count != by_name.size()) {
    throw DimensionError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                         std::to_string(by_name.size()));
  }
  for (std::uint64_t n = 0; n < count; ++n) {
    mark = r.pos();
    const std::string where = "tensor #" + std::to_string(n);
    const std::string name = r.raw(r.u32(where), where);
    const std::string section = "tensor '" + name + "'";
    const std::uint32_t ndim = r.u32(section);
    r.expect_payload(ndim, 8, section);
    Shape shape(ndim);
    std::uint64_t size = 1;
    for (auto& d : shape) {
      d = r.u64(section);
      r.expect_payload(d, 1, section);
      size *= d;
      r.expect_payload(size, 8, section);
    }
    std::vector<double> values(size);
    for (auto& v : values) v = r.f64(section);
    r.verify_since(mark, section);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DimensionError("checkpoint parameter '" + name + "' not in model");
    if (it->second.shape() != shape) {
      throw DimensionError("shape mismatch for parameter '" + name + "': checkpoint " +
                           shape_str(shape) + ", model " + shape_str(it->second.shape()));
    }
    it->second.mutable_data() = std::move(values);
  }

  mark = r.pos();
  ck.rng_seed = r.u64("rng");
  ck.rng_position = r.u64("rng");
  r.verify_since(mark, "rng");
  if (!r.at_end()) throw IntegrityError("trailing bytes after section rng");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab,
                            const nlohmann::json& run = nlohmann::json::object(),
                            const Rng& rng = Rng()) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(model, vocab, run, rng);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::move(bytes), expected);
}

}  // namespace dspert
