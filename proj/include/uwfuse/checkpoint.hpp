// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint layout (all integers little-endian):
//
//   "UWFCKPT\0"  u32 version
//   u32 n, n bytes of UTF-8 `key = value` config text
//   u64 global step
//   u32 tensor count, then per tensor:
//     u32 name length, name, u32 ndim, ndim x u32 dims, f32 payload
//
// Tensor names are G/<param>, D/<param>, adamG/{m,v}/<param>, adamD/{m,v}/<param>.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "uwfuse/config.hpp"
#include "uwfuse/models.hpp"
#include "uwfuse/optim.hpp"

namespace uwfuse {

inline constexpr char kCheckpointMagic[8] = {'U', 'W', 'F', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything training needs to continue from a given step.
struct TrainState {
  TrainConfig config;
  Generator generator;
  Discriminator discriminator;
  AdamState adam_g;
  AdamState adam_d;
  std::int64_t step = 0;

  /// Freshly initialized models and zeroed optimizer moments.
  explicit TrainState(const TrainConfig& cfg)
      : config(cfg),
        generator(cfg.model, mix_seed(cfg.seed, 1)),
        discriminator(cfg.model, mix_seed(cfg.seed, 2)),
        adam_g(AdamState::for_params(generator.params(), cfg.lr, cfg.beta1, cfg.beta2)),
        adam_d(AdamState::for_params(discriminator.params(), cfg.lr, cfg.beta1, cfg.beta2)) {}

  bool operator==(const TrainState& o) const {
    return config == o.config && step == o.step && generator.params() == o.generator.params() &&
           discriminator.params() == o.discriminator.params() && adam_g == o.adam_g && adam_d == o.adam_d;
  }
};

namespace detail {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) u32(std::bit_cast<std::uint32_t>(v));
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data, std::string source) : buf_(std::move(data)), source_(std::move(source)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return raw(u32()); }
  std::pair<std::string, Tensor> tensor() {
    std::string name = str();
    const std::uint32_t rank = u32();
    if (rank > 8) fail("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(u32()));
    const std::size_t n = numel(shape);
    need(n * 4);
    std::vector<float> v(n);
    for (float& x : v) x = std::bit_cast<float>(u32());
    return {std::move(name), Tensor(std::move(shape), std::move(v))};
  }
  bool done() const { return pos_ == buf_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw Error("checkpoint '" + source_ + "': " + what);
  }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) fail("truncated");
  }
  std::string buf_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline void write_store(Writer& w, const std::string& prefix, const ParameterStore& s) {
  for (std::size_t i = 0; i < s.size(); ++i) w.tensor(prefix + s.names()[i], s.values()[i]);
}

inline void write_moments(Writer& w, const std::string& prefix, const ParameterStore& s, const AdamState& a) {
  for (std::size_t i = 0; i < s.size(); ++i) w.tensor(prefix + "m/" + s.names()[i], a.m[i]);
  for (std::size_t i = 0; i < s.size(); ++i) w.tensor(prefix + "v/" + s.names()[i], a.v[i]);
}

}  // namespace detail

inline std::string checkpoint_config_text(const TrainState& s) {
  std::string text = serialize(s.config);
  text += "adam_eps = " + text::format(s.adam_g.eps) + "\n";
  text += "adam_g_step = " + std::to_string(s.adam_g.step) + "\n";
  text += "adam_d_step = " + std::to_string(s.adam_d.step) + "\n";
  text += "init = " + detail::kInitScheme + "\n";
  return text;
}

inline std::string encode_checkpoint(const TrainState& s) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(checkpoint_config_text(s));
  w.u64(static_cast<std::uint64_t>(s.step));
  const std::size_t ng = s.generator.params().size(), nd = s.discriminator.params().size();
  w.u32(static_cast<std::uint32_t>(3 * ng + 3 * nd));
  detail::write_store(w, "G/", s.generator.params());
  detail::write_store(w, "D/", s.discriminator.params());
  detail::write_moments(w, "adamG/", s.generator.params(), s.adam_g);
  detail::write_moments(w, "adamD/", s.discriminator.params(), s.adam_d);
  return w.buffer();
}

/// Writes to `<path>.tmp` then renames, so an interrupted write never leaves a
/// truncated checkpoint at `path`.
inline void save_checkpoint(const std::filesystem::path& path, const TrainState& s) {
  const std::string bytes = encode_checkpoint(s);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw Error("failed writing checkpoint '" + tmp.string() + "' (disk full?)");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

inline TrainState decode_checkpoint(std::string bytes, const std::string& source) {
  detail::Reader r(std::move(bytes), source);
  if (r.raw(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
    r.fail("bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion) r.fail("unsupported version " + std::to_string(v));

  auto kv = text::parse_key_values(r.str());
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) r.fail("missing config key '" + key + "'");
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  const float eps = text::parse<float>(take("adam_eps"), "adam_eps");
  const auto g_step = text::parse<std::int64_t>(take("adam_g_step"), "adam_g_step");
  const auto d_step = text::parse<std::int64_t>(take("adam_d_step"), "adam_d_step");
  if (const std::string init{text::trim(take("init"))}; init != detail::kInitScheme)
    r.fail("written with initialization '" + init + "', this build uses '" + detail::kInitScheme + "'");
  TrainConfig cfg;
  apply_key_values(cfg, kv);
  cfg.validate();

  TrainState s(cfg);
  s.adam_g.eps = s.adam_d.eps = eps;
  s.adam_g.step = g_step;
  s.adam_d.step = d_step;
  s.step = static_cast<std::int64_t>(r.u64());

  std::map<std::string, Tensor*> slots;
  auto bind = [&](const std::string& prefix, ParameterStore& store) {
    for (std::size_t i = 0; i < store.size(); ++i) slots[prefix + store.names()[i]] = &store.mutable_values()[i];
  };
  auto bind_moments = [&](const std::string& prefix, const ParameterStore& store, AdamState& a) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      slots[prefix + "m/" + store.names()[i]] = &a.m[i];
      slots[prefix + "v/" + store.names()[i]] = &a.v[i];
    }
  };
  bind("G/", s.generator.params());
  bind("D/", s.discriminator.params());
  bind_moments("adamG/", s.generator.params(), s.adam_g);
  bind_moments("adamD/", s.discriminator.params(), s.adam_d);

  const std::uint32_t count = r.u32();
  if (count != slots.size())
    r.fail("holds " + std::to_string(count) + " tensors, config implies " + std::to_string(slots.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = r.tensor();
    auto it = slots.find(name);
    if (it == slots.end()) r.fail("unexpected tensor '" + name + "'");
    if (it->second->shape() != t.shape())
      r.fail("tensor '" + name + "' has shape " + to_string(t.shape()) + ", config implies " +
             to_string(it->second->shape()));
    *it->second = std::move(t);
    slots.erase(it);
  }
  if (!slots.empty()) r.fail("missing tensor '" + slots.begin()->first + "'");
  if (!r.done()) r.fail("trailing bytes");
  return s;
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::move(bytes), path.string());
}

}  // namespace uwfuse
