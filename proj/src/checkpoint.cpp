// SPDX-License-Identifier: Apache-2.0
#include "sure/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sure {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    out_.append(s);
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t count(std::size_t elem_size) {
    const std::uint64_t n = u64();
    if (elem_size && n > (in_.size() - pos_) / elem_size) throw CheckpointError("checkpoint: length field exceeds file");
    return static_cast<std::size_t>(n);
  }
  std::string str() {
    const std::size_t n = count(1);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

void write_state(Writer& w, const Checkpoint& h, const RunState& s) {
  w.u8(static_cast<std::uint8_t>(h.method));
  w.u64(h.order_id);
  w.u64(h.seed);
  w.u64(s.next_stage);
  w.u64(s.step);
  w.u64(s.rejected_steps);
  w.u64(s.log_records);
  w.u64(s.rng.state());

  const auto params = s.model.all_parameters();
  w.u64(params.size());
  for (const auto* p : params) {
    w.str(p->name);
    w.u64(p->value.size());
    for (double x : p->value.values()) w.f64(x);
  }

  w.u8(s.memory ? 1 : 0);
  if (s.memory) {
    const auto& m = *s.memory;
    w.u64(m.capacity());
    w.u8(static_cast<std::uint8_t>(m.policy()));
    w.u8(static_cast<std::uint8_t>(m.timing()));
    w.u8(m.aging() ? 1 : 0);
    const auto st = m.state();
    w.u64(st.entries.size());
    for (const auto& e : st.entries) {
      w.u64(e.tokens.size());
      for (Token t : e.tokens) w.u32(t);
      w.u64(e.task);
      w.u8(e.score ? 1 : 0);
      if (e.score) {
        w.f64(e.score->value);
        w.u8(static_cast<std::uint8_t>(e.score->variant));
        w.u64(e.score->token_count);
        w.u64(e.score->scored_at);
      }
      w.u64(e.inserted_at);
    }
    w.u64(st.seen_total);
    w.u64(st.seen_per_task.size());
    for (const auto& [task, n] : st.seen_per_task) {
      w.u64(task);
      w.u64(n);
    }
    w.u64(st.shortfall_total);
  }

  w.u64(s.matrix.size());
  for (double x : s.matrix.cells()) w.f64(x);
}

Checkpoint read_state(Reader& r, RunState& s) {
  Checkpoint h;
  const std::uint8_t method = r.u8();
  if (method > static_cast<std::uint8_t>(Method::slow_surprise)) throw CheckpointError("checkpoint: bad method tag");
  h.method = static_cast<Method>(method);
  h.order_id = r.u64();
  h.seed = r.u64();
  s.next_stage = r.u64();
  s.step = r.u64();
  s.rejected_steps = r.u64();
  s.log_records = r.u64();
  s.rng.set_state(r.u64());

  auto params = s.model.all_parameters();
  if (r.count(0) != params.size()) throw CheckpointError("checkpoint: parameter count does not match the model");
  for (auto* p : params) {
    if (r.str() != p->name) throw CheckpointError("checkpoint: parameter order differs from the model");
    if (r.count(8) != p->value.size()) throw CheckpointError("checkpoint: parameter '" + p->name + "' has wrong size");
    for (double& x : p->value.values()) x = r.f64();
    p->touch();
  }

  const bool has_memory = r.u8() != 0;
  if (has_memory != s.memory.has_value()) throw CheckpointError("checkpoint: replay memory presence differs");
  if (has_memory) {
    auto& m = *s.memory;
    const std::uint64_t cap = r.u64();
    const auto policy = static_cast<BufferPolicy>(r.u8());
    const auto timing = static_cast<Timing>(r.u8());
    const bool aging = r.u8() != 0;
    if (cap != m.capacity() || policy != m.policy() || timing != m.timing() || aging != m.aging()) {
      throw CheckpointError("checkpoint: replay memory settings differ from the schedule");
    }
    ReplayMemory::State st;
    st.entries.resize(r.count(17));
    for (auto& e : st.entries) {
      e.tokens.resize(r.count(4));
      for (Token& t : e.tokens) t = r.u32();
      e.task = r.u64();
      if (r.u8()) {
        SurpriseScore sc;
        sc.value = r.f64();
        sc.variant = static_cast<SurpriseVariant>(r.u8());
        sc.token_count = r.u64();
        sc.scored_at = r.u64();
        e.score = sc;
      }
      e.inserted_at = r.u64();
    }
    st.seen_total = r.u64();
    const std::size_t n_tasks = r.count(16);
    for (std::size_t i = 0; i < n_tasks; ++i) {
      const std::size_t task = r.u64();
      st.seen_per_task[task] = r.u64();
    }
    st.shortfall_total = r.u64();
    m.restore(std::move(st));
  }

  const std::size_t n = r.count(0);
  if (n != s.matrix.size()) throw CheckpointError("checkpoint: accuracy matrix size differs");
  AccuracyMatrix matrix(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double x = r.f64();
      if (!std::isnan(x)) matrix.set(i, j, x);
    }
  }
  s.matrix = std::move(matrix);
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after payload");
  return h;
}

struct Envelope {
  std::uint64_t hash = 0;
  std::string_view payload;
};

Envelope open(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < sizeof kCheckpointMagic || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw CheckpointError("checkpoint: bad magic bytes");
  }
  r.take(sizeof kCheckpointMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  Envelope env;
  env.hash = r.u64();
  const std::size_t len = r.count(1);
  env.payload = r.take(len);
  const std::uint64_t sum = r.u64();
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after checksum");
  if (sum != fnv1a(env.payload)) throw CheckpointError("checkpoint: checksum mismatch (file is corrupt)");
  return env;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& header, const RunState& state) {
  Writer payload;
  write_state(payload, header, state);
  Writer w;
  w.bytes().append(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(header.config_hash);
  w.str(payload.bytes());
  w.u64(fnv1a(payload.bytes()));
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::string_view bytes, RunState& state, std::uint64_t expected_hash) {
  const Envelope env = open(bytes);
  if (env.hash != expected_hash) throw CheckpointError("checkpoint: written under a different config (hash mismatch)");
  Reader r(env.payload);
  Checkpoint h = read_state(r, state);
  h.config_hash = env.hash;
  return h;
}

void save_checkpoint(const std::string& path, const Checkpoint& header, const RunState& state) {
  const std::string bytes = encode_checkpoint(header, state);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("checkpoint: cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("checkpoint: write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("checkpoint: cannot move into '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path, RunState& state, std::uint64_t expected_hash) {
  return decode_checkpoint(read_file(path), state, expected_hash);
}

Checkpoint peek_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  const Envelope env = open(bytes);
  Reader r(env.payload);
  Checkpoint h;
  h.config_hash = env.hash;
  h.method = static_cast<Method>(r.u8());
  h.order_id = r.u64();
  h.seed = r.u64();
  return h;
}

}  // namespace sure
