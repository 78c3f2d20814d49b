// SPDX-License-Identifier: Apache-2.0
#include "sure/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "sure/error.hpp"

namespace sure {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(std::string_view key, std::string_view value, const char* what) {
  throw ConfigError("config: " + std::string(key) + " = '" + std::string(value) + "': " + what);
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a non-negative integer");
  return out;
}

std::size_t parse_size(std::string_view key, std::string_view v) { return static_cast<std::size_t>(parse_u64(key, v)); }

double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad(key, v, "expected true or false");
}

template <typename T, typename F>
std::vector<T> parse_list(std::string_view v, F item) {
  std::vector<T> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    const auto piece = trim(v.substr(0, comma));
    out.push_back(item(piece));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

std::string fmt(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_same_v<T, Method>) {
      out += to_string(xs[i]);
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

template <typename E, typename F>
E parse_enum(std::string_view key, std::string_view v, F f) {
  try {
    return f(std::string(v));
  } catch (const Error& e) {
    bad(key, v, e.what());
  }
}

struct Field {
  const char* key;
  std::function<void(ExperimentConfig&, std::string_view key, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
  bool hashed = true;
};

#define SIZE_FIELD(name, member) \
  Field{name, [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.member = parse_size(k, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }}
#define DOUBLE_FIELD(name, member) \
  Field{name, [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.member = parse_double(k, v); }, \
        [](const ExperimentConfig& c) { return fmt(c.member); }}
#define BOOL_FIELD(name, member) \
  Field{name, [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.member = parse_bool(k, v); }, \
        [](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SIZE_FIELD("model.dim", model.model_dim),
      SIZE_FIELD("model.layers", model.layers),
      SIZE_FIELD("model.heads", model.heads),
      SIZE_FIELD("model.max_seq_len", model.max_seq_len),
      SIZE_FIELD("model.mlp_ratio", model.mlp_ratio),
      DOUBLE_FIELD("model.dropout", model.dropout_rate),
      SIZE_FIELD("model.lora_rank", model.lora_rank),
      DOUBLE_FIELD("model.lora_alpha", model.lora_alpha),
      DOUBLE_FIELD("model.lora_init_std", model.lora_init_std),

      Field{"train.method",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) {
              c.schedule.method = parse_enum<Method>(k, v, parse_method);
            },
            [](const ExperimentConfig& c) { return std::string(to_string(c.schedule.method)); }},
      SIZE_FIELD("train.batch_size", schedule.batch_size),
      SIZE_FIELD("train.replay_batch", schedule.replay_batch),
      SIZE_FIELD("train.replay_interval", schedule.replay_interval),
      Field{"train.replay_ratio",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) {
              if (v == "none") {
                c.replay_ratio.reset();
                return;
              }
              // Accept both "8" and "1:8".
              if (v.starts_with("1:")) v.remove_prefix(2);
              c.replay_ratio = parse_size(k, v);
            },
            [](const ExperimentConfig& c) {
              return c.replay_ratio ? "1:" + std::to_string(*c.replay_ratio) : std::string("none");
            }},
      SIZE_FIELD("train.epochs", schedule.epochs),
      DOUBLE_FIELD("train.beta", schedule.beta),
      DOUBLE_FIELD("train.learning_rate", schedule.learning_rate),
      Field{"train.clip_norm",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) {
              if (v == "none") {
                c.schedule.clip_norm.reset();
              } else {
                c.schedule.clip_norm = parse_double(k, v);
              }
            },
            [](const ExperimentConfig& c) {
              return c.schedule.clip_norm ? fmt(*c.schedule.clip_norm) : std::string("none");
            }},
      Field{"train.timing",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) {
              if (v == "default") {
                c.schedule.timing.reset();
              } else {
                c.schedule.timing = parse_enum<Timing>(k, v, parse_timing);
              }
            },
            [](const ExperimentConfig& c) {
              return c.schedule.timing ? std::string(to_string(*c.schedule.timing)) : std::string("default");
            }},
      Field{"train.surprise_variant",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) {
              c.schedule.surprise_variant = parse_enum<SurpriseVariant>(k, v, parse_surprise_variant);
            },
            [](const ExperimentConfig& c) { return std::string(to_string(c.schedule.surprise_variant)); }},
      BOOL_FIELD("train.aging", schedule.aging),
      BOOL_FIELD("train.evaluate_unseen", schedule.evaluate_unseen),

      SIZE_FIELD("buffer.capacity", schedule.buffer_capacity),
      Field{"buffer.fraction",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) {
              if (v == "none") {
                c.buffer_fraction.reset();
              } else {
                c.buffer_fraction = parse_double(k, v);
              }
            },
            [](const ExperimentConfig& c) {
              return c.buffer_fraction ? fmt(*c.buffer_fraction) : std::string("none");
            }},

      SIZE_FIELD("stream.n_tasks", stream.n_tasks),
      SIZE_FIELD("stream.classes_per_task", stream.classes_per_task),
      SIZE_FIELD("stream.seq_tokens", stream.seq_tokens),
      SIZE_FIELD("stream.train_per_class", stream.train_per_class),
      SIZE_FIELD("stream.test_per_class", stream.test_per_class),
      DOUBLE_FIELD("stream.epsilon", stream.epsilon),
      SIZE_FIELD("stream.favored_tokens", stream.favored_tokens),
      Field{"stream.vocab_size",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) {
              c.stream.vocab_size = parse_size(k, v);
              c.model.vocab_size = c.stream.vocab_size;
            },
            [](const ExperimentConfig& c) { return std::to_string(c.stream.vocab_size); }},
      Field{"stream.seed",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.stream_seed = parse_u64(k, v); },
            [](const ExperimentConfig& c) { return std::to_string(c.stream_seed); }},

      Field{"run.methods",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) {
              c.methods = parse_list<Method>(v, [&](std::string_view m) { return parse_enum<Method>(k, m, parse_method); });
            },
            [](const ExperimentConfig& c) { return join(grid_methods(c)); }},
      Field{"run.orders",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) {
              c.orders = parse_list<std::size_t>(v, [&](std::string_view s) { return parse_size(k, s); });
            },
            [](const ExperimentConfig& c) { return join(c.orders); }},
      Field{"run.seeds",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) {
              c.seeds = parse_list<std::uint64_t>(v, [&](std::string_view s) { return parse_u64(k, s); });
            },
            [](const ExperimentConfig& c) { return join(c.seeds); }},
      Field{"run.output_dir", [](ExperimentConfig& c, std::string_view, std::string_view v) { c.output_dir = v; },
            [](const ExperimentConfig& c) { return c.output_dir; }, false},
      Field{"run.stop_after_stage",
            [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.stop_after_stage = parse_size(k, v); },
            [](const ExperimentConfig& c) { return std::to_string(c.stop_after_stage); }, false},
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD

std::string render(const ExperimentConfig& c, bool hashed_only) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    if (hashed_only && !f.hashed) continue;
    const std::string_view key = f.key;
    const std::string sec(key.substr(0, key.find('.')));
    if (sec != section) {
      if (!section.empty()) os << '\n';
      section = sec;
    }
    os << f.key << " = " << f.get(c) << '\n';
  }
  os << '\n';
  for (std::size_t id : c.orders) os << "order." << id << " = " << join(order_permutation(c, id)) << '\n';
  return os.str();
}

}  // namespace

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void set_config_key(ExperimentConfig& config, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  if (key.starts_with("order.")) {
    const std::size_t id = parse_size(key, key.substr(6));
    config.order_table[id] = parse_list<std::size_t>(value, [&](std::string_view s) { return parse_size(key, s); });
    return;
  }
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(config, key, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig c;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    set_config_key(c, line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void validate(const ExperimentConfig& c) {
  validate(c.stream);
  validate(c.model);
  if (c.model.vocab_size != c.stream.vocab_size) throw ConfigError("config: model and stream vocabularies differ");
  if (c.model.max_seq_len < c.stream.seq_tokens + 2) {
    throw ConfigError("config: model.max_seq_len must cover seq_tokens + 2");
  }
  if (c.buffer_fraction && !(*c.buffer_fraction > 0.0 && *c.buffer_fraction <= 1.0)) {
    throw ConfigError("config: buffer.fraction must lie in (0, 1]");
  }
  if (c.orders.empty() || c.seeds.empty()) throw ConfigError("config: run.orders and run.seeds must be nonempty");
  for (std::size_t id : c.orders) validate_order(order_permutation(c, id), c.stream.n_tasks);
  for (Method m : grid_methods(c)) validate(schedule_for(c, m));
  if (c.stop_after_stage > c.stream.n_tasks) throw ConfigError("config: run.stop_after_stage exceeds the task count");
}

std::string to_text(const ExperimentConfig& config) { return render(config, false); }

std::uint64_t config_hash(const ExperimentConfig& config) { return fnv1a(render(config, true)); }

std::vector<Method> grid_methods(const ExperimentConfig& config) {
  return config.methods.empty() ? std::vector<Method>{config.schedule.method} : config.methods;
}

std::vector<std::size_t> order_permutation(const ExperimentConfig& config, std::size_t order_id) {
  if (const auto it = config.order_table.find(order_id); it != config.order_table.end()) return it->second;
  return named_order(order_id, config.stream.n_tasks);
}

TrainSchedule schedule_for(const ExperimentConfig& config, Method method) {
  TrainSchedule s = config.schedule;
  s.method = method;
  if (config.buffer_fraction) {
    const double total = static_cast<double>(config.stream.n_tasks * config.stream.classes_per_task *
                                             config.stream.train_per_class);
    s.buffer_capacity = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(*config.buffer_fraction * total)));
  }
  if (config.replay_ratio) {
    try {
      s.replay_interval = replay_interval_for_ratio(*config.replay_ratio, s.batch_size, s.replay_batch);
    } catch (const Error& e) {
      throw ConfigError(std::string("config: train.replay_ratio: ") + e.what());
    }
  }
  return s;
}

}  // namespace sure
