// SPDX-License-Identifier: Apache-2.0
#include "sure/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

#include "sure/error.hpp"

namespace sure {

void validate(const StreamSpec& s) {
  if (s.n_tasks == 0 || s.classes_per_task < 2) throw ConfigError("stream: need at least one task of two classes");
  if (s.seq_tokens < 1) throw ConfigError("stream: seq_tokens must be positive");
  if (s.train_per_class == 0 || s.test_per_class == 0) throw ConfigError("stream: split sizes must be positive");
  if (!(s.epsilon > 0.0 && s.epsilon <= 1.0)) throw ConfigError("stream: epsilon must lie in (0, 1]");
  const std::size_t labels = s.n_tasks * s.classes_per_task;
  if (labels + 1 + 2 > s.vocab_size) {
    throw ConfigError("stream: " + std::to_string(labels) + " label tokens do not fit vocabulary " +
                      std::to_string(s.vocab_size));
  }
  const std::size_t content = s.vocab_size - labels - 1;
  if (s.favored_tokens == 0 || s.favored_tokens > content) {
    throw ConfigError("stream: favored_tokens must lie in [1, content tokens]");
  }
}

namespace {

// Flat Dirichlet draw over `k` cells.
std::vector<double> dirichlet(std::size_t k, Rng& rng) {
  std::vector<double> w(k);
  double total = 0.0;
  for (double& x : w) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    x = -std::log(u);
    total += x;
  }
  for (double& x : w) x /= total;
  return w;
}

std::size_t draw(const double* probs, std::size_t k, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Round-off: fall back to the last state with mass.
  for (std::size_t i = k; i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return k - 1;
}

Example sample(const MarkovChain& chain, const TaskStream& stream, std::size_t task, std::size_t cls, Token label,
               Rng& rng) {
  Example ex;
  ex.task = task;
  ex.label_index = cls;
  ex.tokens.reserve(stream.sequence_length());
  std::size_t state = draw(chain.initial.data(), chain.states, rng);
  ex.tokens.push_back(static_cast<Token>(state));
  for (std::size_t t = 1; t < stream.spec.seq_tokens; ++t) {
    state = draw(chain.transition.data() + state * chain.states, chain.states, rng);
    ex.tokens.push_back(static_cast<Token>(state));
  }
  ex.tokens.push_back(stream.separator);
  ex.tokens.push_back(label);
  return ex;
}

}  // namespace

TaskStream generate_stream(const StreamSpec& spec, std::uint64_t seed) {
  validate(spec);
  TaskStream stream;
  stream.spec = spec;
  const std::size_t n_labels = spec.n_tasks * spec.classes_per_task;
  const std::size_t K = spec.vocab_size - n_labels - 1;
  stream.content_tokens = K;
  stream.separator = static_cast<Token>(K);

  const Rng root(seed);
  Rng chains_rng = root.split(10);
  std::vector<double> shared(K * K);
  for (std::size_t i = 0; i < K; ++i) {
    const auto row = dirichlet(K, chains_rng);
    std::copy(row.begin(), row.end(), shared.begin() + static_cast<std::ptrdiff_t>(i * K));
  }

  std::vector<std::size_t> pool(K);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t k = 0; k < spec.n_tasks; ++k) {
    Task task;
    task.id = k;
    for (std::size_t c = 0; c < spec.classes_per_task; ++c) {
      task.labels.push_back(static_cast<Token>(K + 1 + k * spec.classes_per_task + c));
      chains_rng.shuffle(pool);
      const std::vector<std::size_t> favored(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.favored_tokens));
      MarkovChain chain;
      chain.states = K;
      chain.initial.assign(K, 1.0 / static_cast<double>(K));
      chain.transition.resize(K * K);
      for (std::size_t i = 0; i < K; ++i) {
        const auto q = dirichlet(spec.favored_tokens, chains_rng);
        double* row = chain.transition.data() + i * K;
        for (std::size_t j = 0; j < K; ++j) row[j] = (1.0 - spec.epsilon) * shared[i * K + j];
        for (std::size_t f = 0; f < favored.size(); ++f) row[favored[f]] += spec.epsilon * q[f];
      }
      task.chains.push_back(std::move(chain));
    }
    stream.tasks.push_back(std::move(task));
  }

  for (std::size_t k = 0; k < spec.n_tasks; ++k) {
    Task& task = stream.tasks[k];
    Rng data_rng = root.split(1000 + k);
    for (auto [split, per_class] : {std::pair{&task.train, spec.train_per_class}, {&task.test, spec.test_per_class}}) {
      for (std::size_t i = 0; i < per_class; ++i) {
        for (std::size_t c = 0; c < spec.classes_per_task; ++c) {
          split->push_back(sample(task.chains[c], stream, k, c, task.labels[c], data_rng));
        }
      }
      data_rng.shuffle(*split);
    }
  }
  return stream;
}

std::size_t bayes_classify(const Task& task, const TokenSeq& tokens, std::size_t seq_tokens) {
  std::size_t best = 0;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < task.chains.size(); ++c) {
    const MarkovChain& ch = task.chains[c];
    double ll = std::log(ch.initial[tokens[0]]);
    for (std::size_t t = 1; t < seq_tokens; ++t) ll += std::log(ch.prob(tokens[t - 1], tokens[t]));
    if (ll > best_ll) {
      best_ll = ll;
      best = c;
    }
  }
  return best;
}

double bayes_accuracy(const Task& task, std::size_t seq_tokens) {
  std::size_t hits = 0;
  for (const auto& ex : task.test) hits += bayes_classify(task, ex.tokens, seq_tokens) == ex.label_index;
  return static_cast<double>(hits) / static_cast<double>(task.test.size());
}

std::vector<std::size_t> named_order(std::size_t order_id, std::size_t n_tasks) {
  std::vector<std::size_t> order(n_tasks);
  std::iota(order.begin(), order.end(), 0);
  if (order_id == 0) return order;
  Rng rng(0x6F72646572ULL + 7919 * order_id + n_tasks);
  rng.shuffle(order);
  return order;
}

void validate_order(const std::vector<std::size_t>& order, std::size_t n_tasks) {
  std::vector<std::size_t> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  bool ok = sorted.size() == n_tasks;
  for (std::size_t i = 0; ok && i < sorted.size(); ++i) ok = sorted[i] == i;
  if (!ok) throw ConfigError("task order must be a permutation of 0.." + std::to_string(n_tasks - 1));
}

// --- AccuracyMatrix ---------------------------------------------------------

AccuracyMatrix::AccuracyMatrix(std::size_t n) : n_(n), cells_(n * n, std::numeric_limits<double>::quiet_NaN()) {
  if (n == 0) throw ShapeError("accuracy matrix needs at least one task");
}

double AccuracyMatrix::at(std::size_t stage, std::size_t task) const {
  if (stage >= n_ || task >= n_) throw ShapeError("accuracy matrix index out of range");
  return cells_[stage * n_ + task];
}

void AccuracyMatrix::set(std::size_t stage, std::size_t task, double acc) {
  if (stage >= n_ || task >= n_) throw ShapeError("accuracy matrix index out of range");
  if (!(acc >= 0.0 && acc <= 1.0)) throw NumericError("accuracy", "value outside [0, 1]");
  cells_[stage * n_ + task] = acc;
}

bool AccuracyMatrix::has(std::size_t stage, std::size_t task) const { return !std::isnan(at(stage, task)); }

std::size_t AccuracyMatrix::completed_stages() const {
  std::size_t done = 0;
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      if (!has(i, j)) return done;
    }
    ++done;
  }
  return done;
}

bool operator==(const AccuracyMatrix& a, const AccuracyMatrix& b) {
  return a.n_ == b.n_ && std::memcmp(a.cells_.data(), b.cells_.data(), a.cells_.size() * sizeof(double)) == 0;
}

namespace {

std::string fmt_cell(double v, bool percent) {
  if (std::isnan(v)) return "";
  char buf[40];
  if (percent) {
    std::snprintf(buf, sizeof buf, "%.2f", to_percent(v));
  } else {
    std::snprintf(buf, sizeof buf, "%.17g", v);
  }
  return buf;
}

}  // namespace

std::string AccuracyMatrix::to_csv(bool percent) const {
  std::ostringstream os;
  os << "stage";
  for (std::size_t j = 0; j < n_; ++j) os << ",task_" << j;
  os << '\n';
  for (std::size_t i = 0; i < n_; ++i) {
    os << i;
    for (std::size_t j = 0; j < n_; ++j) os << ',' << fmt_cell(cells_[i * n_ + j], percent);
    os << '\n';
  }
  return os.str();
}

std::string AccuracyMatrix::to_long_csv() const {
  std::ostringstream os;
  os << "train_stage,test_task,accuracy\n";
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j < n_; ++j) {
      if (has(i, j)) os << i << ',' << j << ',' << fmt_cell(cells_[i * n_ + j], true) << '\n';
    }
  }
  return os.str();
}

AccuracyMatrix AccuracyMatrix::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw ShapeError("accuracy csv: missing header");
  const auto n = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  AccuracyMatrix m(n);
  std::size_t stage = 0;
  while (std::getline(is, line) && stage < n) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (line.back() == ',') fields.emplace_back();
    if (fields.size() != n + 1) throw ShapeError("accuracy csv: row " + std::to_string(stage) + " has wrong width");
    for (std::size_t j = 0; j < n; ++j) {
      if (!fields[j + 1].empty()) m.set(stage, j, std::stod(fields[j + 1]));
    }
    ++stage;
  }
  if (stage != n) throw ShapeError("accuracy csv: expected " + std::to_string(n) + " rows");
  return m;
}

// --- metrics ----------------------------------------------------------------

double final_performance(const AccuracyMatrix& m) {
  const std::size_t n = m.size();
  if (n == 0) throw ShapeError("final performance of an empty matrix");
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (!m.has(n - 1, j)) throw ShapeError("final performance needs a complete last row");
    total += m.at(n - 1, j);
  }
  return total / static_cast<double>(n);
}

double average_performance(const AccuracyMatrix& m) {
  const std::size_t n = m.size();
  if (n == 0) throw ShapeError("average performance of an empty matrix");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double stage = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      if (!m.has(i, j)) throw ShapeError("average performance needs every seen-task cell");
      stage += m.at(i, j);
    }
    total += stage / static_cast<double>(i + 1);
  }
  return total / static_cast<double>(n);
}

double forgetting(double ap, double fp) { return ap - fp; }

double forgetting(const AccuracyMatrix& m) { return forgetting(average_performance(m), final_performance(m)); }

double chaudhry_forgetting(const AccuracyMatrix& m) {
  const std::size_t n = m.size();
  if (n < 2) return 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j + 1 < n; ++j) {
    double best = -1.0;
    for (std::size_t i = j; i < n; ++i) {
      if (!m.has(i, j)) throw ShapeError("forgetting needs every seen-task cell");
      best = std::max(best, m.at(i, j));
    }
    total += best - m.at(n - 1, j);
  }
  return total / static_cast<double>(n - 1);
}

double round2(double value) { return std::round(value * 100.0) / 100.0; }

double to_percent(double fraction) { return round2(fraction * 100.0); }

}  // namespace sure
