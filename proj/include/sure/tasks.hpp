// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sure/model.hpp"

namespace sure {

/// Class-incremental stream of Markov-chain classification tasks.
///
/// Token layout for vocabulary V with N tasks of C classes: the top N*C ids
/// are label tokens (task k owns a contiguous block of C), the id just below
/// them is the separator, and everything lower is content. A sequence is
/// `seq_tokens` content tokens, the separator, then the label token.
struct StreamSpec {
  std::size_t n_tasks = 8;
  std::size_t classes_per_task = 4;
  std::size_t seq_tokens = 32;
  std::size_t train_per_class = 256;
  std::size_t test_per_class = 32;
  double epsilon = 0.4;           // weight of the class-specific transition component
  std::size_t favored_tokens = 2; // support size of each class-specific row
  std::size_t vocab_size = 64;

  friend bool operator==(const StreamSpec&, const StreamSpec&) = default;
};

void validate(const StreamSpec& spec);

struct Example {
  TokenSeq tokens;
  std::size_t task = 0;
  std::size_t label_index = 0;  // class index inside the task
};

/// Row-stochastic K x K matrix over content tokens plus the start distribution.
struct MarkovChain {
  std::size_t states = 0;
  std::vector<double> initial;
  std::vector<double> transition;  // row-major

  double prob(std::size_t from, std::size_t to) const { return transition[from * states + to]; }
};

struct Task {
  std::size_t id = 0;
  std::vector<Token> labels;          // one token per class
  std::vector<MarkovChain> chains;    // one per class
  std::vector<Example> train;
  std::vector<Example> test;
};

struct TaskStream {
  StreamSpec spec;
  Token separator = 0;
  std::size_t content_tokens = 0;
  std::vector<Task> tasks;  // indexed by task id, not training order

  std::size_t sequence_length() const noexcept { return spec.seq_tokens + 2; }
  /// Span of the label token (the accuracy and training target).
  TargetSpan label_span() const noexcept { return {spec.seq_tokens + 1, spec.seq_tokens + 2}; }
  /// Every predictable position.
  TargetSpan full_span() const noexcept { return {1, spec.seq_tokens + 2}; }
};

TaskStream generate_stream(const StreamSpec& spec, std::uint64_t seed);

/// Maximum-likelihood class under the true chains of `task`.
std::size_t bayes_classify(const Task& task, const TokenSeq& tokens, std::size_t seq_tokens);
double bayes_accuracy(const Task& task, std::size_t seq_tokens);

/// Fixed permutations of task ids. Order 0 is the identity; higher orders
/// are drawn from a generator keyed only by the order id and task count.
std::vector<std::size_t> named_order(std::size_t order_id, std::size_t n_tasks);
void validate_order(const std::vector<std::size_t>& order, std::size_t n_tasks);

/// acc(i, j): accuracy on task column j after training stage i, as a
/// fraction. Columns follow training order. Unset cells are NaN.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t n);

  std::size_t size() const noexcept { return n_; }
  double at(std::size_t stage, std::size_t task) const;
  void set(std::size_t stage, std::size_t task, double acc);
  bool has(std::size_t stage, std::size_t task) const;
  /// Stage rows filled so far (a row counts once its seen-task cells are set).
  std::size_t completed_stages() const;

  const std::vector<double>& cells() const noexcept { return cells_; }
  friend bool operator==(const AccuracyMatrix& a, const AccuracyMatrix& b);

  /// Comma-separated grid with header "stage,task_0,...". Fractions are
  /// written round-trip exact; percent mode writes 2 decimals.
  std::string to_csv(bool percent = false) const;
  /// Long format "train_stage,test_task,accuracy" for heatmaps.
  std::string to_long_csv() const;
  static AccuracyMatrix from_csv(const std::string& text);

 private:
  std::size_t n_ = 0;
  std::vector<double> cells_;
};

double final_performance(const AccuracyMatrix& m);
double average_performance(const AccuracyMatrix& m);
/// AP - FP. Negative means later training improved earlier tasks.
double forgetting(const AccuracyMatrix& m);
double forgetting(double ap, double fp);
/// Mean over j < N of the drop from the best accuracy ever reached on j.
double chaudhry_forgetting(const AccuracyMatrix& m);

/// Fraction to percent, rounded half away from zero to 2 decimals.
double to_percent(double fraction);
double round2(double value);

}  // namespace sure
