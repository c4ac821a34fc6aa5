#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciseg/rng.hpp"
#include "ciseg/tensor.hpp"

namespace ciseg {

enum class TaskMode { kSemantic, kInstance };

inline const char* to_string(TaskMode m) {
  return m == TaskMode::kSemantic ? "semantic" : "instance";
}

// Queries added at one continual step. Two learned tables per query: a content
// embedding (decoder input) and a positional embedding (added to attention
// queries). Both are [query_count, d_q].
template <typename T>
struct QueryGroup {
  int step_index = 0;
  int query_count = 0;
  std::vector<int> class_ids;
  bool frozen = false;
  Tensor<T> content;
  Tensor<T> position;
};

inline int query_count_for(TaskMode mode, int n_classes) {
  if (mode == TaskMode::kSemantic) return n_classes;
  return int(std::lround(2.5 * double(n_classes)));
}

// Number of parameters added by extending the queue with n_new queries.
inline int64_t param_delta(int64_t n_new, int64_t d_q, int64_t tables_per_query) {
  if (n_new < 0 || d_q <= 0 || tables_per_query <= 0)
    throw std::invalid_argument("param_delta: arguments must be positive");
  return n_new * d_q * tables_per_query;
}

// Ordered groups of query embeddings, one group per continual step. Only the
// newest group is trainable while its step runs; every earlier group is
// frozen. Growth happens strictly between steps (single writer); reads are
// safe from any number of threads.
template <typename T>
class QueryQueue {
 public:
  static constexpr int kTablesPerQuery = 2;

  explicit QueryQueue(int d_q) : d_q_(d_q) {
    if (d_q <= 0) throw std::invalid_argument("QueryQueue: d_q must be positive");
  }

  int d_q() const { return d_q_; }
  int current_step() const { return int(groups_.size()) - 1; }
  bool empty() const { return groups_.empty(); }
  const std::vector<QueryGroup<T>>& groups() const { return groups_; }
  QueryGroup<T>& group(int i) { return groups_.at(size_t(i)); }
  const QueryGroup<T>& group(int i) const { return groups_.at(size_t(i)); }

  int total_queries() const {
    int n = 0;
    for (const auto& g : groups_) n += g.query_count;
    return n;
  }

  int total_classes() const {
    int n = 0;
    for (const auto& g : groups_) n += int(g.class_ids.size());
    return n;
  }

  // Appends a group for new_class_ids, freezing all previous groups. New
  // embeddings are drawn from a seeded standard normal scaled by 1/sqrt(d_q).
  void extend(const std::vector<int>& new_class_ids, TaskMode mode, uint64_t seed) {
    if (new_class_ids.empty())
      throw std::invalid_argument("QueryQueue::extend: empty class set");
    std::set<int> seen;
    for (const auto& g : groups_) seen.insert(g.class_ids.begin(), g.class_ids.end());
    std::vector<int> dups;
    std::set<int> in_new;
    for (int c : new_class_ids) {
      if (seen.count(c) || in_new.count(c)) dups.push_back(c);
      in_new.insert(c);
    }
    if (!dups.empty()) {
      std::ostringstream os;
      os << "QueryQueue::extend: class ids already owned:";
      for (int c : dups) os << " " << c;
      throw std::invalid_argument(os.str());
    }

    for (auto& g : groups_) g.frozen = true;

    QueryGroup<T> g;
    g.step_index = int(groups_.size());
    g.class_ids = new_class_ids;
    g.query_count = query_count_for(mode, int(new_class_ids.size()));
    g.frozen = false;
    SplitMix64 rng(seed);
    T scl = T(1.0 / std::sqrt(double(d_q_)));
    g.content = Tensor<T>::randn({g.query_count, d_q_}, rng, scl);
    g.position = Tensor<T>::randn({g.query_count, d_q_}, rng, scl);
    groups_.push_back(std::move(g));
  }

  std::vector<int> frozen_index_set() const {
    if (groups_.empty()) throw std::invalid_argument("frozen_index_set: empty queue");
    std::vector<int> out;
    int base = 0;
    for (const auto& g : groups_) {
      if (g.frozen)
        for (int i = 0; i < g.query_count; ++i) out.push_back(base + i);
      base += g.query_count;
    }
    return out;
  }

  int group_start(int group_index) const {
    int base = 0;
    for (int i = 0; i < group_index; ++i) base += groups_[size_t(i)].query_count;
    return base;
  }

  struct QueryInfo {
    int group_index;
    int slot;       // index within the group
    int class_id;   // owned class in semantic mode, -1 in instance mode
  };

  QueryInfo query_info(int global_index) const {
    int base = 0;
    for (size_t gi = 0; gi < groups_.size(); ++gi) {
      const auto& g = groups_[gi];
      if (global_index < base + g.query_count) {
        int slot = global_index - base;
        int cid = slot < int(g.class_ids.size()) ? g.class_ids[size_t(slot)] : -1;
        return {int(gi), slot, g.query_count == int(g.class_ids.size()) ? g.class_ids[size_t(slot)] : cid};
      }
      base += g.query_count;
    }
    throw std::invalid_argument("query_info: index out of range");
  }

  // Class ids in learning order; position in this list = class-head column.
  std::vector<int> classes_in_order() const {
    std::vector<int> out;
    for (const auto& g : groups_) out.insert(out.end(), g.class_ids.begin(), g.class_ids.end());
    return out;
  }

  // Checkpoint restore path; groups must arrive in step order.
  void load_group(QueryGroup<T> g) {
    if (g.step_index != int(groups_.size()))
      throw std::invalid_argument("load_group: out-of-order step index");
    if (g.content.dims() != std::vector<int>{g.query_count, d_q_} ||
        g.position.dims() != std::vector<int>{g.query_count, d_q_})
      throw std::invalid_argument("load_group: embedding shape mismatch");
    groups_.push_back(std::move(g));
  }

  void check_invariants() const {
    std::set<int> seen;
    for (size_t i = 0; i < groups_.size(); ++i) {
      const auto& g = groups_[i];
      if (g.step_index != int(i)) throw std::logic_error("queue: step indices not contiguous");
      if (g.query_count < int(g.class_ids.size()))
        throw std::logic_error("queue: fewer queries than classes");
      bool should_be_frozen = i + 1 < groups_.size();
      if (g.frozen != should_be_frozen) throw std::logic_error("queue: frozen flags inconsistent");
      for (int c : g.class_ids)
        if (!seen.insert(c).second) throw std::logic_error("queue: duplicate class id");
      if (g.content.dims() != std::vector<int>{g.query_count, d_q_} ||
          g.position.dims() != std::vector<int>{g.query_count, d_q_})
        throw std::logic_error("queue: embedding shape mismatch");
    }
  }

 private:
  int d_q_;
  std::vector<QueryGroup<T>> groups_;
};

}  // namespace ciseg
