#pragma once

#include <map>
#include <stdexcept>
#include <vector>

#include "ciseg/data.hpp"
#include "ciseg/losses.hpp"
#include "ciseg/matching.hpp"
#include "ciseg/model.hpp"

namespace ciseg {

struct AblationFlags {
  bool freeze_queries = true;
  bool independent_match = true;
  bool use_query_kd = true;
  bool use_class_kd = true;
  bool use_mask_kd = true;
  bool use_pod_kd = true;

  bool any_kd() const { return use_query_kd || use_class_kd || use_mask_kd || use_pod_kd; }
};

// Teacher-side forward results, captured once per sample as plain tensors.
template <typename T>
struct TeacherOutputs {
  std::vector<Tensor<T>> layer_states;
  Tensor<T> class_logits;
  Tensor<T> mask_logits;
  std::vector<Tensor<T>> pod_features;
  int k_old = 0;
  int m_old = 0;
};

template <typename T>
TeacherOutputs<T> teacher_forward(const Model<T>& teacher_model, const QueryQueue<T>& teacher_queue,
                                  const Tensor<T>& image) {
  Graph<T> g;
  g.recording = false;  // evaluation mode: no tape
  auto preds = teacher_model.forward(g, image, teacher_queue, false);
  TeacherOutputs<T> out;
  out.layer_states.reserve(preds.layer_states.size());
  for (Var v : preds.layer_states) out.layer_states.push_back(g.value(v));
  out.class_logits = g.value(preds.class_logits);
  out.mask_logits = g.value(preds.mask_logits);
  for (Var v : preds.pod_features) out.pod_features.push_back(g.value(v));
  out.k_old = teacher_model.num_classes();
  out.m_old = teacher_queue.total_queries();
  return out;
}

namespace detail {

// softmax class probabilities and sigmoid mask probabilities for a row range,
// in double so the matching cost is precision-independent of the model type
template <typename T>
void candidate_probs(const Tensor<T>& class_logits, const Tensor<T>& mask_logits, int row_begin,
                     int row_end, Tensor<double>* class_probs, Tensor<double>* mask_probs) {
  const int k1 = class_logits.dim(1);
  const int n = row_end - row_begin;
  const int64_t hw = mask_logits.numel() / mask_logits.dim(0);
  *class_probs = Tensor<double>({n, k1});
  *mask_probs = Tensor<double>({n, int(hw)});
  for (int i = 0; i < n; ++i) {
    const T* row = class_logits.data() + int64_t(row_begin + i) * k1;
    double mx = double(row[0]);
    for (int c = 1; c < k1; ++c) mx = std::max(mx, double(row[c]));
    double z = 0.0;
    for (int c = 0; c < k1; ++c) z += std::exp(double(row[c]) - mx);
    for (int c = 0; c < k1; ++c) class_probs->at(i, c) = std::exp(double(row[c]) - mx) / z;
    const T* mrow = mask_logits.data() + int64_t(row_begin + i) * hw;
    for (int64_t p = 0; p < hw; ++p) {
      double x = double(mrow[p]);
      (*mask_probs)[int64_t(i) * hw + p] =
          x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
  }
}

inline std::vector<const uint8_t*> mask_ptrs(const std::vector<MaskTarget>& targets) {
  std::vector<const uint8_t*> out;
  out.reserve(targets.size());
  for (const auto& t : targets) out.push_back(t.mask.data());
  return out;
}

}  // namespace detail

// Bipartite matching restricted to the newest query group; targets must only
// reference that group's classes (older classes are background now).
template <typename T>
Assignment match_step(const Tensor<T>& class_logits, const Tensor<T>& mask_logits,
                      const std::vector<MaskTarget>& targets, const QueryQueue<T>& queue,
                      const std::map<int, int>& class_to_col, const CostWeights& weights) {
  if (queue.empty()) throw std::invalid_argument("match_step: empty queue");
  const auto& newest = queue.groups().back();
  if (newest.frozen) throw std::invalid_argument("match_step: newest group is frozen");
  for (const auto& t : targets) {
    bool owned = std::find(newest.class_ids.begin(), newest.class_ids.end(), t.class_id) !=
                 newest.class_ids.end();
    if (!owned)
      throw std::invalid_argument("match_step: target class " + std::to_string(t.class_id) +
                                  " is not in the current step's class set");
  }
  if (targets.empty()) return {};

  const int begin = queue.group_start(queue.current_step());
  const int end = begin + newest.query_count;
  Tensor<double> cp, mp;
  detail::candidate_probs(class_logits, mask_logits, begin, end, &cp, &mp);
  std::vector<int> cols;
  for (const auto& t : targets) cols.push_back(class_to_col.at(t.class_id));
  Assignment a = hungarian(pairwise_cost(cp, mp, cols, detail::mask_ptrs(targets), weights));
  for (auto& [q, gt] : a.pairs) q += begin;
  return a;
}

// Unrestricted matching over every query; used by the ablation that disables
// independent matching.
template <typename T>
Assignment match_all(const Tensor<T>& class_logits, const Tensor<T>& mask_logits,
                     const std::vector<MaskTarget>& targets,
                     const std::map<int, int>& class_to_col, const CostWeights& weights) {
  if (targets.empty()) return {};
  Tensor<double> cp, mp;
  detail::candidate_probs(class_logits, mask_logits, 0, class_logits.dim(0), &cp, &mp);
  std::vector<int> cols;
  for (const auto& t : targets) cols.push_back(class_to_col.at(t.class_id));
  return hungarian(pairwise_cost(cp, mp, cols, detail::mask_ptrs(targets), weights));
}

template <typename T>
struct EpisodeResult {
  PredictionSet<T> preds;
  Assignment assignment;
  LossVars<T> loss;
  LossBreakdown values;
};

// One sample's full objective on the tape: student forward, matching,
// supervision for the new classes, and the distillation terms against the
// teacher snapshot when one exists.
template <typename T>
EpisodeResult<T> build_episode_loss(Graph<T>& g, const Model<T>& model, const QueryQueue<T>& queue,
                                    const Tensor<T>& image, const StepTarget& target,
                                    const std::map<int, int>& class_to_col,
                                    const TeacherOutputs<T>* teacher, const AblationFlags& flags,
                                    const LossWeights& lw, const CostWeights& cw,
                                    const std::vector<int>& pod_scales,
                                    const Assignment* fixed_assignment = nullptr) {
  EpisodeResult<T> out;
  out.preds = model.forward(g, image, queue, true, flags.freeze_queries);
  const auto& class_val = g.value(out.preds.class_logits);
  const auto& mask_val = g.value(out.preds.mask_logits);

  const int m_total = out.preds.total_queries;
  const int new_begin = flags.independent_match ? queue.group_start(queue.current_step()) : 0;
  const int new_end = flags.independent_match
                          ? new_begin + queue.groups().back().query_count
                          : m_total;

  if (fixed_assignment) {
    out.assignment = *fixed_assignment;
  } else if (flags.independent_match) {
    out.assignment = match_step(class_val, mask_val, target.targets, queue, class_to_col, cw);
  } else {
    out.assignment = match_all(class_val, mask_val, target.targets, class_to_col, cw);
  }

  std::vector<int> target_cols;
  for (const auto& t : target.targets) target_cols.push_back(class_to_col.at(t.class_id));
  Var l_new = supervised_loss(g, out.preds, out.assignment, target_cols,
                              detail::mask_ptrs(target.targets), new_begin, new_end, lw);

  Var l_q, l_c, l_m, l_pod;
  if (teacher) {
    if (flags.use_query_kd)
      l_q = query_kd(g, out.preds.layer_states, teacher->layer_states, teacher->m_old);
    if (flags.use_class_kd)
      l_c = class_kd(g, out.preds.class_logits, teacher->class_logits, teacher->k_old,
                     teacher->m_old);
    if (flags.use_mask_kd)
      l_m = mask_kd(g, out.preds.mask_logits, teacher->mask_logits, lw, teacher->m_old);
    if (flags.use_pod_kd)
      l_pod = pod_kd(g, out.preds.pod_features, teacher->pod_features, pod_scales);
  }

  out.loss = compose_total(g, l_new, l_q, l_c, l_m, l_pod, lw);
  out.values.l_new = double(g.scalar(l_new));
  out.values.l_q = l_q.valid() ? double(g.scalar(l_q)) : 0.0;
  out.values.l_c = l_c.valid() ? double(g.scalar(l_c)) : 0.0;
  out.values.l_m = l_m.valid() ? double(g.scalar(l_m)) : 0.0;
  out.values.l_pod = l_pod.valid() ? double(g.scalar(l_pod)) : 0.0;
  out.values.total = double(g.scalar(out.loss.total));
  return out;
}

}  // namespace ciseg
