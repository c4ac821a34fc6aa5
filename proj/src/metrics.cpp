#include "ciseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ciseg {

std::map<int, double> iou_per_class(const std::vector<uint8_t>& pred_labels,
                                    const std::vector<uint8_t>& gt_labels,
                                    const std::vector<int>& class_set) {
  IoUAccumulator acc;
  acc.add(pred_labels, gt_labels, class_set);
  return acc.per_class();
}

void IoUAccumulator::add(const std::vector<uint8_t>& pred_labels,
                         const std::vector<uint8_t>& gt_labels,
                         const std::vector<int>& class_set) {
  if (pred_labels.size() != gt_labels.size())
    throw std::invalid_argument("iou: label map size mismatch");
  for (int c : class_set) {
    auto& [inter, uni] = inter_union_[c];
    for (size_t p = 0; p < pred_labels.size(); ++p) {
      bool in_pred = pred_labels[p] == c;
      bool in_gt = gt_labels[p] == c;
      inter += in_pred && in_gt;
      uni += in_pred || in_gt;
    }
  }
}

std::map<int, double> IoUAccumulator::per_class() const {
  std::map<int, double> out;
  for (const auto& [c, iu] : inter_union_)
    if (iu.second > 0) out[c] = double(iu.first) / double(iu.second);
  return out;
}

double mean_of(const std::map<int, double>& per_class, const std::vector<int>& subset) {
  double acc = 0.0;
  int n = 0;
  for (int c : subset) {
    auto it = per_class.find(c);
    if (it != per_class.end()) {
      acc += it->second;
      ++n;
    }
  }
  return n ? acc / n : 0.0;
}

namespace {

void softmax_row(const float* row, int n, std::vector<double>& out) {
  out.resize(size_t(n));
  double mx = row[0];
  for (int c = 1; c < n; ++c) mx = std::max(mx, double(row[c]));
  double z = 0.0;
  for (int c = 0; c < n; ++c) z += out[size_t(c)] = std::exp(double(row[c]) - mx);
  for (int c = 0; c < n; ++c) out[size_t(c)] /= z;
}

double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

std::vector<uint8_t> semantic_inference(const Tensor<float>& class_logits,
                                        const Tensor<float>& mask_logits,
                                        const std::vector<int>& column_class_ids) {
  const int m = class_logits.dim(0);
  const int k1 = class_logits.dim(1);
  if (mask_logits.dim(0) != m) throw std::invalid_argument("semantic_inference: row mismatch");
  if (int(column_class_ids.size()) != k1 - 1)
    throw std::invalid_argument("semantic_inference: column map size mismatch");
  const int64_t hw = mask_logits.numel() / m;

  // per query: best real class probability and its class id (lowest id wins ties)
  std::vector<double> best_p(size_t(m), 0.0);
  std::vector<int> best_c(size_t(m), -1);
  std::vector<double> probs;
  for (int i = 0; i < m; ++i) {
    softmax_row(class_logits.data() + int64_t(i) * k1, k1, probs);
    double bp = -1.0;
    int bc = -1;
    for (int c = 0; c < k1 - 1; ++c) {
      int cid = column_class_ids[size_t(c)];
      if (probs[size_t(c)] > bp || (probs[size_t(c)] == bp && cid < bc)) {
        bp = probs[size_t(c)];
        bc = cid;
      }
    }
    best_p[size_t(i)] = bp;
    best_c[size_t(i)] = bc;
  }

  std::vector<uint8_t> labels(size_t(hw), 255);
  for (int64_t p = 0; p < hw; ++p) {
    double best_score = 0.0;
    int best_label = -1;
    for (int i = 0; i < m; ++i) {
      double s = best_p[size_t(i)] * sigmoid(double(mask_logits[int64_t(i) * hw + p]));
      if (s > best_score || (s == best_score && best_label >= 0 && best_c[size_t(i)] < best_label)) {
        best_score = s;
        best_label = best_c[size_t(i)];
      }
    }
    if (best_score >= 0.5 && best_label >= 0) labels[size_t(p)] = uint8_t(best_label);
  }
  return labels;
}

std::vector<PredInstance> instance_inference(const Tensor<float>& class_logits,
                                             const Tensor<float>& mask_logits,
                                             const std::vector<int>& column_class_ids) {
  const int m = class_logits.dim(0);
  const int k1 = class_logits.dim(1);
  const int64_t hw = mask_logits.numel() / m;
  std::vector<PredInstance> out;
  std::vector<double> probs;
  for (int i = 0; i < m; ++i) {
    softmax_row(class_logits.data() + int64_t(i) * k1, k1, probs);
    int argmax = 0;
    for (int c = 1; c < k1; ++c)
      if (probs[size_t(c)] > probs[size_t(argmax)]) argmax = c;
    if (argmax == k1 - 1) continue;  // no-object
    PredInstance inst;
    inst.class_id = column_class_ids[size_t(argmax)];
    inst.mask.assign(size_t(hw), 0);
    double mask_conf = 0.0;
    int64_t fg = 0;
    for (int64_t p = 0; p < hw; ++p) {
      double sp = sigmoid(double(mask_logits[int64_t(i) * hw + p]));
      if (sp > 0.5) {
        inst.mask[size_t(p)] = 1;
        mask_conf += sp;
        ++fg;
      }
    }
    if (fg == 0) continue;
    inst.score = probs[size_t(argmax)] * (mask_conf / double(fg));
    out.push_back(std::move(inst));
  }
  return out;
}

void InstanceApAccumulator::add_image(const std::vector<PredInstance>& preds,
                                      const std::vector<MaskTarget>& gts) {
  const int img = images_++;
  for (const auto& p : preds) dets_[p.class_id].push_back({img, p.score, p.mask});
  for (const auto& t : gts) gts_[t.class_id].emplace_back(img, t.mask);
}

namespace {

double mask_iou(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  int64_t inter = 0, uni = 0;
  for (size_t p = 0; p < a.size(); ++p) {
    inter += a[p] && b[p];
    uni += a[p] || b[p];
  }
  return uni ? double(inter) / double(uni) : 0.0;
}

}  // namespace

std::map<int, double> InstanceApAccumulator::per_class() const {
  std::map<int, double> out;
  for (const auto& [cls, gts] : gts_) {
    if (gts.empty()) continue;
    std::vector<Det> dets;
    auto it = dets_.find(cls);
    if (it != dets_.end()) dets = it->second;
    // stable sort keeps insertion order across equal scores
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Det& a, const Det& b) { return a.score > b.score; });
    std::vector<char> gt_used(gts.size(), 0);
    std::vector<char> tp(dets.size(), 0);
    for (size_t d = 0; d < dets.size(); ++d) {
      double best = 0.5;
      int best_gt = -1;
      for (size_t gt = 0; gt < gts.size(); ++gt) {
        if (gt_used[gt] || gts[gt].first != dets[d].image) continue;
        double iou = mask_iou(dets[d].mask, gts[gt].second);
        if (iou >= best) {
          best = iou;
          best_gt = int(gt);
        }
      }
      if (best_gt >= 0) {
        gt_used[size_t(best_gt)] = 1;
        tp[d] = 1;
      }
    }
    // all-point interpolated AP
    double ap = 0.0;
    int tps = 0;
    std::vector<double> precision, recall;
    for (size_t d = 0; d < dets.size(); ++d) {
      tps += tp[d];
      precision.push_back(double(tps) / double(d + 1));
      recall.push_back(double(tps) / double(gts.size()));
    }
    for (int d = int(dets.size()) - 2; d >= 0; --d)
      precision[size_t(d)] = std::max(precision[size_t(d)], precision[size_t(d) + 1]);
    double prev_r = 0.0;
    for (size_t d = 0; d < dets.size(); ++d) {
      if (tp[d]) {
        ap += (recall[d] - prev_r) * precision[d];
        prev_r = recall[d];
      }
    }
    out[cls] = ap;
  }
  return out;
}

double InstanceApAccumulator::ap50(const std::vector<int>& class_subset) const {
  auto pc = per_class();
  if (class_subset.empty()) {
    if (pc.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& [c, v] : pc) acc += v;
    return acc / double(pc.size());
  }
  return mean_of(pc, class_subset);
}

double ap50(const std::vector<PredInstance>& pred_instances,
            const std::vector<MaskTarget>& gt_instances) {
  for (const auto& p : pred_instances)
    if (p.score < 0.0 || p.score > 1.0)
      throw std::invalid_argument("ap50: scores must lie in [0,1]");
  InstanceApAccumulator acc;
  acc.add_image(pred_instances, gt_instances);
  return acc.ap50();
}

std::map<int, double> forgetting(const std::vector<MetricsRecord>& history) {
  if (history.size() < 2) throw std::invalid_argument("forgetting: need at least two steps");
  std::map<int, double> out;
  const auto& final_iou = history.back().per_class_iou;
  for (size_t s = 0; s + 1 < history.size(); ++s) {
    for (const auto& [cls, iou] : history[s].per_class_iou) {
      auto fin = final_iou.find(cls);
      double f = iou - (fin == final_iou.end() ? 0.0 : fin->second);
      auto it = out.find(cls);
      if (it == out.end())
        out[cls] = f;
      else
        it->second = std::max(it->second, f);
    }
  }
  return out;
}

}  // namespace ciseg
