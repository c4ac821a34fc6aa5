#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ciseg/losses.hpp"
#include "ciseg/tensor.hpp"

namespace ciseg {

// One evaluation event. Serialized as a single JSONL line with stable key
// order; wall_clock is emitted as 0 unless timing is explicitly enabled so
// identical runs stay byte-identical.
struct MetricsRecord {
  int step = 0;
  int iteration = 0;
  std::map<int, double> per_class_iou;  // class id -> IoU (or AP50 in instance mode)
  double miou_old = 0.0;
  double miou_new = 0.0;
  double miou_all = 0.0;
  double ap50 = -1.0;      // instance mode only, else -1
  double ap50_old = -1.0;
  double ap50_new = -1.0;
  LossBreakdown loss;
  int64_t param_count = 0;
  double wall_clock = 0.0;
};

// IoU of a single prediction/ground-truth pair. Classes absent from both are
// omitted from the result (not scored 0 or 1).
std::map<int, double> iou_per_class(const std::vector<uint8_t>& pred_labels,
                                    const std::vector<uint8_t>& gt_labels,
                                    const std::vector<int>& class_set);

// Test-set aggregation: intersections and unions accumulate across images
// before the division.
class IoUAccumulator {
 public:
  void add(const std::vector<uint8_t>& pred_labels, const std::vector<uint8_t>& gt_labels,
           const std::vector<int>& class_set);
  // classes with an empty union over the whole set are excluded
  std::map<int, double> per_class() const;

 private:
  std::map<int, std::pair<int64_t, int64_t>> inter_union_;
};

double mean_of(const std::map<int, double>& per_class, const std::vector<int>& subset);

// Per-pixel argmax over (query, class) of p_i(class) * sigmoid(mask_i); a
// pixel falls to background (255) when its best score is below half the
// maximum possible score. Ties resolve to the lowest class id.
std::vector<uint8_t> semantic_inference(const Tensor<float>& class_logits,
                                        const Tensor<float>& mask_logits,
                                        const std::vector<int>& column_class_ids);

struct PredInstance {
  int class_id = -1;
  double score = 0.0;
  std::vector<uint8_t> mask;
};

// Thresholded per-query instance extraction; queries whose argmax is
// no-object produce nothing.
std::vector<PredInstance> instance_inference(const Tensor<float>& class_logits,
                                             const Tensor<float>& mask_logits,
                                             const std::vector<int>& column_class_ids);

// AP at IoU 0.5 accumulated over any number of images: greedy highest-IoU
// matching per class in score order, all-point interpolated area under the
// precision/recall curve, averaged over classes with at least one ground
// truth.
class InstanceApAccumulator {
 public:
  void add_image(const std::vector<PredInstance>& preds, const std::vector<MaskTarget>& gts);
  double ap50(const std::vector<int>& class_subset = {}) const;
  std::map<int, double> per_class() const;

 private:
  struct Det {
    int image = 0;
    double score = 0.0;
    std::vector<uint8_t> mask;
  };
  std::map<int, std::vector<Det>> dets_;
  std::map<int, std::vector<std::pair<int, std::vector<uint8_t>>>> gts_;  // class -> (image, mask)
  int images_ = 0;
};

// Single-image convenience form of the accumulator.
double ap50(const std::vector<PredInstance>& pred_instances,
            const std::vector<MaskTarget>& gt_instances);

// Per class: best IoU over past steps minus the final step's IoU.
std::map<int, double> forgetting(const std::vector<MetricsRecord>& end_of_step_history);

}  // namespace ciseg
