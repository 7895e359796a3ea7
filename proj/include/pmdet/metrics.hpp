#pragma once

#include <array>
#include <map>
#include <vector>

namespace pmdet {

// COCO-style mAP at a single IoU threshold: detections ranked by confidence,
// greedy matching against at-most-once ground truths, all-point interpolated
// average precision, mean over the classes present in the ground truth.

struct EvalDetection {
  int image_id = 0;
  int label = 0;
  double score = 0.0;
  std::array<double, 4> box{};  // normalized (cx, cy, w, h)
};

struct EvalGroundTruth {
  int image_id = 0;
  int label = 0;
  std::array<double, 4> box{};
};

struct EvalResult {
  std::map<int, double> ap_per_class;
  double map = 0.0;
};

double iou_cxcywh(const std::array<double, 4>& a,
                  const std::array<double, 4>& b);

// AP for one class over a pooled detection list; detections must all carry
// the same label as the ground truths.
double average_precision(std::vector<EvalDetection> detections,
                         const std::vector<EvalGroundTruth>& ground_truths,
                         double iou_threshold);

EvalResult evaluate_detections(const std::vector<EvalDetection>& detections,
                               const std::vector<EvalGroundTruth>& gts,
                               double iou_threshold);

}  // namespace pmdet
