#include "pmdet/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "pmdet/common.hpp"

namespace pmdet {

double iou_cxcywh(const std::array<double, 4>& a,
                  const std::array<double, 4>& b) {
  const double ax0 = a[0] - a[2] / 2, ax1 = a[0] + a[2] / 2;
  const double ay0 = a[1] - a[3] / 2, ay1 = a[1] + a[3] / 2;
  const double bx0 = b[0] - b[2] / 2, bx1 = b[0] + b[2] / 2;
  const double by0 = b[1] - b[3] / 2, by1 = b[1] + b[3] / 2;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double uni = a[2] * a[3] + b[2] * b[3] - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double average_precision(std::vector<EvalDetection> detections,
                         const std::vector<EvalGroundTruth>& ground_truths,
                         double iou_threshold) {
  if (ground_truths.empty()) return 0.0;

  // Highest confidence first; ties resolve by image then insertion order so
  // the ranking is deterministic.
  std::stable_sort(detections.begin(), detections.end(),
                   [](const EvalDetection& a, const EvalDetection& b) {
                     return a.score > b.score;
                   });

  std::vector<bool> gt_used(ground_truths.size(), false);
  std::vector<int> tp(detections.size(), 0);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    double best_iou = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      if (gt_used[g] || ground_truths[g].image_id != detections[d].image_id)
        continue;
      const double iou = iou_cxcywh(detections[d].box, ground_truths[g].box);
      if (iou >= iou_threshold && iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      gt_used[best_gt] = true;
      tp[d] = 1;
    }
  }

  // All-point interpolation: area under the monotone precision envelope.
  const double n_gt = static_cast<double>(ground_truths.size());
  std::vector<double> precision(detections.size()), recall(detections.size());
  int cum_tp = 0;
  for (std::size_t d = 0; d < detections.size(); ++d) {
    cum_tp += tp[d];
    precision[d] = static_cast<double>(cum_tp) / static_cast<double>(d + 1);
    recall[d] = static_cast<double>(cum_tp) / n_gt;
  }
  for (std::size_t d = detections.size(); d-- > 1;)
    precision[d - 1] = std::max(precision[d - 1], precision[d]);

  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t d = 0; d < detections.size(); ++d) {
    ap += (recall[d] - prev_recall) * precision[d];
    prev_recall = recall[d];
  }
  return ap;
}

EvalResult evaluate_detections(const std::vector<EvalDetection>& detections,
                               const std::vector<EvalGroundTruth>& gts,
                               double iou_threshold) {
  EvalResult result;
  std::map<int, std::vector<EvalGroundTruth>> gt_by_class;
  for (const auto& gt : gts) gt_by_class[gt.label].push_back(gt);
  if (gt_by_class.empty()) {
    warn("evaluate_detections: no ground truth in any class, mAP defined 0");
    return result;
  }
  std::map<int, std::vector<EvalDetection>> det_by_class;
  for (const auto& det : detections) det_by_class[det.label].push_back(det);

  double sum = 0.0;
  for (const auto& [label, class_gts] : gt_by_class) {
    const auto it = det_by_class.find(label);
    const double ap =
        it == det_by_class.end()
            ? 0.0
            : average_precision(it->second, class_gts, iou_threshold);
    result.ap_per_class[label] = ap;
    sum += ap;
  }
  result.map = sum / static_cast<double>(gt_by_class.size());
  return result;
}

}  // namespace pmdet
