#include "pmdet/mean_teacher.hpp"

#include <algorithm>

#include "pmdet/common.hpp"

namespace pmdet {

TeacherState init_teacher(const nn::ParamMap& student, double alpha,
                          const std::vector<std::string>& exclude) {
  if (alpha < 0.0 || alpha > 1.0)
    throw ConfigError("init_teacher: alpha must lie in [0, 1]");
  TeacherState state;
  state.alpha = alpha;
  for (const auto& [name, p] : student) {
    if (std::find(exclude.begin(), exclude.end(), name) != exclude.end())
      continue;
    state.shadow[name] = p->value;
  }
  return state;
}

void ema_update(TeacherState& teacher, const nn::ParamMap& student) {
  for (auto& [name, shadow] : teacher.shadow) {
    auto it = student.find(name);
    if (it == student.end())
      throw StateError("ema_update: student is missing parameter " + name);
    const Tensor& value = it->second->value;
    if (!shadow.same_shape(value))
      throw StateError("ema_update: shape mismatch for " + name);
    double* s = shadow.data();
    const double* v = value.data();
    const double a = teacher.alpha;
    for (std::size_t i = 0; i < shadow.size(); ++i)
      s[i] = a * s[i] + (1.0 - a) * v[i];
  }
  ++teacher.step;
}

void load_shadow(const TeacherState& teacher, const nn::ParamMap& into) {
  for (const auto& [name, shadow] : teacher.shadow) {
    auto it = into.find(name);
    if (it == into.end())
      throw StateError("load_shadow: destination is missing parameter " + name);
    if (!it->second->value.same_shape(shadow))
      throw StateError("load_shadow: shape mismatch for " + name);
    it->second->value = shadow;
  }
}

void sync_object_queries(ToyDetector& teacher, const ToyDetector& student) {
  const ad::Var student_q = student.object_queries();
  const ad::Var teacher_q = teacher.object_queries();
  if (!teacher_q->value.same_shape(student_q->value))
    throw StateError("sync_object_queries: query shape mismatch");
  teacher.bind_object_queries(student_q);
}

PseudoLabels filter_pseudo_labels(const std::vector<RawDetection>& raw,
                                  double threshold) {
  PseudoLabels out;
  out.threshold = threshold;
  // Same strict-> rule as postprocess, so threshold 1.0 is always empty.
  for (const auto& det : raw)
    if (det.score > threshold) out.detections.push_back(det);
  return out;
}

GroundTruth pseudo_labels_to_ground_truth(const PseudoLabels& labels) {
  GroundTruth gt;
  gt.boxes = Tensor({labels.detections.size(), 4});
  for (std::size_t i = 0; i < labels.detections.size(); ++i) {
    gt.labels.push_back(labels.detections[i].label);
    for (int k = 0; k < 4; ++k)
      gt.boxes.at2(i, k) = labels.detections[i].box[k];
  }
  return gt;
}

}  // namespace pmdet
