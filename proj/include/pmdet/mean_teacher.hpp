#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pmdet/detector.hpp"
#include "pmdet/nn.hpp"

namespace pmdet {

// EMA parameter shadowing for the teacher model plus confidence-filtered
// pseudo-label generation. Object query embeddings are shared between the
// two models (bound, never blended).

struct TeacherState {
  std::map<std::string, Tensor> shadow;  // mirrors student names exactly
  double alpha = 0.999;
  std::int64_t step = 0;
};

struct PseudoLabels {
  std::vector<RawDetection> detections;  // scores >= threshold
  double threshold = 0.5;
};

// Copy the student's current values into a fresh shadow. `exclude` names are
// left out (the bound object queries).
TeacherState init_teacher(const nn::ParamMap& student, double alpha,
                          const std::vector<std::string>& exclude = {});

// theta' <- alpha * theta' + (1 - alpha) * theta, element-wise, for every
// shadow array; the step counter increments.
void ema_update(TeacherState& teacher, const nn::ParamMap& student);

// Copy the shadow into a teacher model's parameter map (names must match).
void load_shadow(const TeacherState& teacher, const nn::ParamMap& into);

// Rebind the teacher model's object query node to the student's so the two
// stay bit-equal at every step.
void sync_object_queries(ToyDetector& teacher, const ToyDetector& student);

// Filter raw teacher detections at the generation threshold.
PseudoLabels filter_pseudo_labels(const std::vector<RawDetection>& raw,
                                  double threshold);

GroundTruth pseudo_labels_to_ground_truth(const PseudoLabels& labels);

}  // namespace pmdet
