#include <doctest.h>

#include <cmath>

#include "pmdet/common.hpp"
#include "pmdet/mean_teacher.hpp"
#include "pmdet/rng.hpp"

using namespace pmdet;

namespace {

nn::ParamMap toy_params(std::uint64_t seed) {
  nn::ParamMap params;
  RngStream rng(seed);
  for (const char* name : {"detector/a", "detector/b", "detector/queries"}) {
    Tensor t({4, 3});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1, 1);
    params[name] = ad::parameter(std::move(t), name);
  }
  return params;
}

}  // namespace

TEST_CASE("ema_update: fixed point, full copy, and the 0.999 case") {
  nn::ParamMap student = toy_params(1);

  // alpha = 1: teacher unchanged
  TeacherState t1 = init_teacher(student, 1.0);
  const Tensor before = t1.shadow.at("detector/a");
  for (auto& [k, v] : student) v->value.fill(0.0);
  ema_update(t1, student);
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(t1.shadow.at("detector/a")[i] == before[i]);
  CHECK(t1.step == 1);

  // alpha = 0: teacher equals student exactly
  nn::ParamMap student2 = toy_params(2);
  TeacherState t0 = init_teacher(student2, 0.0);
  for (auto& [k, v] : student2) v->value.fill(0.25);
  ema_update(t0, student2);
  for (const auto& [k, shadow] : t0.shadow)
    for (std::size_t i = 0; i < shadow.size(); ++i) CHECK(shadow[i] == 0.25);

  // alpha = 0.999, teacher 1, student 0 -> 0.999
  nn::ParamMap student3 = toy_params(3);
  for (auto& [k, v] : student3) v->value.fill(1.0);
  TeacherState t999 = init_teacher(student3, 0.999);
  for (auto& [k, v] : student3) v->value.fill(0.0);
  ema_update(t999, student3);
  for (const auto& [k, shadow] : t999.shadow)
    for (std::size_t i = 0; i < shadow.size(); ++i)
      CHECK(shadow[i] == doctest::Approx(0.999).epsilon(1e-12));
}

TEST_CASE("ema_update is element-wise exact across alphas") {
  RngStream rng(5);
  for (double alpha : {0.0, 0.5, 0.999, 1.0}) {
    nn::ParamMap student = toy_params(rng.next_u64());
    TeacherState state = init_teacher(student, alpha);
    // scramble both sides
    std::map<std::string, Tensor> old_shadow = state.shadow;
    for (auto& [k, v] : student)
      for (std::size_t i = 0; i < v->value.size(); ++i)
        v->value[i] = rng.uniform(-2, 2);
    ema_update(state, student);
    for (const auto& [k, shadow] : state.shadow) {
      const Tensor& theta = student.at(k)->value;
      for (std::size_t i = 0; i < shadow.size(); ++i) {
        const double expect = alpha * old_shadow.at(k)[i] +
                              (1.0 - alpha) * theta[i];
        CHECK(std::fabs(shadow[i] - expect) < 1e-7);
      }
    }
  }
}

TEST_CASE("ema_update rejects name and shape mismatches") {
  nn::ParamMap student = toy_params(7);
  TeacherState state = init_teacher(student, 0.9);

  nn::ParamMap renamed = toy_params(7);
  renamed.erase("detector/a");
  CHECK_THROWS_AS(ema_update(state, renamed), StateError);

  nn::ParamMap reshaped = toy_params(7);
  reshaped["detector/a"] = ad::parameter(Tensor({2, 2}), "detector/a");
  CHECK_THROWS_AS(ema_update(state, reshaped), StateError);
}

TEST_CASE("teacher shadows never receive gradients") {
  nn::ParamMap student = toy_params(9);
  TeacherState state = init_teacher(student, 0.99);
  const std::map<std::string, Tensor> before = state.shadow;

  // student takes a backward pass
  ad::Var loss = ad::mean_all(
      ad::mul(student.at("detector/a"), student.at("detector/a")));
  ad::backward(loss);
  CHECK(student.at("detector/a")->grad.size() > 0);

  for (const auto& [k, shadow] : state.shadow)
    for (std::size_t i = 0; i < shadow.size(); ++i)
      CHECK(shadow[i] == before.at(k)[i]);
}

TEST_CASE("exclusion list keeps object queries out of the shadow") {
  nn::ParamMap student = toy_params(11);
  TeacherState state = init_teacher(student, 0.9, {"detector/queries"});
  CHECK(state.shadow.count("detector/queries") == 0);
  CHECK(state.shadow.count("detector/a") == 1);
}

TEST_CASE("pseudo-label filtering: threshold edge cases and monotonicity") {
  std::vector<RawDetection> raw(5);
  for (int i = 0; i < 5; ++i) {
    raw[i].label = i % 3;
    raw[i].score = 0.2 * (i + 1) - 0.1;  // 0.1 0.3 0.5 0.7 0.9
    raw[i].box = {0.5, 0.5, 0.2, 0.2};
  }

  CHECK(filter_pseudo_labels(raw, 1.0).detections.empty());
  CHECK(filter_pseudo_labels(raw, 0.0).detections.size() == 5);

  const auto at_low = filter_pseudo_labels(raw, 0.3);
  const auto at_high = filter_pseudo_labels(raw, 0.6);
  // higher-threshold set is a subset of the lower-threshold set
  for (const auto& det : at_high.detections) {
    bool found = false;
    for (const auto& low : at_low.detections)
      if (low.score == det.score && low.label == det.label) found = true;
    CHECK(found);
  }

  const GroundTruth gt = pseudo_labels_to_ground_truth(at_low);
  CHECK(gt.labels.size() == at_low.detections.size());
  CHECK(gt.boxes.rows() == at_low.detections.size());
}
