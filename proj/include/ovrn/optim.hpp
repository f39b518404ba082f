#pragma once

// Adam with bias correction. Moment accumulators start at zero and the step
// counter advances by one per update.

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "ovrn/tensor.hpp"

namespace ovrn {

template <typename Scalar>
struct AdamConfig {
  Scalar learning_rate = Scalar(0.0005);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);
};

template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Tensor<Scalar>> params, AdamConfig<Scalar> cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.push_back(Eigen::ArrayX<Scalar>::Zero(p.size()));
      v_.push_back(Eigen::ArrayX<Scalar>::Zero(p.size()));
    }
  }

  // One bias-corrected update from the gradients currently held by the
  // parameters.
  void step() {
    ++step_;
    const Scalar bc1 = Scalar(1) - std::pow(cfg_.beta1, Scalar(step_));
    const Scalar bc2 = Scalar(1) - std::pow(cfg_.beta2, Scalar(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const auto& g = p.grad();
      m_[i] = cfg_.beta1 * m_[i] + (Scalar(1) - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (Scalar(1) - cfg_.beta2) * g * g;
      p.value() -= cfg_.learning_rate * (m_[i] / bc1) /
                   ((v_[i] / bc2).sqrt() + cfg_.epsilon);
    }
  }

  long step_count() const { return step_; }
  const Eigen::ArrayX<Scalar>& first_moment(std::size_t i) const { return m_[i]; }
  const Eigen::ArrayX<Scalar>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Tensor<Scalar>> params_;
  AdamConfig<Scalar> cfg_;
  std::vector<Eigen::ArrayX<Scalar>> m_;
  std::vector<Eigen::ArrayX<Scalar>> v_;
  long step_ = 0;
};

}  // namespace ovrn
