#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "nautilus/util.hpp"

namespace nautilus {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adaptive-moment optimizer over named tensors. Updated parameters are
// rounded to float-representable values so checkpoints stay lossless; the
// moment buffers keep full precision.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::map<std::string, Mat>& params,
            const std::map<std::string, Mat>& grads);
  std::uint64_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Mat> m_;
  std::map<std::string, Mat> v_;
};

}  // namespace nautilus
