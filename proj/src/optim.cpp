#include "nautilus/optim.hpp"

#include <cmath>

#include "nautilus/errors.hpp"

namespace nautilus {

void Adam::step(std::map<std::string, Mat>& params,
                const std::map<std::string, Mat>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ModelError("gradient for unknown parameter " + name);
    Mat& p = it->second;
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw ModelError("gradient shape mismatch for " + name);
    Mat& m = m_.try_emplace(name, Mat::Zero(p.rows(), p.cols())).first->second;
    Mat& v = v_.try_emplace(name, Mat::Zero(p.rows(), p.cols())).first->second;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    const Mat mhat = m / bc1;
    const Mat vhat = v / bc2;
    p.array() -=
        cfg_.learning_rate * mhat.array() / (vhat.array().sqrt() + cfg_.epsilon);
    round_f32_inplace(p);
  }
}

}  // namespace nautilus
