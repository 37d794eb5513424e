#include "gos/optim.hpp"

#include <cmath>

#include "gos/errors.hpp"
#include "gos/kernels.hpp"

namespace gos {

void Sgd::step(ParameterStore& params, const GradStore& grads) {
  if (grads.size() != params.size()) throw DimensionError("Sgd: gradient/parameter count mismatch");
  if (momentum_ == 0.0) {
    for (ParamId i = 0; i < params.size(); ++i) {
      Tensor& p = params.value(i);
      kernels::axpy(-lr_, grads[i].data(), p.data(), p.size());
    }
    return;
  }
  if (velocity_.empty())
    for (ParamId i = 0; i < params.size(); ++i) velocity_.emplace_back(params.value(i).shape());
  for (ParamId i = 0; i < params.size(); ++i) {
    Tensor& p = params.value(i);
    Tensor& v = velocity_[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum_ * v[k] + grads[i][k];
      p[k] -= lr_ * v[k];
    }
  }
}

void Adam::step(ParameterStore& params, const GradStore& grads) {
  if (grads.size() != params.size()) throw DimensionError("Adam: gradient/parameter count mismatch");
  if (m_.empty())
    for (ParamId i = 0; i < params.size(); ++i) {
      m_.emplace_back(params.value(i).shape());
      v_.emplace_back(params.value(i).shape());
    }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (ParamId i = 0; i < params.size(); ++i) {
    Tensor& p = params.value(i);
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = grads[i][k];
      m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
      v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
      const double mh = m_[i][k] / c1;
      const double vh = v_[i][k] / c2;
      p[k] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

bool PlateauSchedule::observe(double loss) {
  if (!has_best_ || loss < best_) {
    best_ = loss;
    has_best_ = true;
    stagnant_ = 0;
    improved_ = true;
    return false;
  }
  improved_ = false;
  if (++stagnant_ < patience_) return false;
  // Floor comparison with slack so repeated division lands exactly on it.
  if (lr_ <= floor_ * (1.0 + 1e-9)) return true;
  lr_ = std::max(lr_ / factor_, floor_);
  stagnant_ = 0;
  return false;
}

}  // namespace gos
