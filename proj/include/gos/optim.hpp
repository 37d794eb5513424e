#pragma once

#include <vector>

#include "gos/engine.hpp"

namespace gos {

// Plain SGD, optional momentum (0 by default).
class Sgd {
 public:
  explicit Sgd(double lr, double momentum = 0.0) : lr_(lr), momentum_(momentum) {}
  void step(ParameterStore& params, const GradStore& grads);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_;
  double momentum_;
  std::vector<Tensor> velocity_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParameterStore& params, const GradStore& grads);
  double lr() const { return lr_; }
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Divides the learning rate by `factor` when the monitored loss has not
// declined for `patience` consecutive epochs; signals a stop once that has
// happened at the floor rate.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, double floor_lr, int patience = 5, double factor = 10.0)
      : lr_(lr), floor_(floor_lr), patience_(patience), factor_(factor) {}

  // Feeds one epoch's validation loss. Returns true when training should stop.
  bool observe(double loss);
  double lr() const { return lr_; }
  int stagnant_epochs() const { return stagnant_; }
  bool improved_last() const { return improved_; }
  double best() const { return best_; }

 private:
  double lr_, floor_;
  int patience_;
  double factor_;
  double best_ = 0.0;
  bool has_best_ = false;
  bool improved_ = false;
  int stagnant_ = 0;
};

}  // namespace gos
