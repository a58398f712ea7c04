#pragma once

#include <cmath>
#include <vector>

#include "ctseg/layers.hpp"

namespace ctseg::nn {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Param<T>*> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      T* w = params_[k]->value.data();
      const T* g = params_[k]->grad.data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= static_cast<T>(opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps));
      }
    }
  }

  void zero_grad() { nn::zero_grad(params_); }
  long steps() const { return t_; }

 private:
  std::vector<Param<T>*> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace ctseg::nn
