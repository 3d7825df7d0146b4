#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "vpt/errors.hpp"
#include "vpt/tensor.hpp"

namespace vptlab {

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by position in the
// parameter list, so the list order must stay stable across steps.
template <typename Real>
class AdamT {
 public:
  explicit AdamT(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  int64_t steps() const { return t_; }

  void step(const ParamListT<Real>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t p = 0; p < params.size(); ++p) {
        m_[p].assign(params[p].tensor->numel(), 0.0);
        v_[p].assign(params[p].tensor->numel(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw usage_error("adam: parameter list changed size");
    t_++;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t p = 0; p < params.size(); ++p) {
      TensorT<Real>& t = *params[p].tensor;
      if (!t.requires_grad || !t.grad) {
        throw usage_error("adam: parameter '" + params[p].name + "' has no gradient buffer");
      }
      if (m_[p].size() != t.data->size()) {
        throw usage_error("adam: parameter '" + params[p].name + "' changed size");
      }
      for (size_t i = 0; i < t.data->size(); ++i) {
        const double g = (*t.grad)[i];
        if (!std::isfinite(g)) {
          throw numeric_error("adam: non-finite gradient in parameter '" + params[p].name + "'");
        }
        m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g;
        v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g * g;
        const double m_hat = m_[p][i] / bc1;
        const double v_hat = v_[p][i] / bc2;
        (*t.data)[i] -= static_cast<Real>(cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps));
      }
    }
  }

  void zero_grad(const ParamListT<Real>& params) {
    for (const auto& p : params) p.tensor->zero_grad();
  }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

using Adam = AdamT<float>;

}  // namespace vptlab
