#pragma once

#include <cmath>
#include <vector>

#include "tcrm/parameters.hpp"

namespace tcrm {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global L2 clip on the concatenated gradient; <= 0 disables.
  double max_grad_norm = 1.0;
};

/// AdamW with decoupled weight decay. Moment buffers are sized lazily from the
/// store on the first step.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  [[nodiscard]] const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  /// Applies one update from the store's gradients, then zeroes them.
  /// Returns the pre-clip gradient norm.
  double step(ParameterStore& store) {
    if (m_.empty()) {
      for (std::size_t i = 0; i < store.count(); ++i) {
        m_.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
        v_.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
      }
    }
    double sq = 0.0;
    for (std::size_t i = 0; i < store.count(); ++i) {
      sq += store.grad(i).squaredNorm();
    }
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.max_grad_norm > 0.0 && norm > cfg_.max_grad_norm) ? cfg_.max_grad_norm / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < store.count(); ++i) {
      Matrix& w = store.value(i);
      const Matrix g = store.grad(i) * clip;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      if (cfg_.weight_decay > 0.0) {
        w *= (1.0 - cfg_.lr * cfg_.weight_decay);
      }
      w.array() -= cfg_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
    }
    store.zero_grad();
    return norm;
  }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

}  // namespace tcrm
