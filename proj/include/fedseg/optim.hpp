#pragma once

#include <cmath>
#include <vector>

#include "fedseg/tensor.hpp"

namespace fedseg {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Holds moment state per parameter tensor; the
// parameter list is fixed at construction.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, AdamConfig cfg = AdamConfig{})
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].data().size(), 0.0);
            v_[i].assign(params_[i].data().size(), 0.0);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& data = params_[i].data();
            const auto& grad = params_[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < data.size(); ++j) {
                const double g = grad[j];
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                data[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace fedseg
