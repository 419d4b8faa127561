#pragma once

#include <cmath>
#include <vector>

#include "qalign/tensor.hpp"

namespace qalign {

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam over an explicit parameter list. Parameters
// without an accumulated gradient this step are treated as having zero
// gradient (their moments still decay).
template <typename S>
class AdamW {
public:
    AdamW(std::vector<Tensor<S>> params, AdamWConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), 0.0);
            v_[i].assign(params_[i].numel(), 0.0);
        }
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor<S>& p = params_[i];
            const bool has_grad = p.has_grad();
            const std::vector<S>* g = has_grad ? &p.grad() : nullptr;
            for (std::size_t j = 0; j < p.numel(); ++j) {
                const double gj = has_grad ? static_cast<double>((*g)[j]) : 0.0;
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * gj;
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * gj * gj;
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                double w = static_cast<double>(p[j]);
                w -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps));
                w -= cfg_.lr * cfg_.weight_decay * w;
                p[j] = static_cast<S>(w);
            }
        }
    }

    std::size_t steps_taken() const { return t_; }

private:
    std::vector<Tensor<S>> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamWConfig cfg_;
    std::size_t t_ = 0;
};

}  // namespace qalign
