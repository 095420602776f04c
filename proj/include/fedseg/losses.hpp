#pragma once

#include <stdexcept>

#include "fedseg/tensor.hpp"

namespace fedseg {

struct LossConfig {
    double alpha = 0.8;   // weight on the Dice term; 1-alpha on BCE
    double smooth = 1.0;  // added to Dice numerator and denominator

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0))
            throw std::invalid_argument("LossConfig: alpha must lie in [0,1]");
        if (!(smooth > 0.0)) throw std::invalid_argument("LossConfig: smooth must be positive");
    }
};

namespace detail {

inline void check_binary(const Tensor& t, const char* op) {
    for (double v : t.data())
        if (v != 0.0 && v != 1.0)
            fail(std::string(op) + ": target must be binary (0/1), found " + std::to_string(v));
}

}  // namespace detail

// Soft Dice over the whole batch: one numerator/denominator across B*H*W.
inline Tensor dice_loss(Tape* tape, const Tensor& pred, const Tensor& target,
                        double smooth = 1.0) {
    detail::check_same_shape(pred, target, "dice_loss");
    detail::check(smooth > 0.0, "dice_loss: smooth must be positive");
    detail::check_binary(target, "dice_loss");
    Tensor inter = sum(tape, mul(tape, pred, target));
    Tensor num = add_scalar(tape, scale(tape, inter, 2.0), smooth);
    Tensor den = add_scalar(tape, add(tape, sum(tape, pred), sum(tape, target)), smooth);
    return add_scalar(tape, scale(tape, div(tape, num, den), -1.0), 1.0);
}

inline Tensor bce_loss(Tape* tape, const Tensor& pred, const Tensor& target) {
    detail::check_binary(target, "bce_loss");
    return bce_mean(tape, pred, target, 1e-7);
}

// alpha * Dice + (1-alpha) * BCE
inline Tensor combined_loss(Tape* tape, const Tensor& pred, const Tensor& target,
                            const LossConfig& cfg = {}) {
    cfg.validate();
    Tensor d = dice_loss(tape, pred, target, cfg.smooth);
    Tensor b = bce_loss(tape, pred, target);
    return add(tape, scale(tape, d, cfg.alpha), scale(tape, b, 1.0 - cfg.alpha));
}

// Hard Dice score on thresholded predictions. Values above `threshold` count
// as foreground. Both masks empty scores 1 (all-background slices are counted
// as perfectly segmented).
inline double dice_score(const Tensor& pred, const Tensor& target, double threshold = 0.5) {
    detail::check_same_shape(pred, target, "dice_score");
    int64_t inter = 0, p = 0, t = 0;
    const auto& pd = pred.data();
    const auto& td = target.data();
    for (size_t i = 0; i < pd.size(); ++i) {
        const bool pf = pd[i] > threshold;
        const bool tf = td[i] > threshold;
        inter += pf && tf;
        p += pf;
        t += tf;
    }
    if (p + t == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

}  // namespace fedseg
