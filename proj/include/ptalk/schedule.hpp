#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ptalk/tensor.hpp"

namespace ptalk::diffusion {

// Blend family for the forward process. Literal uses the level directly:
//   z_t = a*z0 + (1-a)*eps
// VariancePreserving uses the conventional sqrt parameterization:
//   z_t = sqrt(a)*z0 + sqrt(1-a)*eps
// Literal is the tested default; VariancePreserving exists for comparison.
enum class BlendForm { Literal, VariancePreserving };

class NoiseSchedule {
public:
    NoiseSchedule(std::vector<Scalar> alpha, BlendForm form = BlendForm::Literal)
        : alpha_(std::move(alpha)), form_(form) {
        validate();
    }

    // Linear decay of the level from 1.0 at t=0 to alpha_end at t=T.
    static NoiseSchedule linear(int num_steps, Scalar alpha_end = 0.005,
                                BlendForm form = BlendForm::Literal) {
        if (num_steps < 1) throw std::invalid_argument("NoiseSchedule: num_steps < 1");
        std::vector<Scalar> a(static_cast<size_t>(num_steps) + 1);
        for (int t = 0; t <= num_steps; ++t)
            a[static_cast<size_t>(t)] = 1.0 + (alpha_end - 1.0) * static_cast<Scalar>(t) / num_steps;
        return NoiseSchedule(std::move(a), form);
    }

    int num_steps() const { return static_cast<int>(alpha_.size()) - 1; }
    BlendForm form() const { return form_; }

    Scalar alpha(int t) const {
        check_t(t);
        return alpha_[static_cast<size_t>(t)];
    }
    Scalar signal_coef(int t) const {
        const Scalar a = alpha(t);
        return form_ == BlendForm::Literal ? a : std::sqrt(a);
    }
    Scalar noise_coef(int t) const {
        const Scalar a = alpha(t);
        return form_ == BlendForm::Literal ? 1.0 - a : std::sqrt(1.0 - a);
    }

    const std::vector<Scalar>& levels() const { return alpha_; }

private:
    void validate() const {
        if (alpha_.size() < 2) throw std::invalid_argument("NoiseSchedule: need at least one step");
        if (alpha_.front() != 1.0) throw std::invalid_argument("NoiseSchedule: alpha at t=0 must be 1");
        if (alpha_.back() > 0.01) throw std::invalid_argument("NoiseSchedule: alpha at t=T must be <= 0.01");
        for (size_t i = 0; i < alpha_.size(); ++i) {
            if (alpha_[i] < 0.0 || alpha_[i] > 1.0)
                throw std::invalid_argument("NoiseSchedule: level outside [0,1]");
            if (i > 0 && alpha_[i] > alpha_[i - 1])
                throw std::invalid_argument("NoiseSchedule: levels must be non-increasing");
        }
    }
    void check_t(int t) const {
        if (t < 0 || t > num_steps())
            throw std::out_of_range("NoiseSchedule: timestep " + std::to_string(t) + " outside [0," +
                                    std::to_string(num_steps()) + "]");
    }

    std::vector<Scalar> alpha_;
    BlendForm form_;
};

}  // namespace ptalk::diffusion
