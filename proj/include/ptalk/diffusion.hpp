#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ptalk/nn.hpp"
#include "ptalk/schedule.hpp"
#include "ptalk/tensor.hpp"

namespace ptalk::diffusion {

// A latent together with its position on the noise schedule.
struct LatentState {
    Tensor tensor;
    int timestep = 0;
    const NoiseSchedule* schedule = nullptr;

    LatentState() = default;
    LatentState(Tensor t, int step, const NoiseSchedule& sched);
};

struct Condition {
    enum class Kind { Speech, None };
    Tensor embedding;  // empty for Kind::None
    Kind kind = Kind::None;

    static Condition speech(Tensor e) { return Condition{std::move(e), Kind::Speech}; }
    static Condition none() { return Condition{}; }
    int dim() const { return embedding.data.empty() ? 0 : static_cast<int>(embedding.size()); }
};

// Noise-prediction network interface. predict() runs on a tape so gradients
// can flow to both the parameters and the latent input.
class Denoiser : public nn::Module {
public:
    virtual int latent_dim() const = 0;
    virtual int cond_dim() const = 0;
    // z: (B, latent_dim). cond: (cond_dim,) broadcast to the batch, or empty.
    virtual ad::Var predict(ad::Tape& tape, ad::Var z, const Condition& cond, int t) = 0;

    // Convenience no-grad forward for a single latent vector.
    Tensor predict_tensor(const Tensor& z, const Condition& cond, int t);
};

// Small residual MLP denoiser with a sinusoidal timestep embedding.
class MlpDenoiser : public Denoiser {
public:
    MlpDenoiser(int latent_dim, int cond_dim, int hidden, uint64_t seed, int time_dim = 8);

    int latent_dim() const override { return latent_dim_; }
    int cond_dim() const override { return cond_dim_; }
    ad::Var predict(ad::Tape& tape, ad::Var z, const Condition& cond, int t) override;
    void collect(std::vector<nn::Parameter*>& out) override;

private:
    int latent_dim_, cond_dim_, time_dim_;
    nn::Linear in_, mid_, out_;
};

// z_t = signal(t)*z0 + noise(t)*eps. eps may carry a prior shift; the same
// blend serves training and inference.
Tensor forward_noise(const Tensor& z0, int t, const NoiseSchedule& schedule, const Tensor& eps);

// Tape version used when the noise input depends on trainable parameters.
ad::Var forward_noise(ad::Tape& tape, ad::Var z0, int t, const NoiseSchedule& schedule, ad::Var eps);

// Noise-prediction objective: mean over elements of (eps - eps_hat)^2.
// z0/eps rows form the batch; eps must be the draw that formed z_t.
ad::Var ldm_loss(ad::Tape& tape, Denoiser& den, const Condition& cond, const Tensor& z0, int t,
                 const Tensor& eps, const NoiseSchedule& schedule);
Scalar ldm_loss_value(Denoiser& den, const Condition& cond, const Tensor& z0, int t,
                      const Tensor& eps, const NoiseSchedule& schedule);

// Inversion of the blend at the state's timestep.
Tensor denoised_estimate(const LatentState& zt, const Tensor& eps_pred);

// Deterministic sampler: alternately estimates z0 and re-blends at t-1 with
// the predicted noise, from t=T down to 0. init empty => drawn from the seed.
Tensor sample(Denoiser& den, const Condition& cond, const Tensor& init, const NoiseSchedule& schedule,
              uint64_t seed);

}  // namespace ptalk::diffusion
