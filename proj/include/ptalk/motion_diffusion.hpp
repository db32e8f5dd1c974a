#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ptalk/diffusion.hpp"
#include "ptalk/nn.hpp"
#include "ptalk/tensor.hpp"

namespace ptalk::motion_diffusion {

struct MotionSequence {
    Tensor frames;  // (N, d_m) motion codes
    int fps = 25;

    int length() const { return frames.dim(0); }
    int dim() const { return frames.dim(1); }
};

// Noise predictor over whole sequences: per-frame input (noisy code, speech
// feature, timestep embedding) mixed by a temporal conv stack (kernel 3,
// zero-initialized output head).
class TemporalConvDenoiser : public nn::Module {
public:
    TemporalConvDenoiser() = default;
    TemporalConvDenoiser(int motion_dim, int speech_dim, int hidden, uint64_t seed, int time_dim = 8);

    int motion_dim() const { return motion_dim_; }
    int speech_dim() const { return speech_dim_; }

    // noisy: (N, d_m); speech: (N, d_s)
    ad::Var predict(ad::Tape& tape, ad::Var noisy, const Tensor& speech, int t);
    Tensor predict_tensor(const Tensor& noisy, const Tensor& speech, int t);
    void collect(std::vector<nn::Parameter*>& out) override;

private:
    int motion_dim_ = 0, speech_dim_ = 0, time_dim_ = 0, hidden_ = 0;
    nn::Conv2d c1_, c2_, out_;
};

// Sequence noising shares the element-wise blend with the portrait stage, so
// the round-trip algebra is identical.
ad::Var motion_diffusion_loss(ad::Tape& tape, TemporalConvDenoiser& den, const Tensor& speech,
                              const Tensor& m0, int t, const Tensor& eps,
                              const diffusion::NoiseSchedule& schedule);
Scalar motion_diffusion_loss_value(TemporalConvDenoiser& den, const Tensor& speech, const Tensor& m0,
                                   int t, const Tensor& eps, const diffusion::NoiseSchedule& schedule);

// Deterministic sampler over the whole sequence, seeded start noise.
MotionSequence sample_motion(TemporalConvDenoiser& den, const Tensor& speech, int n_frames,
                             const diffusion::NoiseSchedule& schedule, uint64_t seed);

// Adam loop over (speech sequence, clean motion sequence) pairs.
std::vector<Scalar> train_motion_diffusion(TemporalConvDenoiser& den,
                                           const std::vector<std::pair<Tensor, Tensor>>& data,
                                           const diffusion::NoiseSchedule& schedule, int steps,
                                           Scalar lr, uint64_t seed);

// Mean per-step code change, the latent-level temporal-smoothness statistic.
Scalar mean_frame_delta(const Tensor& frames);

}  // namespace ptalk::motion_diffusion
