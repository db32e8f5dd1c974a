#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ptalk/diffusion.hpp"
#include "ptalk/nn.hpp"
#include "ptalk/tensor.hpp"

namespace ptalk::prior {

// Statistical mean face embedding with the provenance needed to re-check it.
struct FacePrior {
    Tensor vector;
    int64_t sample_count = 0;
    Scalar gender_ratio = 0.5;  // fraction of female contributors

    int dim() const { return static_cast<int>(vector.size()); }
};

// Streaming compensated (Kahan) mean; partial accumulators merge exactly by
// count weighting.
class PriorAccumulator {
public:
    void add(const Tensor& embedding);
    int64_t count() const { return n_; }
    Tensor mean() const;
    FacePrior finish(Scalar gender_ratio = 0.5) const;

private:
    Tensor sum_, comp_;
    int64_t n_ = 0;
};

FacePrior compute_prior(const std::vector<Tensor>& embeddings, Scalar gender_ratio = 0.5);
FacePrior merge_priors(const FacePrior& a, const FacePrior& b);

// Coordinate-averaged L1 between embedding vectors (the distance used by the
// prior-stability studies).
Scalar l1_mean_distance(const Tensor& a, const Tensor& b);

// Successive-prior distances at growing sample counts: entry i is
// (checkpoints[i+1], distance between the means at checkpoints i and i+1).
std::vector<std::pair<int, Scalar>> prior_convergence_curve(const std::vector<Tensor>& embeddings,
                                                            const std::vector<int>& checkpoints);

struct LabeledEmbedding {
    Tensor embedding;
    bool female = false;
};

// For each ratio, draws n_per_ratio embeddings with that female fraction and
// reports the distance of the resulting prior to the balanced (0.5) prior.
std::vector<std::pair<Scalar, Scalar>> gender_ratio_study(const std::vector<LabeledEmbedding>& pool,
                                                          const std::vector<Scalar>& ratios,
                                                          int n_per_ratio, uint64_t seed);

// Sample-adaptive gates: beta = W_s z_s + W_p z_p + b, raw linear output.
// Bias starts at the static-gate baseline 0.01 so an untrained module already
// injects a small prior share.
class Saw : public nn::Module {
public:
    Saw() = default;
    Saw(int d, int d_s, uint64_t seed, Scalar weight_scale = 0.01, Scalar bias_init = 0.01);

    Tensor weights(const Tensor& zs, const Tensor& zp) const;
    ad::Var weights(ad::Tape& tape, const Tensor& zs, const Tensor& zp);
    void collect(std::vector<nn::Parameter*>& out) override;

    static Tensor static_baseline(int d, Scalar value = 0.01) { return Tensor({d}, value); }

    nn::Parameter w_s;  // (d, d_s)
    nn::Parameter w_p;  // (d, d)
    nn::Parameter b;    // (d)
};

// beta ⊙ z_p + eps: the prior-shifted noise draw.
Tensor prior_guided_noise(const Tensor& zp, const Tensor& beta, const Tensor& eps);
ad::Var prior_guided_noise(ad::Tape& tape, ad::Var zp, ad::Var beta, ad::Var eps);

// Noise-prediction objective under prior-shifted noising: the latent is
// blended with (beta ⊙ z_p + eps) and the denoiser must predict that full
// shifted draw, so the plain inversion recovers z_0 at inference. Gradients
// reach both the denoiser and the gate parameters. With beta = 0 this equals
// the unguided objective bit for bit.
ad::Var portrait_diffusion_loss(ad::Tape& tape, diffusion::Denoiser& den, Saw& saw, const Tensor& zs,
                                const Tensor& z0, int t, const Tensor& eps, const FacePrior& zp,
                                const diffusion::NoiseSchedule& schedule);
Scalar portrait_diffusion_loss_value(diffusion::Denoiser& den, Saw& saw, const Tensor& zs,
                                     const Tensor& z0, int t, const Tensor& eps, const FacePrior& zp,
                                     const diffusion::NoiseSchedule& schedule);

// Same objective with a fixed gate vector instead of the learned module
// (static-baseline comparisons).
ad::Var portrait_diffusion_loss_static(ad::Tape& tape, diffusion::Denoiser& den, const Tensor& beta,
                                       const Tensor& zs, const Tensor& z0, int t, const Tensor& eps,
                                       const FacePrior& zp, const diffusion::NoiseSchedule& schedule);

struct ProbeResult {
    Scalar diversity = 0.0;    // mean pairwise L2 across seeds, same condition
    Scalar consistency = 0.0;  // mean L2 to the target latent
};

// Samples the model n_seeds times under one condition. init_shift, when
// nonempty, is added to the start noise (beta ⊙ z_p for guided models).
ProbeResult diversity_consistency_probe(diffusion::Denoiser& den, const diffusion::Condition& cond,
                                        const diffusion::NoiseSchedule& schedule, const Tensor& target,
                                        int n_seeds, uint64_t master_seed,
                                        const Tensor& init_shift = Tensor());

}  // namespace ptalk::prior
