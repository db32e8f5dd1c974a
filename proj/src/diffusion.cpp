#include "ptalk/diffusion.hpp"

#include "ptalk/errors.hpp"
#include "ptalk/rng.hpp"

namespace ptalk::diffusion {

LatentState::LatentState(Tensor t, int step, const NoiseSchedule& sched)
    : tensor(std::move(t)), timestep(step), schedule(&sched) {
    if (step < 0 || step > sched.num_steps())
        throw std::out_of_range("LatentState: timestep " + std::to_string(step) + " outside [0," +
                                std::to_string(sched.num_steps()) + "]");
}

Tensor Denoiser::predict_tensor(const Tensor& z, const Condition& cond, int t) {
    ad::Tape tape;
    ad::Var zv = tape.constant(z.rank() == 1 ? z.reshaped({1, static_cast<int>(z.size())}) : z);
    ad::Var out = predict(tape, zv, cond, t);
    Tensor r = out.val();
    if (z.rank() == 1) r = r.reshaped(z.shape);
    return r;
}

MlpDenoiser::MlpDenoiser(int latent_dim, int cond_dim, int hidden, uint64_t seed, int time_dim)
    : latent_dim_(latent_dim), cond_dim_(cond_dim), time_dim_(time_dim) {
    SeedStream rng(seed, "mlp_denoiser");
    in_ = nn::Linear("den.in", latent_dim + cond_dim + time_dim, hidden, rng);
    mid_ = nn::Linear("den.mid", hidden, hidden, rng);
    out_ = nn::Linear("den.out", hidden, latent_dim, rng);
    out_.w.value.fill(0.0);  // zero-output start: the fresh model predicts no noise
}

ad::Var MlpDenoiser::predict(ad::Tape& t, ad::Var z, const Condition& cond, int step) {
    const Tensor& zv = z.val();
    if (zv.rank() != 2 || zv.dim(1) != latent_dim_)
        throw std::invalid_argument("MlpDenoiser: latent must be (B," + std::to_string(latent_dim_) +
                                    "), got " + shape_str(zv.shape));
    if (cond.dim() != cond_dim_)
        throw std::invalid_argument("MlpDenoiser: condition dim " + std::to_string(cond.dim()) +
                                    " != declared " + std::to_string(cond_dim_));
    const int B = zv.dim(0);
    std::vector<ad::Var> parts{z};
    if (cond_dim_ > 0) {
        Tensor cb({B, cond_dim_});
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < cond_dim_; ++j) cb.at(b, j) = cond.embedding[j];
        parts.push_back(t.constant(std::move(cb)));
    }
    Tensor te = nn::timestep_embedding(step, time_dim_);
    Tensor tb({B, time_dim_});
    for (int b = 0; b < B; ++b)
        for (int j = 0; j < time_dim_; ++j) tb.at(b, j) = te[j];
    parts.push_back(t.constant(std::move(tb)));

    ad::Var h = t.tanh_(in_(t, t.concat_last(parts)));
    h = t.tanh_(mid_(t, h));
    return out_(t, h);
}

void MlpDenoiser::collect(std::vector<nn::Parameter*>& out) {
    in_.collect(out);
    mid_.collect(out);
    out_.collect(out);
}

Tensor forward_noise(const Tensor& z0, int t, const NoiseSchedule& schedule, const Tensor& eps) {
    require_same_shape(z0, eps, "forward_noise");
    const Scalar s = schedule.signal_coef(t);
    const Scalar n = schedule.noise_coef(t);
    Tensor out = z0;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = s * z0[i] + n * eps[i];
    return out;
}

ad::Var forward_noise(ad::Tape& tape, ad::Var z0, int t, const NoiseSchedule& schedule, ad::Var eps) {
    require_same_shape(z0.val(), eps.val(), "forward_noise");
    return tape.add(tape.smul(z0, schedule.signal_coef(t)), tape.smul(eps, schedule.noise_coef(t)));
}

ad::Var ldm_loss(ad::Tape& tape, Denoiser& den, const Condition& cond, const Tensor& z0, int t,
                 const Tensor& eps, const NoiseSchedule& schedule) {
    Tensor z0m = z0.rank() == 1 ? z0.reshaped({1, static_cast<int>(z0.size())}) : z0;
    Tensor epsm = eps.rank() == 1 ? eps.reshaped({1, static_cast<int>(eps.size())}) : eps;
    ad::Var zt = forward_noise(tape, tape.constant(z0m), t, schedule, tape.constant(epsm));
    ad::Var pred = den.predict(tape, zt, cond, t);
    if (!pred.val().all_finite()) throw NumericError("ldm_loss: non-finite denoiser output at t=" + std::to_string(t));
    return tape.mse(tape.constant(epsm), pred);
}

Scalar ldm_loss_value(Denoiser& den, const Condition& cond, const Tensor& z0, int t,
                      const Tensor& eps, const NoiseSchedule& schedule) {
    ad::Tape tape;
    return ldm_loss(tape, den, cond, z0, t, eps, schedule).val()[0];
}

Tensor denoised_estimate(const LatentState& zt, const Tensor& eps_pred) {
    if (zt.schedule == nullptr) throw std::invalid_argument("denoised_estimate: state has no schedule");
    require_same_shape(zt.tensor, eps_pred, "denoised_estimate");
    const Scalar s = zt.schedule->signal_coef(zt.timestep);
    if (s == 0.0)
        throw NumericError("denoised_estimate: signal coefficient is zero at t=" +
                           std::to_string(zt.timestep) + " (blend not invertible)");
    const Scalar n = zt.schedule->noise_coef(zt.timestep);
    Tensor out = zt.tensor;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = (zt.tensor[i] - n * eps_pred[i]) / s;
    return out;
}

Tensor sample(Denoiser& den, const Condition& cond, const Tensor& init, const NoiseSchedule& schedule,
              uint64_t seed) {
    const int T = schedule.num_steps();
    Tensor z;
    if (init.data.empty()) {
        SeedStream rng(seed, "diffusion/sample_init");
        z = rng.normal_tensor({den.latent_dim()});
    } else {
        z = init;
    }
    for (int t = T; t >= 1; --t) {
        Tensor eps_hat = den.predict_tensor(z, cond, t);
        if (!eps_hat.all_finite())
            throw NumericError("sample: non-finite prediction at timestep " + std::to_string(t));
        Tensor z0_hat = denoised_estimate(LatentState(z, t, schedule), eps_hat);
        const Scalar s = schedule.signal_coef(t - 1);
        const Scalar n = schedule.noise_coef(t - 1);
        for (int64_t i = 0; i < z.size(); ++i) z[i] = s * z0_hat[i] + n * eps_hat[i];
        if (!z.all_finite())
            throw NumericError("sample: non-finite latent after update at timestep " + std::to_string(t));
    }
    return z;
}

}  // namespace ptalk::diffusion
