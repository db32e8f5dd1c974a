#include "ptalk/motion_diffusion.hpp"

#include <cmath>

#include "ptalk/errors.hpp"
#include "ptalk/rng.hpp"

namespace ptalk::motion_diffusion {

TemporalConvDenoiser::TemporalConvDenoiser(int motion_dim, int speech_dim, int hidden, uint64_t seed,
                                           int time_dim)
    : motion_dim_(motion_dim), speech_dim_(speech_dim), time_dim_(time_dim), hidden_(hidden) {
    SeedStream rng(seed, "motion_diffusion/denoiser");
    const int in = motion_dim + speech_dim + time_dim;
    c1_ = nn::Conv2d("mdd.c1", in, hidden, 3, 1, 1, rng);
    c2_ = nn::Conv2d("mdd.c2", hidden, hidden, 3, 1, 1, rng);
    out_ = nn::Conv2d("mdd.out", hidden, motion_dim, 3, 1, 1, rng);
    out_.zero_init();
}

ad::Var TemporalConvDenoiser::predict(ad::Tape& t, ad::Var noisy, const Tensor& speech, int step) {
    const Tensor& nv = noisy.val();
    if (nv.rank() != 2 || nv.dim(1) != motion_dim_)
        throw std::invalid_argument("TemporalConvDenoiser: sequence must be (N," +
                                    std::to_string(motion_dim_) + "), got " + shape_str(nv.shape));
    const int n = nv.dim(0);
    if (speech.rank() != 2 || speech.dim(0) != n || speech.dim(1) != speech_dim_)
        throw std::invalid_argument("TemporalConvDenoiser: speech features must be (" +
                                    std::to_string(n) + "," + std::to_string(speech_dim_) + "), got " +
                                    shape_str(speech.shape));
    Tensor te = nn::timestep_embedding(step, time_dim_);
    Tensor tb({n, time_dim_});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < time_dim_; ++j) tb.at(i, j) = te[j];

    ad::Var joined = t.concat_last({noisy, t.constant(speech), t.constant(std::move(tb))});
    const int in = motion_dim_ + speech_dim_ + time_dim_;
    // to (channels, 1, N) so the 3-wide conv mixes neighboring frames
    ad::Var seq = t.reshape(t.transpose2d(joined), {in, 1, n});
    ad::Var h = t.tanh_(c1_(t, seq));
    h = t.tanh_(c2_(t, h));
    ad::Var pred = out_(t, h);
    return t.transpose2d(t.reshape(pred, {motion_dim_, n}));
}

Tensor TemporalConvDenoiser::predict_tensor(const Tensor& noisy, const Tensor& speech, int t) {
    ad::Tape tape;
    return predict(tape, tape.constant(noisy), speech, t).val();
}

void TemporalConvDenoiser::collect(std::vector<nn::Parameter*>& out) {
    c1_.collect(out);
    c2_.collect(out);
    out_.collect(out);
}

ad::Var motion_diffusion_loss(ad::Tape& tape, TemporalConvDenoiser& den, const Tensor& speech,
                              const Tensor& m0, int t, const Tensor& eps,
                              const diffusion::NoiseSchedule& schedule) {
    require_same_shape(m0, eps, "motion_diffusion_loss");
    if (m0.rank() != 2 || speech.rank() != 2 || speech.dim(0) != m0.dim(0))
        throw std::invalid_argument("motion_diffusion_loss: sequence/feature length mismatch (" +
                                    shape_str(m0.shape) + " vs " + shape_str(speech.shape) + ")");
    ad::Var mt = diffusion::forward_noise(tape, tape.constant(m0), t, schedule, tape.constant(eps));
    ad::Var pred = den.predict(tape, mt, speech, t);
    if (!pred.val().all_finite())
        throw NumericError("motion_diffusion_loss: non-finite prediction at t=" + std::to_string(t));
    return tape.mse(tape.constant(eps), pred);
}

Scalar motion_diffusion_loss_value(TemporalConvDenoiser& den, const Tensor& speech, const Tensor& m0,
                                   int t, const Tensor& eps, const diffusion::NoiseSchedule& schedule) {
    ad::Tape tape;
    return motion_diffusion_loss(tape, den, speech, m0, t, eps, schedule).val()[0];
}

MotionSequence sample_motion(TemporalConvDenoiser& den, const Tensor& speech, int n_frames,
                             const diffusion::NoiseSchedule& schedule, uint64_t seed) {
    if (n_frames < 1) throw std::invalid_argument("sample_motion: n_frames < 1");
    if (speech.rank() != 2 || speech.dim(0) != n_frames)
        throw std::invalid_argument("sample_motion: speech features must be (" +
                                    std::to_string(n_frames) + ",d_s)");
    SeedStream rng(seed, "motion_diffusion/sample_init");
    Tensor m = rng.normal_tensor({n_frames, den.motion_dim()});
    const int T = schedule.num_steps();
    for (int t = T; t >= 1; --t) {
        Tensor eps_hat = den.predict_tensor(m, speech, t);
        const Scalar s = schedule.signal_coef(t), n = schedule.noise_coef(t);
        const Scalar sp = schedule.signal_coef(t - 1), np = schedule.noise_coef(t - 1);
        for (int64_t i = 0; i < m.size(); ++i) {
            const Scalar m0_hat = (m[i] - n * eps_hat[i]) / s;
            m[i] = sp * m0_hat + np * eps_hat[i];
        }
        if (!m.all_finite())
            throw NumericError("sample_motion: non-finite sequence at timestep " + std::to_string(t));
    }
    return MotionSequence{std::move(m), 25};
}

std::vector<Scalar> train_motion_diffusion(TemporalConvDenoiser& den,
                                           const std::vector<std::pair<Tensor, Tensor>>& data,
                                           const diffusion::NoiseSchedule& schedule, int steps,
                                           Scalar lr, uint64_t seed) {
    if (data.empty()) throw std::invalid_argument("train_motion_diffusion: no sequences");
    nn::Adam opt(den.parameters(), lr);
    SeedStream rng(seed, "motion_diffusion/train");
    std::vector<Scalar> history;
    history.reserve(static_cast<size_t>(steps));
    for (int s = 0; s < steps; ++s) {
        const auto& [speech, m0] = data[static_cast<size_t>(s) % data.size()];
        const int t_step = rng.uniform_int(1, schedule.num_steps());
        Tensor eps = rng.normal_tensor(m0.shape);
        ad::Tape tape;
        ad::Var loss = motion_diffusion_loss(tape, den, speech, m0, t_step, eps, schedule);
        den.zero_grad();
        tape.backward(loss);
        opt.step();
        history.push_back(loss.val()[0]);
    }
    return history;
}

Scalar mean_frame_delta(const Tensor& frames) {
    if (frames.rank() != 2 || frames.dim(0) < 2)
        throw std::invalid_argument("mean_frame_delta: need (N>=2, d) sequence");
    const int n = frames.dim(0), d = frames.dim(1);
    Scalar acc = 0.0;
    for (int i = 0; i + 1 < n; ++i)
        for (int j = 0; j < d; ++j) acc += std::abs(frames.at(i + 1, j) - frames.at(i, j));
    return acc / (static_cast<Scalar>(n - 1) * d);
}

}  // namespace ptalk::motion_diffusion
