#include "ptalk/prior.hpp"

#include <algorithm>
#include <cmath>

#include "ptalk/errors.hpp"
#include "ptalk/rng.hpp"

namespace ptalk::prior {

void PriorAccumulator::add(const Tensor& embedding) {
    if (n_ == 0) {
        sum_ = Tensor(embedding.shape, 0.0);
        comp_ = Tensor(embedding.shape, 0.0);
    } else {
        require_same_shape(sum_, embedding, "PriorAccumulator::add");
    }
    for (int64_t i = 0; i < embedding.size(); ++i) {
        const Scalar y = embedding[i] - comp_[i];
        const Scalar t = sum_[i] + y;
        comp_[i] = (t - sum_[i]) - y;
        sum_[i] = t;
    }
    ++n_;
}

Tensor PriorAccumulator::mean() const {
    if (n_ == 0) throw std::invalid_argument("PriorAccumulator: no embeddings added");
    Tensor m = sum_;
    for (auto& v : m.data) v /= static_cast<Scalar>(n_);
    return m;
}

FacePrior PriorAccumulator::finish(Scalar gender_ratio) const {
    return FacePrior{mean(), n_, gender_ratio};
}

FacePrior compute_prior(const std::vector<Tensor>& embeddings, Scalar gender_ratio) {
    PriorAccumulator acc;
    for (const Tensor& e : embeddings) acc.add(e);
    return acc.finish(gender_ratio);
}

FacePrior merge_priors(const FacePrior& a, const FacePrior& b) {
    require_same_shape(a.vector, b.vector, "merge_priors");
    const Scalar na = static_cast<Scalar>(a.sample_count);
    const Scalar nb = static_cast<Scalar>(b.sample_count);
    FacePrior out;
    out.vector = a.vector;
    for (int64_t i = 0; i < out.vector.size(); ++i)
        out.vector[i] = (na * a.vector[i] + nb * b.vector[i]) / (na + nb);
    out.sample_count = a.sample_count + b.sample_count;
    out.gender_ratio = (na * a.gender_ratio + nb * b.gender_ratio) / (na + nb);
    return out;
}

Scalar l1_mean_distance(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "l1_mean_distance");
    Scalar s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<Scalar>(a.size());
}

std::vector<std::pair<int, Scalar>> prior_convergence_curve(const std::vector<Tensor>& embeddings,
                                                            const std::vector<int>& checkpoints) {
    if (checkpoints.size() < 2) throw std::invalid_argument("prior_convergence_curve: need >= 2 checkpoints");
    for (size_t i = 0; i < checkpoints.size(); ++i) {
        if (checkpoints[i] < 1) throw std::invalid_argument("prior_convergence_curve: checkpoint < 1");
        if (i > 0 && checkpoints[i] <= checkpoints[i - 1])
            throw std::invalid_argument("prior_convergence_curve: checkpoints must be increasing");
    }
    if (static_cast<size_t>(checkpoints.back()) > embeddings.size())
        throw std::invalid_argument("prior_convergence_curve: checkpoint " +
                                    std::to_string(checkpoints.back()) + " exceeds pool of " +
                                    std::to_string(embeddings.size()));

    PriorAccumulator acc;
    std::vector<std::pair<int, Scalar>> out;
    Tensor prev;
    size_t next = 0;
    for (size_t i = 0; i < embeddings.size() && next < checkpoints.size(); ++i) {
        acc.add(embeddings[i]);
        if (acc.count() == checkpoints[next]) {
            Tensor cur = acc.mean();
            if (next > 0) out.emplace_back(checkpoints[next], l1_mean_distance(prev, cur));
            prev = std::move(cur);
            ++next;
        }
    }
    return out;
}

std::vector<std::pair<Scalar, Scalar>> gender_ratio_study(const std::vector<LabeledEmbedding>& pool,
                                                          const std::vector<Scalar>& ratios,
                                                          int n_per_ratio, uint64_t seed) {
    if (n_per_ratio < 1) throw std::invalid_argument("gender_ratio_study: n_per_ratio < 1");
    std::vector<const Tensor*> female, male;
    for (const auto& le : pool) (le.female ? female : male).push_back(&le.embedding);

    auto draw = [&](Scalar ratio, SeedStream& rng) {
        const int nf = static_cast<int>(std::lround(ratio * n_per_ratio));
        const int nm = n_per_ratio - nf;
        if (nf > static_cast<int>(female.size()) || nm > static_cast<int>(male.size()))
            throw std::invalid_argument("gender_ratio_study: pool too small for ratio " +
                                        std::to_string(ratio));
        auto pick = [&](const std::vector<const Tensor*>& side, int n, PriorAccumulator& acc) {
            std::vector<int> idx(side.size());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
            std::shuffle(idx.begin(), idx.end(), rng.gen());
            for (int i = 0; i < n; ++i) acc.add(*side[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
        };
        PriorAccumulator acc;
        pick(female, nf, acc);
        pick(male, nm, acc);
        return acc.mean();
    };

    SeedStream balanced_rng(seed, "prior/gender_balanced");
    const Tensor balanced = draw(0.5, balanced_rng);

    std::vector<std::pair<Scalar, Scalar>> out;
    for (Scalar r : ratios) {
        if (r < 0.0 || r > 1.0) throw std::invalid_argument("gender_ratio_study: ratio outside [0,1]");
        SeedStream rng(seed, "prior/gender_ratio_" + std::to_string(r));
        out.emplace_back(r, l1_mean_distance(draw(r, rng), balanced));
    }
    return out;
}

Saw::Saw(int d, int d_s, uint64_t seed, Scalar weight_scale, Scalar bias_init) {
    SeedStream rng(seed, "prior/saw");
    w_s = nn::Parameter("saw.w_s", rng.normal_tensor({d, d_s}, weight_scale));
    w_p = nn::Parameter("saw.w_p", rng.normal_tensor({d, d}, weight_scale));
    b = nn::Parameter("saw.b", Tensor({d}, bias_init));
}

Tensor Saw::weights(const Tensor& zs, const Tensor& zp) const {
    const int d = b.value.dim(0);
    const int ds = w_s.value.dim(1);
    if (zs.size() != ds || zp.size() != d)
        throw std::invalid_argument("Saw::weights: expected zs dim " + std::to_string(ds) + ", zp dim " +
                                    std::to_string(d));
    Tensor beta({d});
    for (int i = 0; i < d; ++i) {
        Scalar acc = b.value[i];
        for (int j = 0; j < ds; ++j) acc += w_s.value.at(i, j) * zs[j];
        for (int j = 0; j < d; ++j) acc += w_p.value.at(i, j) * zp[j];
        beta[i] = acc;
    }
    return beta;
}

ad::Var Saw::weights(ad::Tape& t, const Tensor& zs, const Tensor& zp) {
    const int d = b.value.dim(0);
    const int ds = w_s.value.dim(1);
    if (zs.size() != ds || zp.size() != d)
        throw std::invalid_argument("Saw::weights: expected zs dim " + std::to_string(ds) + ", zp dim " +
                                    std::to_string(d));
    ad::Var zs_col = t.constant(zs.reshaped({ds, 1}));
    ad::Var zp_col = t.constant(zp.reshaped({d, 1}));
    ad::Var lin = t.add(t.matmul(w_s.use(t), zs_col), t.matmul(w_p.use(t), zp_col));
    return t.add(t.reshape(lin, {d}), b.use(t));
}

void Saw::collect(std::vector<nn::Parameter*>& out) {
    out.push_back(&w_s);
    out.push_back(&w_p);
    out.push_back(&b);
}

Tensor prior_guided_noise(const Tensor& zp, const Tensor& beta, const Tensor& eps) {
    require_same_shape(zp, beta, "prior_guided_noise");
    require_same_shape(zp, eps, "prior_guided_noise");
    Tensor out = eps;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = beta[i] * zp[i] + eps[i];
    return out;
}

ad::Var prior_guided_noise(ad::Tape& tape, ad::Var zp, ad::Var beta, ad::Var eps) {
    return tape.add(tape.mul(beta, zp), eps);
}

namespace {

ad::Var guided_loss(ad::Tape& tape, diffusion::Denoiser& den, ad::Var beta, const Tensor& zs,
                    const Tensor& z0, int t, const Tensor& eps, const FacePrior& zp,
                    const diffusion::NoiseSchedule& schedule) {
    if (zp.dim() != static_cast<int>(z0.size()))
        throw std::invalid_argument("portrait_diffusion_loss: prior dim " + std::to_string(zp.dim()) +
                                    " != latent dim " + std::to_string(z0.size()));
    require_same_shape(z0, eps, "portrait_diffusion_loss");
    const int d = zp.dim();
    ad::Var shifted = prior_guided_noise(tape, tape.constant(zp.vector), beta, tape.constant(eps));
    ad::Var zt = diffusion::forward_noise(tape, tape.constant(z0), t, schedule, shifted);
    diffusion::Condition cond = diffusion::Condition::speech(zs);
    ad::Var pred = den.predict(tape, tape.reshape(zt, {1, d}), cond, t);
    if (!pred.val().all_finite())
        throw NumericError("portrait_diffusion_loss: non-finite denoiser output at t=" + std::to_string(t));
    return tape.mse(tape.reshape(shifted, {1, d}), pred);
}

}  // namespace

ad::Var portrait_diffusion_loss(ad::Tape& tape, diffusion::Denoiser& den, Saw& saw, const Tensor& zs,
                                const Tensor& z0, int t, const Tensor& eps, const FacePrior& zp,
                                const diffusion::NoiseSchedule& schedule) {
    return guided_loss(tape, den, saw.weights(tape, zs, zp.vector), zs, z0, t, eps, zp, schedule);
}

Scalar portrait_diffusion_loss_value(diffusion::Denoiser& den, Saw& saw, const Tensor& zs,
                                     const Tensor& z0, int t, const Tensor& eps, const FacePrior& zp,
                                     const diffusion::NoiseSchedule& schedule) {
    ad::Tape tape;
    return portrait_diffusion_loss(tape, den, saw, zs, z0, t, eps, zp, schedule).val()[0];
}

ad::Var portrait_diffusion_loss_static(ad::Tape& tape, diffusion::Denoiser& den, const Tensor& beta,
                                       const Tensor& zs, const Tensor& z0, int t, const Tensor& eps,
                                       const FacePrior& zp, const diffusion::NoiseSchedule& schedule) {
    return guided_loss(tape, den, tape.constant(beta), zs, z0, t, eps, zp, schedule);
}

ProbeResult diversity_consistency_probe(diffusion::Denoiser& den, const diffusion::Condition& cond,
                                        const diffusion::NoiseSchedule& schedule, const Tensor& target,
                                        int n_seeds, uint64_t master_seed, const Tensor& init_shift) {
    if (n_seeds < 2) throw std::invalid_argument("diversity_consistency_probe: n_seeds < 2");
    const int d = den.latent_dim();
    if (!init_shift.data.empty() && init_shift.size() != d)
        throw std::invalid_argument("diversity_consistency_probe: init_shift dim mismatch");
    if (target.size() != d) throw std::invalid_argument("diversity_consistency_probe: target dim mismatch");

    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(n_seeds));
    for (int s = 0; s < n_seeds; ++s) {
        SeedStream rng(master_seed, "prior/probe_seed_" + std::to_string(s));
        Tensor init = rng.normal_tensor({d});
        if (!init_shift.data.empty())
            for (int i = 0; i < d; ++i) init[i] += init_shift[i];
        outs.push_back(diffusion::sample(den, cond, init, schedule, master_seed));
    }

    auto l2 = [](const Tensor& a, const Tensor& b) {
        Scalar s = 0.0;
        for (int64_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(s);
    };

    ProbeResult r;
    int pairs = 0;
    for (int i = 0; i < n_seeds; ++i) {
        for (int j = i + 1; j < n_seeds; ++j) {
            r.diversity += l2(outs[static_cast<size_t>(i)], outs[static_cast<size_t>(j)]);
            ++pairs;
        }
        r.consistency += l2(outs[static_cast<size_t>(i)], target);
    }
    r.diversity /= pairs;
    r.consistency /= n_seeds;
    return r;
}

}  // namespace ptalk::prior
