#include "ptalk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include <Eigen/Dense>

#include "json.hpp"
#include "ptalk/autodiff.hpp"
#include "ptalk/avdata.hpp"
#include "ptalk/conre.hpp"
#include "ptalk/errors.hpp"
#include "ptalk/rng.hpp"

namespace ptalk::metrics {

Distances feature_distances(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw std::invalid_argument("feature_distances: shape mismatch");
    Distances d;
    Scalar dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const Scalar diff = a.data[static_cast<size_t>(i)] - b.data[static_cast<size_t>(i)];
        d.l1 += std::abs(diff);
        d.l2 += diff * diff;
        dot += a.data[static_cast<size_t>(i)] * b.data[static_cast<size_t>(i)];
        na += a.data[static_cast<size_t>(i)] * a.data[static_cast<size_t>(i)];
        nb += b.data[static_cast<size_t>(i)] * b.data[static_cast<size_t>(i)];
    }
    d.l2 = std::sqrt(d.l2);
    if (na == 0.0 || nb == 0.0) throw NumericError("feature_distances: zero vector has no cosine distance");
    d.cosine = (1.0 - dot / (std::sqrt(na) * std::sqrt(nb))) * 100.0;
    return d;
}

void EmbeddingGallery::add(const std::string& id, Tensor embedding) {
    if (embedding.rank() != 1) throw std::invalid_argument("EmbeddingGallery: embeddings are 1-D");
    if (!ids_.empty() && embedding.dim(0) != dim())
        throw std::invalid_argument("EmbeddingGallery: dimension mismatch for id " + id);
    if (std::find(ids_.begin(), ids_.end(), id) != ids_.end())
        throw std::invalid_argument("EmbeddingGallery: duplicate id " + id);
    ids_.push_back(id);
    embeddings_.push_back(std::move(embedding));
}

std::vector<bool> recall_at_k(const Tensor& query, const EmbeddingGallery& gallery,
                              const std::string& true_id, const std::vector<int>& ks) {
    const auto& ids = gallery.ids();
    if (std::find(ids.begin(), ids.end(), true_id) == ids.end())
        throw std::invalid_argument("recall_at_k: id " + true_id + " not in gallery");
    std::vector<std::pair<Scalar, std::string>> ranked;
    ranked.reserve(ids.size());
    for (int i = 0; i < gallery.size(); ++i)
        ranked.emplace_back(feature_distances(query, gallery.embedding(i)).cosine, ids[static_cast<size_t>(i)]);
    std::sort(ranked.begin(), ranked.end());
    size_t rank = 0;
    while (ranked[rank].second != true_id) ++rank;
    std::vector<bool> hits;
    hits.reserve(ks.size());
    for (int k : ks) {
        if (k < 1) throw std::invalid_argument("recall_at_k: k must be positive");
        hits.push_back(rank < static_cast<size_t>(k));
    }
    return hits;
}

namespace {

void check_image_pair(const Tensor& ref, const Tensor& gen, const char* where) {
    if (ref.rank() != 3 || ref.shape != gen.shape)
        throw std::invalid_argument(std::string(where) + ": images must share shape (C,H,W)");
    for (const Tensor* t : {&ref, &gen})
        for (Scalar v : t->data)
            if (v < -1e-9 || v > 1.0 + 1e-9)
                throw std::invalid_argument(std::string(where) + ": pixel values must lie in [0,1]");
}

std::vector<Scalar> gaussian_window(int size, Scalar sigma) {
    std::vector<Scalar> w(static_cast<size_t>(size));
    const Scalar c = (size - 1) / 2.0;
    Scalar sum = 0.0;
    for (int i = 0; i < size; ++i) {
        w[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
        sum += w[static_cast<size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Separable valid-mode Gaussian filtering of one channel.
Tensor filter_channel(const Tensor& img, int ch, const std::vector<Scalar>& win) {
    const int h = img.dim(1), w = img.dim(2), k = static_cast<int>(win.size());
    Tensor tmp({h, w - k + 1}, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x + k <= w; ++x) {
            Scalar acc = 0.0;
            for (int i = 0; i < k; ++i) acc += win[static_cast<size_t>(i)] * img.at(ch, y, x + i);
            tmp.at(y, x) = acc;
        }
    Tensor out({h - k + 1, w - k + 1}, 0.0);
    for (int y = 0; y + k <= h; ++y)
        for (int x = 0; x < tmp.dim(1); ++x) {
            Scalar acc = 0.0;
            for (int i = 0; i < k; ++i) acc += win[static_cast<size_t>(i)] * tmp.at(y + i, x);
            out.at(y, x) = acc;
        }
    return out;
}

}  // namespace

Scalar ssim(const Tensor& ref, const Tensor& gen) {
    check_image_pair(ref, gen, "ssim");
    constexpr int kWin = 11;
    constexpr Scalar kSigma = 1.5;
    constexpr Scalar c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;  // dynamic range 1
    if (ref.dim(1) < kWin || ref.dim(2) < kWin)
        throw std::invalid_argument("ssim: images smaller than the 11x11 window");
    const auto win = gaussian_window(kWin, kSigma);
    Scalar total = 0.0;
    int64_t count = 0;
    for (int ch = 0; ch < ref.dim(0); ++ch) {
        Tensor sq_r = ref, sq_g = gen, cross = ref;
        for (int64_t i = 0; i < ref.size(); ++i) {
            sq_r.data[static_cast<size_t>(i)] *= ref.data[static_cast<size_t>(i)];
            sq_g.data[static_cast<size_t>(i)] *= gen.data[static_cast<size_t>(i)];
            cross.data[static_cast<size_t>(i)] *= gen.data[static_cast<size_t>(i)];
        }
        const Tensor mu_r = filter_channel(ref, ch, win);
        const Tensor mu_g = filter_channel(gen, ch, win);
        const Tensor m_rr = filter_channel(sq_r, ch, win);
        const Tensor m_gg = filter_channel(sq_g, ch, win);
        const Tensor m_rg = filter_channel(cross, ch, win);
        for (int64_t i = 0; i < mu_r.size(); ++i) {
            const Scalar mr = mu_r.data[static_cast<size_t>(i)], mg = mu_g.data[static_cast<size_t>(i)];
            const Scalar var_r = m_rr.data[static_cast<size_t>(i)] - mr * mr;
            const Scalar var_g = m_gg.data[static_cast<size_t>(i)] - mg * mg;
            const Scalar cov = m_rg.data[static_cast<size_t>(i)] - mr * mg;
            total += ((2.0 * mr * mg + c1) * (2.0 * cov + c2)) /
                     ((mr * mr + mg * mg + c1) * (var_r + var_g + c2));
            ++count;
        }
    }
    return total / static_cast<Scalar>(count);
}

Scalar psnr(const Tensor& ref, const Tensor& gen) {
    check_image_pair(ref, gen, "psnr");
    Scalar mse = 0.0;
    for (int64_t i = 0; i < ref.size(); ++i) {
        const Scalar d = ref.data[static_cast<size_t>(i)] - gen.data[static_cast<size_t>(i)];
        mse += d * d;
    }
    mse /= static_cast<Scalar>(ref.size());
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

ImageQuality image_quality(const Tensor& ref, const Tensor& gen, features::FeatureExtractor& fx) {
    ImageQuality q;
    q.ssim = ssim(ref, gen);
    q.psnr = psnr(ref, gen);
    const auto fr = fx.layers_tensor(ref);
    const auto fg = fx.layers_tensor(gen);
    for (size_t l = 0; l < fr.size(); ++l) {
        Scalar acc = 0.0;
        for (int64_t i = 0; i < fr[l].size(); ++i) {
            const Scalar d = fr[l].data[static_cast<size_t>(i)] - fg[l].data[static_cast<size_t>(i)];
            acc += d * d;
        }
        q.perceptual += acc / static_cast<Scalar>(fr[l].size());
    }
    return q;
}

namespace {

// Eigenvalues of a symmetric PSD matrix, clipping roundoff negatives.
Eigen::VectorXd psd_eigenvalues(const Eigen::MatrixXd& m, const char* where) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    if (es.info() != Eigen::Success) throw NumericError(std::string(where) + ": eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev[i] < -1e-8)
            throw NumericError(std::string(where) + ": matrix not positive semidefinite (eigenvalue " +
                               std::to_string(ev[i]) + ")");
        if (ev[i] < 0.0) ev[i] = 0.0;
    }
    return ev;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* where) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    if (es.info() != Eigen::Success) throw NumericError(std::string(where) + ": eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev[i] < -1e-8)
            throw NumericError(std::string(where) + ": matrix not positive semidefinite");
        ev[i] = std::sqrt(std::max(ev[i], 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

struct GaussianFit {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

GaussianFit fit_gaussian(const Tensor& feats, Scalar shrinkage) {
    const int n = feats.dim(0), d = feats.dim(1);
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) x(i, j) = feats.at(i, j);
    GaussianFit fit;
    fit.mean = x.colwise().mean();
    const Eigen::MatrixXd centered = x.rowwise() - fit.mean.transpose();
    fit.cov = centered.transpose() * centered / static_cast<Scalar>(n - 1);
    fit.cov += shrinkage * Eigen::MatrixXd::Identity(d, d);
    return fit;
}

}  // namespace

Scalar fid_like(const Tensor& real_feats, const Tensor& gen_feats, Scalar shrinkage) {
    if (real_feats.rank() != 2 || gen_feats.rank() != 2 || real_feats.dim(1) != gen_feats.dim(1))
        throw std::invalid_argument("fid_like: feature matrices (n,d) with matching d");
    if (real_feats.dim(0) < 2 || gen_feats.dim(0) < 2)
        throw std::invalid_argument("fid_like: need at least 2 samples per side");
    if (shrinkage < 0.0) throw std::invalid_argument("fid_like: negative shrinkage");
    const int d = real_feats.dim(1);
    if (shrinkage == 0.0 && (real_feats.dim(0) <= d || gen_feats.dim(0) <= d))
        throw NumericError("fid_like: covariance is degenerate with <= dim samples; supply shrinkage");

    const GaussianFit a = fit_gaussian(real_feats, shrinkage);
    const GaussianFit b = fit_gaussian(gen_feats, shrinkage);
    const Eigen::MatrixXd root_a = psd_sqrt(a.cov, "fid_like");
    const Eigen::VectorXd inner = psd_eigenvalues(root_a * b.cov * root_a, "fid_like");
    Scalar tr_sqrt = 0.0;
    for (Eigen::Index i = 0; i < inner.size(); ++i) tr_sqrt += std::sqrt(inner[i]);
    const Scalar fid =
        (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(fid, 0.0);
}

Tensor ConstantFlow::flow(const Tensor& from, const Tensor&) const {
    Tensor f({2, from.dim(1), from.dim(2)}, 0.0);
    for (int y = 0; y < from.dim(1); ++y)
        for (int x = 0; x < from.dim(2); ++x) {
            f.at(0, y, x) = dx_;
            f.at(1, y, x) = dy_;
        }
    return f;
}

Scalar temporal_mad(const std::vector<Tensor>& frames, const FlowProvider& provider) {
    if (frames.size() < 2) throw std::invalid_argument("temporal_mad: need at least 2 frames");
    Scalar pair_sum = 0.0;
    for (size_t t = 0; t + 1 < frames.size(); ++t) {
        const Tensor& prev = frames[t];
        const Tensor& next = frames[t + 1];
        if (prev.rank() != 3 || prev.shape != next.shape)
            throw std::invalid_argument("temporal_mad: frames must share shape (C,H,W)");
        const Tensor f = provider.flow(prev, next);
        if (f.rank() != 3 || f.dim(0) != 2 || f.dim(1) != prev.dim(1) || f.dim(2) != prev.dim(2))
            throw std::invalid_argument("temporal_mad: provider must return (2,H,W) flow");
        const int c = prev.dim(0), h = prev.dim(1), w = prev.dim(2);
        Scalar acc = 0.0;
        int64_t valid = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Scalar sx = x + f.at(0, y, x);
                const Scalar sy = y + f.at(1, y, x);
                if (sx < 0.0 || sy < 0.0 || sx > w - 1 || sy > h - 1) continue;
                const int x0 = std::min(static_cast<int>(sx), w - 2 >= 0 ? w - 2 : 0);
                const int y0 = std::min(static_cast<int>(sy), h - 2 >= 0 ? h - 2 : 0);
                const Scalar wx = sx - x0, wy = sy - y0;
                for (int i = 0; i < c; ++i) {
                    const Scalar v00 = prev.at(i, y0, x0);
                    const Scalar v01 = prev.at(i, y0, std::min(x0 + 1, w - 1));
                    const Scalar v10 = prev.at(i, std::min(y0 + 1, h - 1), x0);
                    const Scalar v11 = prev.at(i, std::min(y0 + 1, h - 1), std::min(x0 + 1, w - 1));
                    const Scalar warped = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                          wy * ((1 - wx) * v10 + wx * v11);
                    acc += std::abs(warped - next.at(i, y, x));
                    ++valid;
                }
            }
        if (valid == 0) throw NumericError("temporal_mad: flow leaves no valid pixels");
        pair_sum += acc / static_cast<Scalar>(valid);
    }
    return pair_sum / static_cast<Scalar>(frames.size() - 1);
}

SyncScores sync_score(const std::vector<Tensor>& frames, const Tensor& speech_frames,
                      const AvSyncScorer* scorer) {
    if (scorer == nullptr) throw ScorerUnavailable("no audiovisual sync scorer configured");
    return scorer->score(frames, speech_frames);
}

namespace {

// Shared structure of the synthetic family: a fixed low-frequency image
// pattern and a fixed speech direction that both carry the latent.
Scalar av_pattern(int c, int y, int x, int size) {
    const Scalar fx = std::cos(2.0 * std::numbers::pi_v<Scalar> * x / size + 0.9 * c);
    const Scalar fy = std::cos(2.0 * std::numbers::pi_v<Scalar> * y / size);
    return fx * fy;
}

Scalar av_direction(int j, int d) {
    return std::cos(2.0 * std::numbers::pi_v<Scalar> * j / d + 0.7);
}

}  // namespace

AvSequence make_synthetic_av(int n_frames, int channels, int size, int speech_dim, uint64_t seed) {
    if (n_frames < 1 || channels < 1 || size < 2 || speech_dim < 1)
        throw std::invalid_argument("make_synthetic_av: bad dimensions");
    SeedStream rng(seed, "avsync/sequence");
    AvSequence seq;
    seq.speech = Tensor({n_frames, speech_dim}, 0.0);
    Scalar raw = 0.0;
    for (int t = 0; t < n_frames; ++t) {
        raw += rng.normal(0.0, 0.35);
        const Scalar s = std::tanh(raw);
        Tensor frame({channels, size, size});
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    frame.at(c, y, x) = std::clamp(
                        0.5 + 0.45 * s * av_pattern(c, y, x, size) + rng.normal(0.0, 0.01), 0.0, 1.0);
        seq.frames.push_back(std::move(frame));
        for (int j = 0; j < speech_dim; ++j)
            seq.speech.at(t, j) = std::clamp(
                0.5 + 0.45 * s * av_direction(j, speech_dim) + rng.normal(0.0, 0.01), 0.0, 1.0);
    }
    return seq;
}

namespace {

constexpr int kSyncEmbed = 8;
constexpr int kSyncPool = 8;  // frames are pooled to kSyncPool^2 per channel

std::vector<Scalar> pooled_descriptor(const Tensor& frame, int channels) {
    const Tensor small = avdata::resize_area(frame, kSyncPool, kSyncPool);
    std::vector<Scalar> desc(static_cast<size_t>(channels) * kSyncPool * kSyncPool);
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < kSyncPool; ++y)
            for (int x = 0; x < kSyncPool; ++x)
                desc[static_cast<size_t>((c * kSyncPool + y) * kSyncPool + x)] = small.at(c, y, x);
    return desc;
}

std::vector<Scalar> apply_linear(const nn::Linear& lin, const std::vector<Scalar>& x) {
    const int in = lin.w.value.dim(0), out = lin.w.value.dim(1);
    if (static_cast<int>(x.size()) != in) throw std::invalid_argument("sync scorer: descriptor size mismatch");
    std::vector<Scalar> y(static_cast<size_t>(out));
    for (int o = 0; o < out; ++o) {
        Scalar acc = lin.b.value.data[static_cast<size_t>(o)];
        for (int i = 0; i < in; ++i) acc += x[static_cast<size_t>(i)] * lin.w.value.at(i, o);
        y[static_cast<size_t>(o)] = acc;
    }
    Scalar norm = 0.0;
    for (Scalar v : y) norm += v * v;
    norm = std::sqrt(std::max(norm, 1e-12));
    for (Scalar& v : y) v /= norm;
    return y;
}

Scalar embed_distance(const std::vector<Scalar>& a, const std::vector<Scalar>& b) {
    Scalar acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc);
}

}  // namespace

ToyAvSyncScorer::ToyAvSyncScorer(int channels, int size, int speech_dim, uint64_t seed, int train_steps)
    : channels_(channels), size_(size), speech_dim_(speech_dim) {
    SeedStream init(seed, "avsync/init");
    vis_ = nn::Linear("sync.vis", channels * kSyncPool * kSyncPool, kSyncEmbed, init);
    aud_ = nn::Linear("sync.aud", speech_dim, kSyncEmbed, init);

    const AvSequence train = make_synthetic_av(240, channels, size, speech_dim, splitmix64(seed ^ 0xa5a5ULL));
    std::vector<std::vector<Scalar>> vis_desc;
    vis_desc.reserve(train.frames.size());
    for (const Tensor& f : train.frames) vis_desc.push_back(pooled_descriptor(f, channels));

    conre::Temperature temp(0.07);
    std::vector<nn::Parameter*> params;
    vis_.collect(params);
    aud_.collect(params);
    temp.collect(params);
    nn::Adam opt(params, 0.02);
    SeedStream batcher(seed, "avsync/batches");
    constexpr int kBatch = 16;
    for (int step = 0; step < train_steps; ++step) {
        ad::Tape tape;
        std::vector<ad::Var> v_rows, a_rows;
        for (int b = 0; b < kBatch; ++b) {
            const int t = batcher.uniform_int(0, static_cast<int>(train.frames.size()) - 1);
            Tensor vd({1, static_cast<int>(vis_desc[static_cast<size_t>(t)].size())});
            vd.data = vis_desc[static_cast<size_t>(t)];
            Tensor adt({1, speech_dim});
            for (int j = 0; j < speech_dim; ++j) adt.at(0, j) = train.speech.at(t, j);
            v_rows.push_back(vis_(tape, tape.constant(std::move(vd))));
            a_rows.push_back(aud_(tape, tape.constant(std::move(adt))));
        }
        ad::Var loss = conre::contrastive_loss(tape, tape.stack_rows(a_rows), tape.stack_rows(v_rows), temp);
        opt.zero_grad();
        tape.backward(loss);
        opt.step();
    }
}

std::vector<Scalar> ToyAvSyncScorer::visual_embed(const Tensor& frame) const {
    return apply_linear(vis_, pooled_descriptor(frame, channels_));
}

std::vector<Scalar> ToyAvSyncScorer::audio_embed(const Tensor& speech, int row) const {
    std::vector<Scalar> x(static_cast<size_t>(speech_dim_));
    for (int j = 0; j < speech_dim_; ++j) x[static_cast<size_t>(j)] = speech.at(row, j);
    return apply_linear(aud_, x);
}

SyncScores ToyAvSyncScorer::score(const std::vector<Tensor>& frames, const Tensor& speech_frames) const {
    if (frames.empty()) throw std::invalid_argument("sync scorer: no frames");
    if (speech_frames.rank() != 2 || speech_frames.dim(0) != static_cast<int>(frames.size()))
        throw std::invalid_argument("sync scorer: speech rows must match frame count");
    if (speech_frames.dim(1) != speech_dim_)
        throw std::invalid_argument("sync scorer: speech dimension mismatch");
    const int n = static_cast<int>(frames.size());
    std::vector<std::vector<Scalar>> v(static_cast<size_t>(n)), a(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (frames[static_cast<size_t>(i)].dim(0) != channels_)
            throw std::invalid_argument("sync scorer: channel mismatch");
        v[static_cast<size_t>(i)] = visual_embed(frames[static_cast<size_t>(i)]);
        a[static_cast<size_t>(i)] = audio_embed(speech_frames, i);
    }
    SyncScores s;
    for (int i = 0; i < n; ++i) s.lse_d += embed_distance(v[static_cast<size_t>(i)], a[static_cast<size_t>(i)]);
    s.lse_d /= n;
    Scalar off_total = 0.0;
    int off_count = 0;
    for (int off = -5; off <= 5; ++off) {
        if (off == 0) continue;
        Scalar acc = 0.0;
        int cnt = 0;
        for (int i = 0; i < n; ++i) {
            const int j = i + off;
            if (j < 0 || j >= n) continue;
            acc += embed_distance(v[static_cast<size_t>(i)], a[static_cast<size_t>(j)]);
            ++cnt;
        }
        if (cnt > 0) {
            off_total += acc / cnt;
            ++off_count;
        }
    }
    s.lse_c = off_count > 0 ? off_total / off_count - s.lse_d : 0.0;
    return s;
}

void MetricReport::set(const std::string& name, Scalar value, bool was_capped) {
    if (!std::isfinite(value)) throw NumericError("MetricReport: non-finite value for " + name);
    values[name] = value;
    if (was_capped) capped[name] = true;
}

void MetricReport::mark_unavailable(const std::string& name) {
    if (std::find(unavailable.begin(), unavailable.end(), name) == unavailable.end())
        unavailable.push_back(name);
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["dataset"] = dataset;
    j["model"] = model;
    j["timestamp"] = timestamp;
    j["values"] = values;
    j["capped"] = capped;
    j["unavailable"] = unavailable;
    return j.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    if (!j.contains("schema_version") || j["schema_version"].get<int>() != 1)
        throw DataError("MetricReport: unsupported schema version");
    MetricReport r;
    r.dataset = j.value("dataset", "");
    r.model = j.value("model", "");
    r.timestamp = j.value("timestamp", "");
    if (j.contains("values")) r.values = j["values"].get<std::map<std::string, Scalar>>();
    if (j.contains("capped")) r.capped = j["capped"].get<std::map<std::string, bool>>();
    if (j.contains("unavailable")) r.unavailable = j["unavailable"].get<std::vector<std::string>>();
    for (const auto& [k, v] : r.values)
        if (!std::isfinite(v)) throw DataError("MetricReport: non-finite value for " + k);
    return r;
}

}  // namespace ptalk::metrics
