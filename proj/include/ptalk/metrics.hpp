#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ptalk/features.hpp"
#include "ptalk/nn.hpp"
#include "ptalk/tensor.hpp"

namespace ptalk::metrics {

struct Distances {
    Scalar l1 = 0.0;
    Scalar l2 = 0.0;
    Scalar cosine = 0.0;  // (1 - cosine similarity) x 100
};

// L1, L2 and scaled cosine distance between two equally sized embeddings.
// The x100 cosine scale keeps toy numbers in the same magnitude range as
// published face-retrieval tables.
Distances feature_distances(const Tensor& a, const Tensor& b);

// Retrieval database of identity embeddings.
class EmbeddingGallery {
public:
    // Rejects duplicate ids and dimension mismatches.
    void add(const std::string& id, Tensor embedding);
    int size() const { return static_cast<int>(ids_.size()); }
    int dim() const { return ids_.empty() ? 0 : embeddings_.front().dim(0); }
    const std::vector<std::string>& ids() const { return ids_; }
    const Tensor& embedding(int i) const { return embeddings_.at(static_cast<size_t>(i)); }

private:
    std::vector<std::string> ids_;
    std::vector<Tensor> embeddings_;
};

// Hit flags per requested k: rank the gallery by ascending cosine distance
// (ties broken by id order) and test whether true_id lands in the top k.
std::vector<bool> recall_at_k(const Tensor& query, const EmbeddingGallery& gallery,
                              const std::string& true_id, const std::vector<int>& ks);

struct ImageQuality {
    Scalar ssim = 0.0;
    Scalar psnr = 0.0;  // dB, capped at 100
    Scalar perceptual = 0.0;
};

Scalar ssim(const Tensor& ref, const Tensor& gen);  // 11x11 Gaussian window, sigma 1.5
Scalar psnr(const Tensor& ref, const Tensor& gen);  // 10 log10(1/MSE), capped at 100 dB

ImageQuality image_quality(const Tensor& ref, const Tensor& gen, features::FeatureExtractor& fx);

// Frechet distance between Gaussian fits of two (samples, dim) feature
// matrices. shrinkage adds a ridge to both covariances; without it each side
// needs more samples than dimensions.
Scalar fid_like(const Tensor& real_feats, const Tensor& gen_feats, Scalar shrinkage = 0.0);

// Injected dense-flow estimator. flow(from, to) returns (2,H,W) backward
// flow: the prediction for `to` at pixel (y,x) samples `from` at
// (x + flow[0], y + flow[1]).
class FlowProvider {
public:
    virtual ~FlowProvider() = default;
    virtual Tensor flow(const Tensor& from, const Tensor& to) const = 0;
};

class ZeroFlow : public FlowProvider {
public:
    Tensor flow(const Tensor& from, const Tensor&) const override {
        return Tensor({2, from.dim(1), from.dim(2)}, 0.0);
    }
};

class ConstantFlow : public FlowProvider {
public:
    ConstantFlow(Scalar dx, Scalar dy) : dx_(dx), dy_(dy) {}
    Tensor flow(const Tensor& from, const Tensor&) const override;

private:
    Scalar dx_, dy_;
};

// Mean absolute difference between each flow-compensated frame and its
// successor, averaged over frame pairs. Pixels whose sample position falls
// outside the source frame are excluded.
Scalar temporal_mad(const std::vector<Tensor>& frames, const FlowProvider& provider);

struct SyncScores {
    Scalar lse_d = 0.0;  // mean aligned audio-visual embedding distance
    Scalar lse_c = 0.0;  // mean margin of other offsets over the aligned one
};

class AvSyncScorer {
public:
    virtual ~AvSyncScorer() = default;
    // frames.size() must equal speech_frames rows; speech_frames is (N, d).
    virtual SyncScores score(const std::vector<Tensor>& frames, const Tensor& speech_frames) const = 0;
};

// A sync scorer is an optional capability; reports mark its metrics
// unavailable when none is configured.
struct ScorerUnavailable : std::runtime_error {
    explicit ScorerUnavailable(const std::string& msg) : std::runtime_error(msg) {}
};

SyncScores sync_score(const std::vector<Tensor>& frames, const Tensor& speech_frames,
                      const AvSyncScorer* scorer);

// Synthetic audio-visual family with a shared smooth latent: frame brightness
// and the speech feature vector both follow it, so alignment is learnable.
struct AvSequence {
    std::vector<Tensor> frames;  // (channels, size, size) each
    Tensor speech;               // (n_frames, speech_dim)
};
AvSequence make_synthetic_av(int n_frames, int channels, int size, int speech_dim, uint64_t seed);

// Tiny contrastive audio-visual model trained on make_synthetic_av data at
// construction; stands in for a pretrained sync network.
class ToyAvSyncScorer : public AvSyncScorer {
public:
    ToyAvSyncScorer(int channels, int size, int speech_dim, uint64_t seed, int train_steps = 300);
    SyncScores score(const std::vector<Tensor>& frames, const Tensor& speech_frames) const override;

private:
    std::vector<Scalar> visual_embed(const Tensor& frame) const;
    std::vector<Scalar> audio_embed(const Tensor& speech, int row) const;

    int channels_, size_, speech_dim_;
    nn::Linear vis_, aud_;
};

// Named scalar results plus run metadata; serializes to versioned JSON.
struct MetricReport {
    std::string dataset;
    std::string model;
    std::string timestamp;
    std::map<std::string, Scalar> values;
    std::map<std::string, bool> capped;      // value hit a documented cap
    std::vector<std::string> unavailable;    // capability missing, not an error

    // Non-finite values are rejected unless flagged as capped.
    void set(const std::string& name, Scalar value, bool was_capped = false);
    void mark_unavailable(const std::string& name);
    std::string to_json() const;
    static MetricReport from_json(const std::string& text);
};

}  // namespace ptalk::metrics
