#pragma once

#include <cstdint>
#include <vector>

#include "ptalk/features.hpp"
#include "ptalk/nn.hpp"
#include "ptalk/tensor.hpp"

namespace ptalk::conre {

// Row i on every side belongs to the same identity.
struct PairBatch {
    Tensor speech_embeds;        // (B, d)
    Tensor face_embeds;          // (B, d)
    std::vector<Tensor> images;  // B face images (C,H,W) in [0,1]
};

class Temperature : public nn::Module {
public:
    explicit Temperature(Scalar tau_init = 0.07);
    Scalar tau() const { return std::exp(log_tau.value[0]); }
    ad::Var inv_tau(ad::Tape& tape) { return tape.exp_(tape.neg(log_tau.use(tape))); }
    void collect(std::vector<nn::Parameter*>& out) override { out.push_back(&log_tau); }

    nn::Parameter log_tau;
};

// Symmetric cross-entropy over the cosine-similarity matrix of the two
// L2-normalized embedding batches, scaled by 1/tau; mean of the two softmax
// directions. B=1 is only allowed when allow_single is set (loss 0).
ad::Var contrastive_loss(ad::Tape& tape, ad::Var speech_embeds, ad::Var face_embeds, Temperature& temp,
                         bool allow_single = false);
Scalar contrastive_loss_value(const Tensor& speech_embeds, const Tensor& face_embeds, Temperature& temp,
                              bool allow_single = false);

// Mean absolute pixel error plus perceptual feature distance.
ad::Var reconstruction_loss(ad::Tape& tape, ad::Var original, ad::Var reconstructed,
                            features::FeatureExtractor& fx);

// Small speech tower: strided conv stack over the (channels, frames, bins)
// spectrogram with a squeeze-excite channel-attention block, pooled to an
// embedding. Parameter count is independent of the spectrogram extent.
class SpeechEncoder : public nn::Module {
public:
    SpeechEncoder() = default;
    SpeechEncoder(int in_channels, int width, int embed_dim, uint64_t seed);
    ad::Var encode(ad::Tape& tape, const Tensor& spectrogram);
    int embed_dim() const { return proj_.b.value.dim(0); }
    void collect(std::vector<nn::Parameter*>& out) override;

private:
    nn::Conv2d c1_, c2_;
    nn::Linear attn_, proj_;
};

class FaceEncoder : public nn::Module {
public:
    FaceEncoder() = default;
    FaceEncoder(int channels, int width, int embed_dim, uint64_t seed);
    ad::Var encode(ad::Tape& tape, const Tensor& image);
    int embed_dim() const { return proj_.b.value.dim(0); }
    void collect(std::vector<nn::Parameter*>& out) override;

private:
    nn::Conv2d c1_, c2_;
    nn::Linear proj_;
};

// Mirror of the face encoder: embedding -> (channels, size, size) image in
// (0,1). size must be a multiple of 4 (two upsampling rounds from size/4).
class FaceDecoder : public nn::Module {
public:
    FaceDecoder() = default;
    FaceDecoder(int embed_dim, int channels, int size, int width, uint64_t seed);
    ad::Var decode(ad::Tape& tape, ad::Var embedding);  // embedding (d,) or (1,d)
    Tensor decode_tensor(const Tensor& embedding);
    int image_size() const { return size_; }
    int channels() const { return channels_; }
    void collect(std::vector<nn::Parameter*>& out) override;

private:
    int size_ = 0, channels_ = 0, width_ = 0;
    nn::Linear expand_;
    nn::Conv2d c1_, c2_;
};

struct ConreParts {
    ad::Var total, contrastive, reconstruction;
};

// Joint objective: contrastive alignment plus decoder reconstruction of the
// batch images from the face embeddings, as an unweighted sum.
ConreParts conre_loss(ad::Tape& tape, const PairBatch& batch, Temperature& temp, FaceDecoder& decoder,
                      features::FeatureExtractor& fx, bool allow_single = false);

// Full pretraining stack: both encoders, the decoder and the temperature.
class ConreModel : public nn::Module {
public:
    ConreModel() = default;
    ConreModel(int spec_channels, int image_channels, int image_size, int width, int embed_dim,
               uint64_t seed);
    void collect(std::vector<nn::Parameter*>& out) override;

    SpeechEncoder speech;
    FaceEncoder face;
    FaceDecoder decoder;
    Temperature temp{0.07};
};

ConreParts conre_training_loss(ad::Tape& tape, ConreModel& model,
                               const std::vector<Tensor>& spectrograms,
                               const std::vector<Tensor>& images, features::FeatureExtractor& fx);

// Adam loop over the full stack; returns the per-step total loss.
std::vector<Scalar> pretrain_conre(ConreModel& model, const std::vector<Tensor>& spectrograms,
                                   const std::vector<Tensor>& images, features::FeatureExtractor& fx,
                                   int steps, Scalar lr);

}  // namespace ptalk::conre
