#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ptalk/features.hpp"
#include "ptalk/nn.hpp"
#include "ptalk/tensor.hpp"

namespace ptalk::motion {

// Latent flow plus how much of the warped content survives at each pixel.
struct WarpField {
    Tensor flow;       // (2,H,W) displacement in latent pixels
    Tensor occlusion;  // (1,H,W) in [0,1]
};

struct WarpFieldVar {
    ad::Var flow;
    ad::Var occlusion;
};

// o ⊙ bilinear(source displaced by flow); border-replicated sampling.
Tensor warp_latent(const Tensor& source_latent, const WarpField& field);
ad::Var warp_latent(ad::Tape& tape, ad::Var source_latent, const WarpFieldVar& field);

// Frame-pair motion stack: shared image codec, identity/motion encoders and
// the flow predictor. Images are (C, S, S); the latent map is (C_l, S/4, S/4).
class MotionModel : public nn::Module {
public:
    MotionModel() = default;
    MotionModel(int img_channels, int img_size, int lat_channels, int id_channels, int motion_dim,
                int width, uint64_t seed);

    ad::Var encode_image(ad::Tape& tape, const Tensor& image);
    Tensor encode_image_tensor(const Tensor& image);
    ad::Var decode_image(ad::Tape& tape, ad::Var latent);
    Tensor decode_image_tensor(const Tensor& latent);

    ad::Var encode_identity(ad::Tape& tape, ad::Var source_latent);  // (C_id, h, w)
    ad::Var encode_motion(ad::Tape& tape, ad::Var target_latent);    // (d_m,)
    Tensor encode_identity_tensor(const Tensor& source_latent);
    Tensor encode_motion_tensor(const Tensor& target_latent);
    Tensor motion_code_for_image(const Tensor& image);

    WarpFieldVar predict_warp(ad::Tape& tape, ad::Var z_id, ad::Var z_m);
    WarpField predict_warp_tensor(const Tensor& z_id, const Tensor& z_m);

    int motion_dim() const { return motion_proj_.b.value.dim(0); }
    int latent_channels() const { return lat_channels_; }
    int latent_size() const { return img_size_ / 4; }
    int image_size() const { return img_size_; }
    int image_channels() const { return img_channels_; }

    void collect(std::vector<nn::Parameter*>& out) override;

private:
    int img_channels_ = 0, img_size_ = 0, lat_channels_ = 0, width_ = 0;
    nn::Conv2d enc1_, enc2_;          // image -> latent map
    nn::Conv2d dec1_, dec2_;          // latent map -> image
    nn::Conv2d id_conv_;              // latent map -> identity map
    nn::Conv2d mo_conv_;              // latent map -> pooled motion code
    nn::Linear motion_proj_;
    nn::Conv2d flow_mix_, flow_head_, occl_head_;
};

// Residual lip-region correction: z_wr = z_w + mask ⊙ (A(z_w) ⊙ B(z_l)).
// B has no bias, so zero guidance leaves the latent untouched exactly; A's
// head starts at zero so a fresh refiner is the identity.
class LipRefiner : public nn::Module {
public:
    LipRefiner() = default;
    LipRefiner(int lat_channels, int guidance_channels, Tensor lip_mask, uint64_t seed);

    ad::Var refine(ad::Tape& tape, ad::Var z_w, ad::Var z_l);
    Tensor refine_tensor(const Tensor& z_w, const Tensor& z_l);
    const Tensor& mask() const { return mask_; }
    void collect(std::vector<nn::Parameter*>& out) override;

private:
    Tensor mask_;  // (1,h,w), zero outside the lip region
    nn::Conv2d a_, b_;
};

// Supplies lip landmark tracks; the speech-to-landmark predictor behind it is
// injected, not implemented here.
class LandmarkProvider {
public:
    virtual ~LandmarkProvider() = default;
    // Positions in latent-map pixel units for the given frame.
    virtual std::vector<std::pair<Scalar, Scalar>> lip_landmarks(int frame_index) const = 0;
};

// Filled convex hull of the landmark points as a {0,1} mask.
Tensor lip_mask_from_landmarks(const std::vector<std::pair<Scalar, Scalar>>& pts, int h, int w);
// Guidance map: unit impulses at the landmark positions (bilinearly splatted).
Tensor rasterize_landmarks(const std::vector<std::pair<Scalar, Scalar>>& pts, int h, int w);

// Probability that the image is a real frame.
class Discriminator : public nn::Module {
public:
    Discriminator() = default;
    Discriminator(int channels, int width, uint64_t seed);
    ad::Var probability(ad::Tape& tape, ad::Var image);  // (1,), in (0,1)
    Scalar probability_value(const Tensor& image);
    void collect(std::vector<nn::Parameter*>& out) override;

private:
    nn::Conv2d c1_, c2_, c3_;
    nn::Linear head_;
};

struct ReconLosses {
    ad::Var total, re, vgg, adv;
};

// L = mean|I - Î|  +  Σ_layers mean|F(I) - F(Î)|  +  (-log D(Î)), unweighted.
ReconLosses reconstruction_objective(ad::Tape& tape, ad::Var target, ad::Var recon,
                                     features::FeatureExtractor& fx, Discriminator& disc);

struct MotionTrainConfig {
    int steps = 500;
    Scalar lr = 1e-2;
    Scalar vgg_weight = 1.0;
    Scalar adv_weight = 0.0;  // 0 disables the discriminator path entirely
    Scalar disc_lr = 1e-3;
    uint64_t seed = 7;
};

struct MotionTrainStats {
    std::vector<Scalar> l_re, l_total;
};

// Alternating generator/discriminator training on (source, target) frame
// pairs; lip_guides[i] is the guidance map for pair i (empty tensor = none).
MotionTrainStats train_motion(MotionModel& model, LipRefiner& refiner, Discriminator* disc,
                              features::FeatureExtractor& fx,
                              const std::vector<std::pair<Tensor, Tensor>>& frame_pairs,
                              const std::vector<Tensor>& lip_guides, const MotionTrainConfig& cfg);

// One full generator pass: encode both frames, warp, refine, decode.
ad::Var motion_forward(ad::Tape& tape, MotionModel& model, LipRefiner& refiner, const Tensor& source,
                       const Tensor& target, const Tensor& lip_guide);
// Decode from an externally supplied motion code (inference path).
ad::Var motion_forward_with_code(ad::Tape& tape, MotionModel& model, LipRefiner& refiner,
                                 const Tensor& source, const Tensor& motion_code,
                                 const Tensor& lip_guide);

}  // namespace ptalk::motion
