#pragma once

#include <cstdint>
#include <vector>

#include "ptalk/nn.hpp"
#include "ptalk/tensor.hpp"

namespace ptalk::features {

// Multi-layer feature stack over a (C,H,W) image. Stands in for the
// pretrained perceptual networks (VGG/AlexNet/Inception) that are injected
// rather than shipped: any implementation of this interface works with the
// perceptual losses and distribution metrics.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual int num_layers() const = 0;
    // Features per layer, on a tape so losses can backprop into the image.
    virtual std::vector<ad::Var> layers(ad::Tape& tape, ad::Var image) = 0;

    std::vector<Tensor> layers_tensor(const Tensor& image);
    // Flat descriptor (all layer activations concatenated) for Gaussian fits.
    Tensor describe(const Tensor& image);
};

// Frozen randomly initialized conv stack with tanh activations. Reproducible
// from the seed; never trained, and gradients do not flow into its weights.
class RandomConvExtractor : public FeatureExtractor {
public:
    RandomConvExtractor(int in_channels, int num_layers, int width, uint64_t seed);
    int num_layers() const override { return static_cast<int>(convs_.size()); }
    std::vector<ad::Var> layers(ad::Tape& tape, ad::Var image) override;

private:
    std::vector<nn::Conv2d> convs_;
};

// Single layer returning the image itself; makes perceptual terms reduce to
// plain pixel distances.
class IdentityExtractor : public FeatureExtractor {
public:
    int num_layers() const override { return 1; }
    std::vector<ad::Var> layers(ad::Tape&, ad::Var image) override { return {image}; }
};

// Sum over layers of the mean squared feature difference (the perceptual
// distance used by the reconstruction objectives).
ad::Var perceptual_l2(ad::Tape& tape, FeatureExtractor& fx, ad::Var a, ad::Var b);

// Sum over layers of the mean absolute feature difference (multi-scale
// feature matching used by the frame-reconstruction objective).
ad::Var perceptual_l1(ad::Tape& tape, FeatureExtractor& fx, ad::Var a, ad::Var b);

}  // namespace ptalk::features
