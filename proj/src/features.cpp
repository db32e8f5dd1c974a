#include "ptalk/features.hpp"

namespace ptalk::features {

std::vector<Tensor> FeatureExtractor::layers_tensor(const Tensor& image) {
    ad::Tape tape;
    ad::Var img = tape.constant(image);
    std::vector<ad::Var> ls = layers(tape, img);
    std::vector<Tensor> out;
    out.reserve(ls.size());
    for (ad::Var l : ls) out.push_back(l.val());
    return out;
}

Tensor FeatureExtractor::describe(const Tensor& image) {
    std::vector<Tensor> ls = layers_tensor(image);
    int64_t total = 0;
    for (const Tensor& l : ls) total += l.size();
    Tensor out({static_cast<int>(total)});
    int64_t off = 0;
    for (const Tensor& l : ls)
        for (int64_t i = 0; i < l.size(); ++i) out[off++] = l[i];
    return out;
}

RandomConvExtractor::RandomConvExtractor(int in_channels, int num_layers, int width, uint64_t seed) {
    if (num_layers < 1) throw std::invalid_argument("RandomConvExtractor: num_layers < 1");
    SeedStream rng(seed, "features/random_conv");
    int ci = in_channels;
    for (int l = 0; l < num_layers; ++l) {
        convs_.emplace_back("fx.l" + std::to_string(l), ci, width, 3, l == 0 ? 1 : 2, 1, rng);
        ci = width;
    }
}

std::vector<ad::Var> RandomConvExtractor::layers(ad::Tape& tape, ad::Var image) {
    std::vector<ad::Var> out;
    ad::Var h = image;
    for (nn::Conv2d& c : convs_) {
        h = tape.tanh_(tape.conv2d(h, c.w.frozen(tape), c.b.frozen(tape), c.stride, c.pad));
        out.push_back(h);
    }
    return out;
}

ad::Var perceptual_l2(ad::Tape& tape, FeatureExtractor& fx, ad::Var a, ad::Var b) {
    require_same_shape(a.val(), b.val(), "perceptual_l2");
    std::vector<ad::Var> fa = fx.layers(tape, a);
    std::vector<ad::Var> fb = fx.layers(tape, b);
    ad::Var acc = tape.mse(fa[0], fb[0]);
    for (size_t l = 1; l < fa.size(); ++l) acc = tape.add(acc, tape.mse(fa[l], fb[l]));
    return acc;
}

ad::Var perceptual_l1(ad::Tape& tape, FeatureExtractor& fx, ad::Var a, ad::Var b) {
    require_same_shape(a.val(), b.val(), "perceptual_l1");
    std::vector<ad::Var> fa = fx.layers(tape, a);
    std::vector<ad::Var> fb = fx.layers(tape, b);
    ad::Var acc = tape.mae(fa[0], fb[0]);
    for (size_t l = 1; l < fa.size(); ++l) acc = tape.add(acc, tape.mae(fa[l], fb[l]));
    return acc;
}

}  // namespace ptalk::features
