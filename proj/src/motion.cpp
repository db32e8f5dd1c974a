#include "ptalk/motion.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "ptalk/errors.hpp"

namespace ptalk::motion {

Tensor warp_latent(const Tensor& source_latent, const WarpField& field) {
    ad::Tape t;
    WarpFieldVar fv{t.constant(field.flow), t.constant(field.occlusion)};
    return warp_latent(t, t.constant(source_latent), fv).val();
}

ad::Var warp_latent(ad::Tape& tape, ad::Var source_latent, const WarpFieldVar& field) {
    return tape.mul_map(tape.grid_warp(source_latent, field.flow), field.occlusion);
}

MotionModel::MotionModel(int img_channels, int img_size, int lat_channels, int id_channels,
                         int motion_dim, int width, uint64_t seed)
    : img_channels_(img_channels), img_size_(img_size), lat_channels_(lat_channels), width_(width) {
    if (img_size % 4 != 0) throw std::invalid_argument("MotionModel: image size must be a multiple of 4");
    SeedStream rng(seed, "motion/model");
    enc1_ = nn::Conv2d("mot.enc1", img_channels, width, 3, 2, 1, rng);
    enc2_ = nn::Conv2d("mot.enc2", width, lat_channels, 3, 2, 1, rng);
    dec1_ = nn::Conv2d("mot.dec1", lat_channels, width, 3, 1, 1, rng);
    dec2_ = nn::Conv2d("mot.dec2", width, img_channels, 3, 1, 1, rng);
    id_conv_ = nn::Conv2d("mot.id", lat_channels, id_channels, 3, 1, 1, rng);
    mo_conv_ = nn::Conv2d("mot.mo", lat_channels, width, 3, 1, 1, rng);
    motion_proj_ = nn::Linear("mot.mo_proj", width, motion_dim, rng);
    flow_mix_ = nn::Conv2d("mot.flow_mix", id_channels + motion_dim, width, 3, 1, 1, rng);
    flow_head_ = nn::Conv2d("mot.flow_head", width, 2, 3, 1, 1, rng);
    occl_head_ = nn::Conv2d("mot.occl_head", width, 1, 3, 1, 1, rng);
    flow_head_.zero_init();  // fresh model: identity warp, half-open occlusion
    occl_head_.zero_init();
}

ad::Var MotionModel::encode_image(ad::Tape& t, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != img_channels_ || image.dim(1) != img_size_ ||
        image.dim(2) != img_size_)
        throw std::invalid_argument("MotionModel::encode_image: expected (" +
                                    std::to_string(img_channels_) + "," + std::to_string(img_size_) +
                                    "," + std::to_string(img_size_) + "), got " + shape_str(image.shape));
    ad::Var h = t.tanh_(enc1_(t, t.constant(image)));
    return t.tanh_(enc2_(t, h));
}

Tensor MotionModel::encode_image_tensor(const Tensor& image) {
    ad::Tape t;
    return encode_image(t, image).val();
}

ad::Var MotionModel::decode_image(ad::Tape& t, ad::Var latent) {
    ad::Var h = t.tanh_(dec1_(t, t.upsample2x(latent)));
    return t.sigmoid_(dec2_(t, t.upsample2x(h)));
}

Tensor MotionModel::decode_image_tensor(const Tensor& latent) {
    ad::Tape t;
    return decode_image(t, t.constant(latent)).val();
}

ad::Var MotionModel::encode_identity(ad::Tape& t, ad::Var source_latent) {
    return t.tanh_(id_conv_(t, source_latent));
}

ad::Var MotionModel::encode_motion(ad::Tape& t, ad::Var target_latent) {
    ad::Var h = t.tanh_(mo_conv_(t, target_latent));
    ad::Var pooled = t.reshape(t.channel_mean(h), {1, width_});
    return t.reshape(motion_proj_(t, pooled), {motion_dim()});
}

Tensor MotionModel::encode_identity_tensor(const Tensor& source_latent) {
    ad::Tape t;
    return encode_identity(t, t.constant(source_latent)).val();
}

Tensor MotionModel::encode_motion_tensor(const Tensor& target_latent) {
    ad::Tape t;
    return encode_motion(t, t.constant(target_latent)).val();
}

Tensor MotionModel::motion_code_for_image(const Tensor& image) {
    ad::Tape t;
    return encode_motion(t, encode_image(t, image)).val();
}

WarpFieldVar MotionModel::predict_warp(ad::Tape& t, ad::Var z_id, ad::Var z_m) {
    const int h = z_id.val().dim(1), w = z_id.val().dim(2);
    ad::Var mixed = t.concat_channels({z_id, t.broadcast_to_map(z_m, h, w)});
    ad::Var f = t.tanh_(flow_mix_(t, mixed));
    return WarpFieldVar{flow_head_(t, f), t.sigmoid_(occl_head_(t, f))};
}

WarpField MotionModel::predict_warp_tensor(const Tensor& z_id, const Tensor& z_m) {
    ad::Tape t;
    WarpFieldVar fv = predict_warp(t, t.constant(z_id), t.constant(z_m));
    return WarpField{fv.flow.val(), fv.occlusion.val()};
}

void MotionModel::collect(std::vector<nn::Parameter*>& out) {
    enc1_.collect(out);
    enc2_.collect(out);
    dec1_.collect(out);
    dec2_.collect(out);
    id_conv_.collect(out);
    mo_conv_.collect(out);
    motion_proj_.collect(out);
    flow_mix_.collect(out);
    flow_head_.collect(out);
    occl_head_.collect(out);
}

LipRefiner::LipRefiner(int lat_channels, int guidance_channels, Tensor lip_mask, uint64_t seed)
    : mask_(std::move(lip_mask)) {
    if (mask_.rank() != 3 || mask_.dim(0) != 1)
        throw std::invalid_argument("LipRefiner: mask must be (1,h,w)");
    SeedStream rng(seed, "motion/lip_refiner");
    a_ = nn::Conv2d("lip.a", lat_channels, lat_channels, 3, 1, 1, rng);
    b_ = nn::Conv2d("lip.b", guidance_channels, lat_channels, 3, 1, 1, rng);
    a_.zero_init();  // fresh refiner is the identity
}

ad::Var LipRefiner::refine(ad::Tape& t, ad::Var z_w, ad::Var z_l) {
    const Tensor& zw = z_w.val();
    if (zw.dim(1) != mask_.dim(1) || zw.dim(2) != mask_.dim(2))
        throw std::invalid_argument("LipRefiner: latent extent " + shape_str(zw.shape) +
                                    " does not match mask " + shape_str(mask_.shape));
    ad::Var a = a_(t, z_w);
    // bias-free guidance branch: zero guidance contributes exactly nothing
    const int co = b_.w.value.dim(0);
    ad::Var b = t.conv2d(z_l, b_.w.use(t), t.constant(Tensor({co}, 0.0)), 1, 1);
    ad::Var residual = t.mul_map(t.mul(a, b), t.constant(mask_));
    return t.add(z_w, residual);
}

Tensor LipRefiner::refine_tensor(const Tensor& z_w, const Tensor& z_l) {
    ad::Tape t;
    return refine(t, t.constant(z_w), t.constant(z_l)).val();
}

void LipRefiner::collect(std::vector<nn::Parameter*>& out) {
    out.push_back(&a_.w);
    out.push_back(&a_.b);
    out.push_back(&b_.w);  // guidance branch bias intentionally absent
}

namespace {

Scalar cross(const std::pair<Scalar, Scalar>& o, const std::pair<Scalar, Scalar>& a,
             const std::pair<Scalar, Scalar>& b) {
    return (a.first - o.first) * (b.second - o.second) - (a.second - o.second) * (b.first - o.first);
}

// Andrew monotone chain; returns the hull counter-clockwise.
std::vector<std::pair<Scalar, Scalar>> convex_hull(std::vector<std::pair<Scalar, Scalar>> pts) {
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    const size_t n = pts.size();
    if (n < 3) return pts;
    std::vector<std::pair<Scalar, Scalar>> hull(2 * n);
    size_t k = 0;
    for (size_t i = 0; i < n; ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    for (size_t i = n - 1, t = k + 1; i > 0; --i) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i - 1]) <= 0) --k;
        hull[k++] = pts[i - 1];
    }
    hull.resize(k - 1);
    return hull;
}

}  // namespace

Tensor lip_mask_from_landmarks(const std::vector<std::pair<Scalar, Scalar>>& pts, int h, int w) {
    if (pts.size() < 3) throw std::invalid_argument("lip_mask_from_landmarks: need >= 3 landmarks");
    const auto hull = convex_hull(pts);
    Tensor mask({1, h, w}, 0.0);
    if (hull.size() < 3) return mask;  // degenerate (collinear) landmarks cover no area
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::pair<Scalar, Scalar> p{static_cast<Scalar>(x), static_cast<Scalar>(y)};
            bool inside = true;
            for (size_t i = 0; i < hull.size() && inside; ++i) {
                const auto& a = hull[i];
                const auto& b = hull[(i + 1) % hull.size()];
                if (cross(a, b, p) < 0) inside = false;  // hull is CCW; inside = left of every edge
            }
            if (inside) mask.at(0, y, x) = 1.0;
        }
    return mask;
}

Tensor rasterize_landmarks(const std::vector<std::pair<Scalar, Scalar>>& pts, int h, int w) {
    Tensor map({1, h, w}, 0.0);
    for (const auto& [px, py] : pts) {
        const Scalar cx = std::clamp(px, 0.0, static_cast<Scalar>(w - 1));
        const Scalar cy = std::clamp(py, 0.0, static_cast<Scalar>(h - 1));
        const int x0 = std::min(static_cast<int>(cx), w - 2 >= 0 ? w - 2 : 0);
        const int y0 = std::min(static_cast<int>(cy), h - 2 >= 0 ? h - 2 : 0);
        const Scalar wx = cx - x0, wy = cy - y0;
        map.at(0, y0, x0) += (1 - wy) * (1 - wx);
        if (x0 + 1 < w) map.at(0, y0, x0 + 1) += (1 - wy) * wx;
        if (y0 + 1 < h) map.at(0, y0 + 1, x0) += wy * (1 - wx);
        if (x0 + 1 < w && y0 + 1 < h) map.at(0, y0 + 1, x0 + 1) += wy * wx;
    }
    return map;
}

Discriminator::Discriminator(int channels, int width, uint64_t seed) {
    SeedStream rng(seed, "motion/discriminator");
    c1_ = nn::Conv2d("disc.c1", channels, width, 3, 2, 1, rng);
    c2_ = nn::Conv2d("disc.c2", width, width, 3, 2, 1, rng);
    c3_ = nn::Conv2d("disc.c3", width, width, 3, 1, 1, rng);
    head_ = nn::Linear("disc.head", width, 1, rng);
}

ad::Var Discriminator::probability(ad::Tape& t, ad::Var image) {
    ad::Var h = t.tanh_(c1_(t, image));
    h = t.tanh_(c2_(t, h));
    h = t.tanh_(c3_(t, h));
    ad::Var pooled = t.reshape(t.channel_mean(h), {1, head_.w.value.dim(0)});
    return t.reshape(t.sigmoid_(head_(t, pooled)), {1});
}

Scalar Discriminator::probability_value(const Tensor& image) {
    ad::Tape t;
    return probability(t, t.constant(image)).val()[0];
}

void Discriminator::collect(std::vector<nn::Parameter*>& out) {
    c1_.collect(out);
    c2_.collect(out);
    c3_.collect(out);
    head_.collect(out);
}

ReconLosses reconstruction_objective(ad::Tape& t, ad::Var target, ad::Var recon,
                                     features::FeatureExtractor& fx, Discriminator& disc) {
    require_same_shape(target.val(), recon.val(), "reconstruction_objective");
    ad::Var re = t.mae(target, recon);
    ad::Var vgg = features::perceptual_l1(t, fx, target, recon);
    ad::Var d = disc.probability(t, recon);
    const Scalar dv = d.val()[0];
    if (!(dv > 0.0) || !(dv < 1.0))
        throw NumericError("reconstruction_objective: discriminator output " + std::to_string(dv) +
                           " outside (0,1)");
    ad::Var adv = t.neg(t.log_(d));
    return ReconLosses{t.add(t.add(re, vgg), adv), re, vgg, adv};
}

ad::Var motion_forward(ad::Tape& t, MotionModel& model, LipRefiner& refiner, const Tensor& source,
                       const Tensor& target, const Tensor& lip_guide) {
    ad::Var ls = model.encode_image(t, source);
    ad::Var lt = model.encode_image(t, target);
    ad::Var z_id = model.encode_identity(t, ls);
    ad::Var z_m = model.encode_motion(t, lt);
    WarpFieldVar field = model.predict_warp(t, z_id, z_m);
    ad::Var z_w = warp_latent(t, ls, field);
    Tensor guide = lip_guide.data.empty()
                       ? Tensor({1, model.latent_size(), model.latent_size()}, 0.0)
                       : lip_guide;
    ad::Var z_wr = refiner.refine(t, z_w, t.constant(guide));
    return model.decode_image(t, z_wr);
}

ad::Var motion_forward_with_code(ad::Tape& t, MotionModel& model, LipRefiner& refiner,
                                 const Tensor& source, const Tensor& motion_code,
                                 const Tensor& lip_guide) {
    ad::Var ls = model.encode_image(t, source);
    ad::Var z_id = model.encode_identity(t, ls);
    WarpFieldVar field = model.predict_warp(t, z_id, t.constant(motion_code));
    ad::Var z_w = warp_latent(t, ls, field);
    Tensor guide = lip_guide.data.empty()
                       ? Tensor({1, model.latent_size(), model.latent_size()}, 0.0)
                       : lip_guide;
    ad::Var z_wr = refiner.refine(t, z_w, t.constant(guide));
    return model.decode_image(t, z_wr);
}

MotionTrainStats train_motion(MotionModel& model, LipRefiner& refiner, Discriminator* disc,
                              features::FeatureExtractor& fx,
                              const std::vector<std::pair<Tensor, Tensor>>& frame_pairs,
                              const std::vector<Tensor>& lip_guides, const MotionTrainConfig& cfg) {
    if (frame_pairs.empty()) throw std::invalid_argument("train_motion: no frame pairs");
    if (!lip_guides.empty() && lip_guides.size() != frame_pairs.size())
        throw std::invalid_argument("train_motion: lip_guides count mismatch");
    const bool adversarial = cfg.adv_weight > 0.0 && disc != nullptr;

    std::vector<nn::Parameter*> gen_params = model.parameters();
    refiner.collect(gen_params);
    nn::Adam gen_opt(gen_params, cfg.lr);
    std::unique_ptr<nn::Adam> disc_opt;
    if (adversarial) disc_opt = std::make_unique<nn::Adam>(disc->parameters(), cfg.disc_lr);

    MotionTrainStats stats;
    const Tensor no_guide;
    for (int s = 0; s < cfg.steps; ++s) {
        const size_t i = static_cast<size_t>(s) % frame_pairs.size();
        const Tensor& guide = lip_guides.empty() ? no_guide : lip_guides[i];

        ad::Tape t;
        ad::Var recon = motion_forward(t, model, refiner, frame_pairs[i].first, frame_pairs[i].second, guide);
        ad::Var target = t.constant(frame_pairs[i].second);
        ad::Var re = t.mae(target, recon);
        ad::Var total = re;
        if (cfg.vgg_weight > 0.0)
            total = t.add(total, t.smul(features::perceptual_l1(t, fx, target, recon), cfg.vgg_weight));
        if (adversarial) {
            ad::Var d = disc->probability(t, recon);
            total = t.add(total, t.smul(t.neg(t.log_(d)), cfg.adv_weight));
        }
        if (!total.val().all_finite())
            throw NumericError("train_motion: non-finite loss at step " + std::to_string(s));
        for (nn::Parameter* p : gen_params) p->zero_grad();
        t.backward(total);
        gen_opt.step();
        stats.l_re.push_back(re.val()[0]);
        stats.l_total.push_back(total.val()[0]);

        if (adversarial) {
            ad::Tape td;
            ad::Var d_real = disc->probability(td, td.constant(frame_pairs[i].second));
            ad::Var d_fake = disc->probability(td, td.constant(recon.val()));
            ad::Var loss_d = td.sub(td.neg(td.log_(d_real)),
                                    td.log_(td.sadd(td.neg(d_fake), 1.0)));
            disc->zero_grad();
            td.backward(loss_d);
            disc_opt->step();
        }
    }
    return stats;
}

}  // namespace ptalk::motion
