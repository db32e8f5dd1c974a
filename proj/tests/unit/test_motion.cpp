#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "ptalk/errors.hpp"
#include "ptalk/motion.hpp"
#include "ptalk/rng.hpp"
#include "support/gradcheck.hpp"

using namespace ptalk;
using motion::WarpField;

namespace {

Tensor ramp_latent() {
    Tensor s({1, 1, 4});
    for (int x = 0; x < 4; ++x) s.at(0, 0, x) = static_cast<Scalar>(x);
    return s;
}

}  // namespace

TEST_CASE("zero flow and full visibility copy the latent") {
    SeedStream rng(80);
    Tensor src = rng.normal_tensor({3, 4, 5});
    WarpField field{Tensor({2, 4, 5}, 0.0), Tensor({1, 4, 5}, 1.0)};
    Tensor out = motion::warp_latent(src, field);
    for (int64_t i = 0; i < src.size(); ++i) CHECK(out[i] == src[i]);
}

TEST_CASE("fully occluded output is exactly zero") {
    SeedStream rng(81);
    Tensor src = rng.normal_tensor({2, 3, 3});
    WarpField field{rng.uniform_tensor({2, 3, 3}, -1.0, 1.0), Tensor({1, 3, 3}, 0.0)};
    Tensor out = motion::warp_latent(src, field);
    for (Scalar v : out.data) CHECK(v == 0.0);
}

TEST_CASE("half-pixel shift interpolates a ramp and clamps at the border") {
    Tensor src = ramp_latent();
    Tensor flow({2, 1, 4}, 0.0);
    for (int x = 0; x < 4; ++x) flow.at(0, 0, x) = 0.5;
    WarpField field{flow, Tensor({1, 1, 4}, 1.0)};
    Tensor out = motion::warp_latent(src, field);
    CHECK(out.at(0, 0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.at(0, 0, 1) == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(out.at(0, 0, 2) == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(out.at(0, 0, 3) == doctest::Approx(3.0).epsilon(1e-12));  // sample past the edge clamps
}

TEST_CASE("visibility scales the warped latent linearly") {
    SeedStream rng(82);
    Tensor src = rng.normal_tensor({2, 4, 4});
    Tensor flow = rng.uniform_tensor({2, 4, 4}, -0.8, 0.8);
    Tensor full = motion::warp_latent(src, {flow, Tensor({1, 4, 4}, 1.0)});
    Tensor dimmed = motion::warp_latent(src, {flow, Tensor({1, 4, 4}, 0.25)});
    for (int64_t i = 0; i < full.size(); ++i) CHECK(dimmed[i] == 0.25 * full[i]);
}

TEST_CASE("non-finite flow is rejected") {
    Tensor src({1, 2, 2}, 1.0);
    Tensor flow({2, 2, 2}, 0.0);
    flow[0] = std::nan("");
    CHECK_THROWS_AS(motion::warp_latent(src, {flow, Tensor({1, 2, 2}, 1.0)}), NumericError);
}

TEST_CASE("fresh motion model predicts no motion and half visibility") {
    motion::MotionModel model(1, 8, 2, 3, 4, 4, 83);
    CHECK(model.latent_size() == 2);
    CHECK(model.motion_dim() == 4);
    SeedStream rng(84);
    Tensor img = rng.uniform_tensor({1, 8, 8}, 0.0, 1.0);
    Tensor lat = model.encode_image_tensor(img);
    REQUIRE(lat.rank() == 3);
    CHECK(lat.dim(0) == 2);
    CHECK(lat.dim(1) == 2);
    CHECK(lat.dim(2) == 2);

    Tensor z_id = model.encode_identity_tensor(lat);
    Tensor z_m = model.encode_motion_tensor(lat);
    CHECK(z_id.dim(0) == 3);
    CHECK(z_m.size() == 4);

    WarpField field = model.predict_warp_tensor(z_id, z_m);
    for (Scalar v : field.flow.data) CHECK(v == 0.0);       // flow head starts at zero
    for (Scalar v : field.occlusion.data) CHECK(v == 0.5);  // sigmoid of a zeroed head

    // so the first warp is exactly half the source latent
    Tensor warped = motion::warp_latent(lat, field);
    for (int64_t i = 0; i < lat.size(); ++i) CHECK(warped[i] == 0.5 * lat[i]);

    CHECK_THROWS_AS(motion::MotionModel(1, 10, 2, 3, 4, 4, 83), std::invalid_argument);
}

TEST_CASE("decoded images live strictly inside the unit interval") {
    motion::MotionModel model(2, 8, 3, 2, 4, 4, 85);
    SeedStream rng(86);
    Tensor img = rng.uniform_tensor({2, 8, 8}, 0.0, 1.0);
    Tensor out = model.decode_image_tensor(model.encode_image_tensor(img));
    REQUIRE(out.shape == img.shape);
    for (Scalar v : out.data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("lip refiner identity guarantees") {
    Tensor mask({1, 2, 2}, 1.0);
    motion::LipRefiner fresh(2, 1, mask, 87);
    SeedStream rng(88);
    Tensor z_w = rng.normal_tensor({2, 2, 2});
    Tensor z_l = rng.normal_tensor({1, 2, 2});

    // zeroed correction branch: any guidance leaves the latent untouched
    Tensor out = fresh.refine_tensor(z_w, z_l);
    for (int64_t i = 0; i < z_w.size(); ++i) CHECK(out[i] == z_w[i]);

    // trained branch, but zero guidance: the bias-free path contributes nothing
    motion::LipRefiner tuned(2, 1, mask, 87);
    for (nn::Parameter* p : tuned.parameters()) p->value = rng.normal_tensor(p->value.shape, 0.5);
    Tensor out2 = tuned.refine_tensor(z_w, Tensor({1, 2, 2}, 0.0));
    for (int64_t i = 0; i < z_w.size(); ++i) CHECK(out2[i] == z_w[i]);
}

TEST_CASE("lip refiner edits only inside the mask") {
    Tensor mask({1, 4, 4}, 0.0);
    mask.at(0, 2, 1) = 1.0;
    mask.at(0, 2, 2) = 1.0;
    motion::LipRefiner refiner(2, 1, mask, 89);
    SeedStream rng(90);
    for (nn::Parameter* p : refiner.parameters()) p->value = rng.normal_tensor(p->value.shape, 0.5);

    Tensor z_w = rng.normal_tensor({2, 4, 4});
    Tensor z_l = rng.normal_tensor({1, 4, 4});
    Tensor out = refiner.refine_tensor(z_w, z_l);
    int changed = 0;
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                if (mask.at(0, y, x) == 0.0)
                    CHECK(out.at(c, y, x) == z_w.at(c, y, x));
                else if (out.at(c, y, x) != z_w.at(c, y, x))
                    ++changed;
            }
    CHECK(changed > 0);  // the masked pixels do move
}

TEST_CASE("lip refiner trains its two weight maps and one bias") {
    motion::LipRefiner refiner(2, 1, Tensor({1, 2, 2}, 1.0), 91);
    std::vector<std::string> names;
    for (nn::Parameter* p : refiner.parameters()) names.push_back(p->name);
    std::sort(names.begin(), names.end());
    REQUIRE(names.size() == 3);
    CHECK(names[0] == "lip.a.b");
    CHECK(names[1] == "lip.a.w");
    CHECK(names[2] == "lip.b.w");  // guidance branch carries no bias

    CHECK_THROWS_AS(motion::LipRefiner(2, 1, Tensor({2, 2}, 1.0), 91), std::invalid_argument);
    CHECK_THROWS_AS(refiner.refine_tensor(Tensor({2, 3, 3}, 0.0), Tensor({1, 3, 3}, 0.0)),
                    std::invalid_argument);
}

TEST_CASE("landmark hull mask: right triangle covers the lower-left pixels") {
    Tensor mask = motion::lip_mask_from_landmarks({{0, 0}, {3, 0}, {0, 3}}, 4, 4);
    Scalar sum = 0.0;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            const Scalar expect = (x + y <= 3) ? 1.0 : 0.0;
            CHECK(mask.at(0, y, x) == expect);
            sum += mask.at(0, y, x);
        }
    CHECK(sum == 10.0);

    // collinear landmarks enclose no area
    Tensor flat = motion::lip_mask_from_landmarks({{0, 0}, {1, 1}, {2, 2}}, 4, 4);
    for (Scalar v : flat.data) CHECK(v == 0.0);

    CHECK_THROWS_AS(motion::lip_mask_from_landmarks({{0, 0}, {1, 1}}, 4, 4), std::invalid_argument);
}

TEST_CASE("landmark rasterization splats unit mass per point") {
    Tensor one = motion::rasterize_landmarks({{2.0, 1.0}}, 4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) CHECK(one.at(0, y, x) == ((y == 1 && x == 2) ? 1.0 : 0.0));

    Tensor half = motion::rasterize_landmarks({{1.5, 2.0}}, 4, 4);
    CHECK(half.at(0, 2, 1) == 0.5);
    CHECK(half.at(0, 2, 2) == 0.5);

    // off-grid points clamp to the border but keep their mass
    Tensor clamped = motion::rasterize_landmarks({{10.0, -3.0}}, 4, 4);
    CHECK(clamped.at(0, 0, 3) == 1.0);

    Tensor two = motion::rasterize_landmarks({{0.3, 0.7}, {2.6, 1.2}}, 4, 4);
    Scalar sum = 0.0;
    for (Scalar v : two.data) sum += v;
    CHECK(sum == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("discriminator emits a probability strictly inside (0,1)") {
    motion::Discriminator disc(1, 4, 92);
    SeedStream rng(93);
    const Scalar p = disc.probability_value(rng.uniform_tensor({1, 8, 8}, 0.0, 1.0));
    CHECK(p > 0.0);
    CHECK(p < 1.0);
}

namespace {

// pin the discriminator logit by zeroing the head weights and setting the bias
void pin_disc_logit(motion::Discriminator& disc, Scalar logit) {
    for (nn::Parameter* p : disc.parameters()) {
        if (p->name == "disc.head.w") p->value.fill(0.0);
        if (p->name == "disc.head.b") p->value.fill(logit);
    }
}

}  // namespace

TEST_CASE("frame objective recomputed term by term") {
    motion::Discriminator disc(1, 4, 94);
    pin_disc_logit(disc, 2.0);
    features::RandomConvExtractor fx(1, 2, 3, 95);
    SeedStream rng(96);
    Tensor target = rng.uniform_tensor({1, 8, 8}, 0.0, 1.0);
    Tensor recon = rng.uniform_tensor({1, 8, 8}, 0.0, 1.0);

    ad::Tape t;
    motion::ReconLosses parts =
        motion::reconstruction_objective(t, t.constant(target), t.constant(recon), fx, disc);

    Scalar re = 0.0;
    for (int64_t i = 0; i < target.size(); ++i) re += std::abs(target[i] - recon[i]);
    re /= target.size();
    Scalar vgg = 0.0;
    std::vector<Tensor> ft = fx.layers_tensor(target), fr = fx.layers_tensor(recon);
    for (size_t l = 0; l < ft.size(); ++l) {
        Scalar s = 0.0;
        for (int64_t i = 0; i < ft[l].size(); ++i) s += std::abs(ft[l][i] - fr[l][i]);
        vgg += s / ft[l].size();
    }
    const Scalar adv = -std::log(disc.probability_value(recon));

    CHECK(parts.re.val()[0] == doctest::Approx(re).epsilon(1e-12));
    CHECK(parts.vgg.val()[0] == doctest::Approx(vgg).epsilon(1e-12));
    CHECK(parts.adv.val()[0] == doctest::Approx(adv).epsilon(1e-12));
    CHECK(parts.total.val()[0] ==
          doctest::Approx(re + vgg + adv).epsilon(1e-12));
}

TEST_CASE("frame objective trivial cases and saturation guard") {
    features::IdentityExtractor id;
    SeedStream rng(97);
    Tensor img = rng.uniform_tensor({1, 8, 8}, 0.0, 1.0);

    {  // confident-but-unsaturated head: only a vanishing adversarial term remains
        motion::Discriminator disc(1, 4, 98);
        pin_disc_logit(disc, 30.0);
        ad::Tape t;
        motion::ReconLosses parts =
            motion::reconstruction_objective(t, t.constant(img), t.constant(img), id, disc);
        CHECK(parts.re.val()[0] == 0.0);
        CHECK(parts.vgg.val()[0] == 0.0);
        CHECK(parts.adv.val()[0] > 0.0);
        CHECK(parts.adv.val()[0] < 1e-12);
    }
    {  // logit 40 rounds the probability to exactly 1 in double precision
        motion::Discriminator disc(1, 4, 98);
        pin_disc_logit(disc, 40.0);
        ad::Tape t;
        CHECK_THROWS_AS(motion::reconstruction_objective(t, t.constant(img), t.constant(img), id, disc),
                        NumericError);
    }
    {  // and an underflowing logit pins it to exactly 0
        motion::Discriminator disc(1, 4, 98);
        pin_disc_logit(disc, -800.0);
        ad::Tape t;
        CHECK_THROWS_AS(motion::reconstruction_objective(t, t.constant(img), t.constant(img), id, disc),
                        NumericError);
    }
    {
        motion::Discriminator disc(1, 4, 98);
        ad::Tape t;
        CHECK_THROWS_AS(motion::reconstruction_objective(t, t.constant(img),
                                                         t.constant(Tensor({1, 8, 9}, 0.5)), id, disc),
                        std::invalid_argument);
    }
}

TEST_CASE("full generator pass is deterministic and code-injectable") {
    motion::MotionModel model(1, 8, 2, 2, 3, 4, 99);
    motion::LipRefiner refiner(2, 1, Tensor({1, 2, 2}, 1.0), 100);
    SeedStream rng(101);
    Tensor source = rng.uniform_tensor({1, 8, 8}, 0.0, 1.0);
    Tensor target = rng.uniform_tensor({1, 8, 8}, 0.0, 1.0);
    Tensor guide = rng.uniform_tensor({1, 2, 2}, 0.0, 1.0);

    Tensor a, b;
    {
        ad::Tape t;
        a = motion::motion_forward(t, model, refiner, source, target, guide).val();
    }
    {
        ad::Tape t;
        b = motion::motion_forward(t, model, refiner, source, target, guide).val();
    }
    REQUIRE(a.shape == source.shape);
    for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

    // feeding the target's own motion code reproduces the paired pass exactly
    Tensor code = model.motion_code_for_image(target);
    ad::Tape t;
    Tensor c = motion::motion_forward_with_code(t, model, refiner, source, code, guide).val();
    for (int64_t i = 0; i < a.size(); ++i) CHECK(c[i] == a[i]);
}

TEST_CASE("short motion training reduces the frame error") {
    motion::MotionModel model(1, 8, 2, 2, 3, 4, 102);
    motion::LipRefiner refiner(2, 1, Tensor({1, 2, 2}, 1.0), 103);
    features::IdentityExtractor id;

    SeedStream rng(104);
    std::vector<std::pair<Tensor, Tensor>> pairs;
    for (int i = 0; i < 2; ++i) {
        Tensor src({1, 8, 8}), dst({1, 8, 8});
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                src.at(0, y, x) = 0.5 + 0.3 * std::sin(0.5 * x + i);
                dst.at(0, y, x) = 0.5 + 0.3 * std::sin(0.5 * (x + 1) + i);
            }
        pairs.emplace_back(std::move(src), std::move(dst));
    }

    motion::MotionTrainConfig cfg;
    cfg.steps = 120;
    cfg.lr = 0.02;
    motion::MotionTrainStats stats = motion::train_motion(model, refiner, nullptr, id, pairs, {}, cfg);
    REQUIRE(static_cast<int>(stats.l_re.size()) == cfg.steps);
    CHECK(stats.l_re.back() < stats.l_re.front());
    CHECK(std::isfinite(stats.l_total.back()));

    // adversarial variant stays finite and keeps the discriminator in range
    motion::Discriminator disc(1, 4, 105);
    motion::MotionTrainConfig adv_cfg;
    adv_cfg.steps = 20;
    adv_cfg.adv_weight = 0.1;
    motion::MotionTrainStats adv_stats =
        motion::train_motion(model, refiner, &disc, id, pairs, {}, adv_cfg);
    CHECK(static_cast<int>(adv_stats.l_total.size()) == adv_cfg.steps);
    CHECK(std::isfinite(adv_stats.l_total.back()));
}
