#include <doctest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ptalk/avdata.hpp"
#include "ptalk/container.hpp"
#include "ptalk/errors.hpp"
#include "ptalk/pipeline.hpp"
#include "ptalk/rng.hpp"

namespace fs = std::filesystem;
namespace pl = ptalk::pipeline;
namespace avd = ptalk::avdata;
using ptalk::ConfigError;
using ptalk::Container;
using ptalk::DataError;
using ptalk::Scalar;
using ptalk::SeedStream;
using ptalk::Tensor;

namespace {

struct TmpDir {
    fs::path path;
    TmpDir() {
        std::random_device rd;
        path = fs::temp_directory_path() /
               ("ptalk_pipe_" + std::to_string(rd()) + "_" + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~TmpDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
    std::string sub(const std::string& name) const { return (path / name).string(); }
};

// Saves and restores one environment variable around a test.
struct EnvGuard {
    std::string name;
    bool had;
    std::string old;
    explicit EnvGuard(const char* n) : name(n) {
        const char* v = std::getenv(n);
        had = v != nullptr;
        if (had) old = v;
    }
    ~EnvGuard() {
        if (had)
            ::setenv(name.c_str(), old.c_str(), 1);
        else
            ::unsetenv(name.c_str());
    }
};

pl::ExperimentConfig tiny_cfg(const std::string& out_dir) {
    pl::ExperimentConfig c;
    c.name = "tiny";
    c.seed = 11;
    c.out_dir = out_dir;  // absolute, so the env override cannot redirect it
    c.image_size = 12;    // smallest multiple of 4 that fits the ssim window
    c.image_channels = 1;
    c.latent_channels = 2;
    c.embed_dim = 4;
    c.speech_frame_dim = 4;
    c.motion_dim = 2;
    c.width = 4;
    c.hidden = 8;
    c.diffusion_steps = 6;
    c.codebook_size = 8;
    c.video_frames = 3;
    c.lr = 0.01;
    c.steps = pl::TrainSteps{25, 30, 30, 30, 30};
    return c;
}

std::string frame_png(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%05d.png", index);
    return buf;
}

std::string write_sine_wav(const std::string& path, Scalar seconds, Scalar freq = 330.0) {
    avd::AudioClip clip;
    const int n = static_cast<int>(seconds * avd::kSampleRate);
    clip.samples.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        clip.samples[static_cast<size_t>(i)] =
            0.4 * std::sin(2.0 * 3.14159265358979323846 * freq * i / avd::kSampleRate);
    avd::write_wav(path, clip);
    return path;
}

std::string read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape == b.shape);
    Scalar m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

Scalar tensor_mean(const Tensor& t) {
    Scalar acc = 0.0;
    for (Scalar v : t.data) acc += v;
    return acc / static_cast<Scalar>(t.data.size());
}

bool has_value(const ptalk::metrics::MetricReport& r, const std::string& key) {
    return r.values.count(key) == 1;
}

bool is_unavailable(const ptalk::metrics::MetricReport& r, const std::string& key) {
    return std::find(r.unavailable.begin(), r.unavailable.end(), key) != r.unavailable.end();
}

bool message_contains(const std::exception& e, const std::string& needle) {
    return std::string(e.what()).find(needle) != std::string::npos;
}

struct CountingEditor : pl::PortraitEditor {
    mutable int calls = 0;
    Tensor edit(const Tensor& p) const override {
        ++calls;
        return p;
    }
};

struct InvertEditor : pl::PortraitEditor {
    Tensor edit(const Tensor& p) const override {
        Tensor out = p;
        for (Scalar& v : out.data) v = 1.0 - v;
        return out;
    }
};

}  // namespace

TEST_CASE("config validation accepts defaults and names the offending field") {
    pl::ExperimentConfig c;
    CHECK_NOTHROW(c.validate());

    auto expect_invalid = [](pl::ExperimentConfig bad, const std::string& field) {
        try {
            bad.validate();
            FAIL("expected ConfigError for ", field);
        } catch (const ConfigError& e) {
            CHECK(message_contains(e, field));
        }
    };

    pl::ExperimentConfig c1;
    c1.name = "";
    expect_invalid(c1, "name");
    pl::ExperimentConfig c2;
    c2.image_size = 10;  // not a multiple of 4
    expect_invalid(c2, "image_size");
    pl::ExperimentConfig c3;
    c3.image_size = 4;  // below the minimum
    expect_invalid(c3, "image_size");
    pl::ExperimentConfig c4;
    c4.embed_dim = 1;
    expect_invalid(c4, "embed_dim");
    pl::ExperimentConfig c5;
    c5.video_frames = 1;
    expect_invalid(c5, "video_frames");
    pl::ExperimentConfig c6;
    c6.lr = 0.0;
    expect_invalid(c6, "lr");
    pl::ExperimentConfig c7;
    c7.hidden = 1;
    expect_invalid(c7, "hidden");
    pl::ExperimentConfig c8;
    c8.steps.motion = 0;
    expect_invalid(c8, "train_steps");
}

TEST_CASE("config json round trip preserves every field") {
    pl::ExperimentConfig c = tiny_cfg("/some/abs/out");
    c.data_dir = "";
    c.stages.motion = false;
    c.stages.sync_scorer = true;
    c.steps.conre = 3;
    c.seed = 12345;

    const pl::ExperimentConfig r = pl::ExperimentConfig::from_json(c.to_json());
    CHECK(r.name == c.name);
    CHECK(r.seed == c.seed);
    CHECK(r.data_dir == c.data_dir);
    CHECK(r.out_dir == c.out_dir);
    CHECK(r.image_size == c.image_size);
    CHECK(r.image_channels == c.image_channels);
    CHECK(r.latent_channels == c.latent_channels);
    CHECK(r.embed_dim == c.embed_dim);
    CHECK(r.speech_frame_dim == c.speech_frame_dim);
    CHECK(r.motion_dim == c.motion_dim);
    CHECK(r.width == c.width);
    CHECK(r.hidden == c.hidden);
    CHECK(r.diffusion_steps == c.diffusion_steps);
    CHECK(r.codebook_size == c.codebook_size);
    CHECK(r.video_frames == c.video_frames);
    CHECK(r.lr == c.lr);
    CHECK(r.stages.motion == false);
    CHECK(r.stages.sync_scorer == true);
    CHECK(r.stages.conre == true);
    CHECK(r.steps.conre == 3);
    CHECK(r.steps.portrait == c.steps.portrait);
    CHECK(r.config_hash() == c.config_hash());

    // absent fields fall back to the documented defaults
    const pl::ExperimentConfig d = pl::ExperimentConfig::from_json(nlohmann::json::object());
    CHECK(d.name == "desk");
    CHECK(d.image_size == 16);
    CHECK(d.steps.conre == 150);
    CHECK(d.stages.sync_scorer == false);

    CHECK_THROWS_AS((void)pl::ExperimentConfig::from_json(nlohmann::json{{"image_size", "big"}}),
                    ConfigError);
}

TEST_CASE("config hash is stable and sensitive to any field") {
    const pl::ExperimentConfig a = tiny_cfg("/o");
    const pl::ExperimentConfig b = tiny_cfg("/o");
    CHECK(a.config_hash() == b.config_hash());
    CHECK(a.config_hash().size() == 16);
    CHECK(a.config_hash().find_first_not_of("0123456789abcdef") == std::string::npos);

    pl::ExperimentConfig c = tiny_cfg("/o");
    c.seed += 1;
    CHECK(c.config_hash() != a.config_hash());
    pl::ExperimentConfig d = tiny_cfg("/o");
    d.lr = 0.02;
    CHECK(d.config_hash() != a.config_hash());
    pl::ExperimentConfig e = tiny_cfg("/o");
    e.stages.sync_scorer = true;
    CHECK(e.config_hash() != a.config_hash());
}

TEST_CASE("config load reports missing files, bad json and dangling paths") {
    TmpDir td;
    CHECK_THROWS_AS((void)pl::ExperimentConfig::load(td.sub("absent.json")), ConfigError);

    {
        std::ofstream f(td.sub("bad.json"));
        f << "this is not json {";
    }
    CHECK_THROWS_AS((void)pl::ExperimentConfig::load(td.sub("bad.json")), ConfigError);

    {
        pl::ExperimentConfig c = tiny_cfg(td.sub("out"));
        c.image_size = 10;
        std::ofstream f(td.sub("invalid.json"));
        f << c.to_json().dump();
    }
    CHECK_THROWS_AS((void)pl::ExperimentConfig::load(td.sub("invalid.json")), ConfigError);

    {
        pl::ExperimentConfig c = tiny_cfg(td.sub("out"));
        c.data_dir = td.sub("no_such_dataset");
        std::ofstream f(td.sub("dangling.json"));
        f << c.to_json().dump();
    }
    try {
        (void)pl::ExperimentConfig::load(td.sub("dangling.json"));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(message_contains(e, "data_dir"));
    }

    pl::ExperimentConfig good = tiny_cfg(td.sub("out"));
    good.data_dir = td.str();  // exists
    {
        std::ofstream f(td.sub("good.json"));
        f << good.to_json().dump();
    }
    const pl::ExperimentConfig loaded = pl::ExperimentConfig::load(td.sub("good.json"));
    CHECK(loaded.config_hash() == good.config_hash());
    CHECK(loaded.image_size == 12);
}

TEST_CASE("output root environment variable rewrites relative paths only") {
    EnvGuard guard(pl::kOutputRootEnv);

    ::unsetenv(pl::kOutputRootEnv);
    CHECK(pl::resolve_out_dir("rel/out") == "rel/out");
    CHECK(pl::resolve_out_dir("/abs/out") == "/abs/out");

    ::setenv(pl::kOutputRootEnv, "/root_override", 1);
    CHECK(pl::resolve_out_dir("rel/out") == "/root_override/rel/out");
    CHECK(pl::resolve_out_dir("/abs/out") == "/abs/out");

    ::setenv(pl::kOutputRootEnv, "", 1);
    CHECK(pl::resolve_out_dir("rel/out") == "rel/out");

    ::setenv(pl::kOutputRootEnv, "/root_override", 1);
    pl::ExperimentConfig c = tiny_cfg("/abs/out");
    CHECK(c.checkpoint_path("conre") == "/abs/out/checkpoints/conre.ptlk");
    c.out_dir = "runs/a";
    CHECK(c.checkpoint_path("portrait") == "/root_override/runs/a/checkpoints/portrait.ptlk");
}

TEST_CASE("run manifest round trips through json and rejects damage") {
    TmpDir td;
    pl::RunManifest m;
    m.config_hash = "deadbeef01234567";
    m.name = "demo";
    m.seed = 42;
    m.fps = 25;
    m.frame_count = 25;
    m.frames_dir = "/x/frames";
    m.report_path = "/x/report.json";
    m.checkpoints["conre"] = "/x/checkpoints/conre.ptlk";
    m.checkpoints["codebook"] = "/x/checkpoints/codebook.ptlk";

    m.save(td.sub("runs/manifest.json"));
    const pl::RunManifest r = pl::RunManifest::load(td.sub("runs/manifest.json"));
    CHECK(r.config_hash == m.config_hash);
    CHECK(r.code_version == pl::kCodeVersion);
    CHECK(r.name == "demo");
    CHECK(r.seed == 42);
    CHECK(r.fps == 25);
    CHECK(r.frame_count == 25);
    CHECK(r.frames_dir == m.frames_dir);
    CHECK(r.report_path == m.report_path);
    CHECK(r.checkpoints == m.checkpoints);

    CHECK_THROWS_AS((void)pl::RunManifest::load(td.sub("absent.json")), DataError);
    {
        std::ofstream f(td.sub("broken.json"));
        f << "{{{";
    }
    CHECK_THROWS_AS((void)pl::RunManifest::load(td.sub("broken.json")), DataError);
    // config_hash is mandatory
    CHECK_THROWS_AS((void)pl::RunManifest::from_json(nlohmann::json{{"seed", 1}}), DataError);
}

TEST_CASE("synthetic corpus writes wav, sidecar and frame tracks") {
    TmpDir td;
    const pl::ExperimentConfig cfg = tiny_cfg(td.sub("out"));
    CHECK_THROWS_AS(pl::write_synthetic_corpus(td.sub("raw"), 0, cfg), std::invalid_argument);

    pl::write_synthetic_corpus(td.sub("raw"), 2, cfg);
    for (const std::string stem : {"clip000", "clip001"}) {
        CHECK(fs::exists(td.sub("raw/" + stem + ".wav")));
        CHECK(fs::exists(td.sub("raw/" + stem + ".json")));
        for (int k = 0; k < cfg.video_frames; ++k)
            CHECK(fs::exists(td.sub("raw/" + stem + "_f" + std::to_string(k) + ".png")));
    }
    const avd::AudioClip clip = avd::read_wav(td.sub("raw/clip000.wav"));
    CHECK(clip.duration() == doctest::Approx(1.2).epsilon(1e-6));
    const Tensor f0 = avd::read_png(td.sub("raw/clip000_f0.png"));
    CHECK(f0.shape == std::vector<int>{1, 12, 12});

    // sidecar is one-line json with the gender flag
    std::ifstream sf(td.sub("raw/clip000.json"));
    nlohmann::json meta;
    sf >> meta;
    CHECK(meta.contains("female"));
}

TEST_CASE("preprocess builds loadable samples and validates its inputs") {
    TmpDir td;
    const pl::ExperimentConfig cfg = tiny_cfg(td.sub("out"));
    pl::write_synthetic_corpus(td.sub("raw"), 3, cfg);
    CHECK(pl::preprocess(td.sub("raw"), td.sub("proc"), cfg) == 3);

    const pl::Dataset ds = pl::load_dataset(td.sub("proc"));
    REQUIRE(ds.size() == 3);
    CHECK(ds.samples[0].stem == "clip000");
    CHECK(ds.samples[2].stem == "clip002");
    for (const auto& s : ds.samples) {
        CHECK(s.spec_small.shape == std::vector<int>{2, 64, 32});
        CHECK(s.speech_frames.shape == std::vector<int>{cfg.video_frames, cfg.speech_frame_dim});
        REQUIRE(static_cast<int>(s.frames.size()) == cfg.video_frames);
        for (const Tensor& f : s.frames) {
            CHECK(f.shape == std::vector<int>{1, 12, 12});
            for (Scalar v : f.data) {
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
            }
        }
    }

    // a config with a larger image size resizes the stored frames
    pl::ExperimentConfig big = cfg;
    big.image_size = 16;
    CHECK(pl::preprocess(td.sub("raw"), td.sub("proc16"), big) == 3);
    const pl::Dataset ds16 = pl::load_dataset(td.sub("proc16"));
    CHECK(ds16.samples[0].frames[0].shape == std::vector<int>{1, 16, 16});

    CHECK_THROWS_AS((void)pl::preprocess(td.sub("nowhere"), td.sub("p2"), cfg), DataError);
    fs::create_directories(td.sub("empty_raw"));
    CHECK_THROWS_AS((void)pl::preprocess(td.sub("empty_raw"), td.sub("p3"), cfg), DataError);

    // missing frame png
    pl::write_synthetic_corpus(td.sub("raw_missing"), 1, cfg);
    fs::remove(td.sub("raw_missing/clip000_f1.png"));
    try {
        (void)pl::preprocess(td.sub("raw_missing"), td.sub("p4"), cfg);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(message_contains(e, "missing frame"));
    }

    // malformed sidecar
    pl::write_synthetic_corpus(td.sub("raw_sidecar"), 1, cfg);
    {
        std::ofstream f(td.sub("raw_sidecar/clip000.json"));
        f << "not json";
    }
    CHECK_THROWS_AS((void)pl::preprocess(td.sub("raw_sidecar"), td.sub("p5"), cfg), DataError);

    CHECK_THROWS_AS((void)pl::load_dataset(td.sub("no_proc")), DataError);
    fs::create_directories(td.sub("empty_proc"));
    CHECK_THROWS_AS((void)pl::load_dataset(td.sub("empty_proc")), DataError);

    // a sample whose frame track is too short to animate
    fs::create_directories(td.sub("one_frame"));
    {
        Container c;
        c.meta["stem"] = "x";
        c.meta["video_frames"] = 1;
        c.put("spec_small", Tensor({2, 64, 32}, 0.0));
        c.put("speech_frames", Tensor({1, 4}, 0.0));
        c.save(td.sub("one_frame/x.ptlk"));
    }
    CHECK_THROWS_AS((void)pl::load_dataset(td.sub("one_frame")), DataError);
}

TEST_CASE("speech feature plumbing matches its parts and keeps shapes") {
    SeedStream rng(31, "test/reduce");
    const Tensor spec = rng.normal_tensor({2, 601, 257});
    const Tensor small = pl::reduce_spectrogram(spec);
    CHECK(small.shape == std::vector<int>{2, 64, 32});
    CHECK(tensor_mean(small) == doctest::Approx(tensor_mean(spec)).epsilon(1e-12));

    avd::AudioClip clip;
    clip.samples.resize(avd::kSampleRate);  // 1 s
    for (size_t i = 0; i < clip.samples.size(); ++i)
        clip.samples[i] = 0.3 * std::sin(0.07 * static_cast<Scalar>(i));

    const Tensor ff = pl::speech_frame_features(clip, 25, 4);
    CHECK(ff.shape == std::vector<int>{25, 4});

    const avd::Spectrogram sp = avd::spectrogram(avd::fix_length(clip));
    const Tensor manual = avd::align_speech_to_frames(avd::frame_features(sp, 4), 25);
    CHECK(max_abs_diff(ff, manual) == 0.0);
}

TEST_CASE("stages train, generate deterministically and report broken setups") {
    TmpDir td;
    pl::ExperimentConfig cfg = tiny_cfg(td.sub("out"));
    pl::write_synthetic_corpus(td.sub("raw"), 6, cfg);
    REQUIRE(pl::preprocess(td.sub("raw"), td.sub("proc"), cfg) == 6);
    cfg.data_dir = td.sub("proc");

    // training any stage without a dataset is a configuration error
    pl::ExperimentConfig no_data = cfg;
    no_data.data_dir = "";
    CHECK_THROWS_AS((void)pl::train_conre_stage(no_data), ConfigError);

    const Scalar conre_loss = pl::train_conre_stage(cfg);
    REQUIRE(std::isfinite(conre_loss));
    REQUIRE(fs::exists(cfg.checkpoint_path("conre")));

    pl::compute_prior_stage(cfg);
    REQUIRE(fs::exists(cfg.checkpoint_path("prior")));
    {
        const Container c = Container::load(cfg.checkpoint_path("prior"));
        CHECK(c.get("vector").shape == std::vector<int>{cfg.embed_dim});
        CHECK(c.meta["sample_count"].get<int>() == 6);
        const Scalar ratio = c.meta["gender_ratio"].get<Scalar>();
        CHECK(ratio >= 0.0);
        CHECK(ratio <= 1.0);
        CHECK(c.meta["stage"] == "prior");
    }

    REQUIRE(std::isfinite(pl::train_portrait_stage(cfg)));
    REQUIRE(std::isfinite(pl::train_motion_stage(cfg)));
    REQUIRE(std::isfinite(pl::train_motion_diffusion_stage(cfg)));
    REQUIRE(std::isfinite(pl::finetune_codebook_stage(cfg)));
    for (const std::string stage : {"portrait", "motion", "motion_diffusion", "codebook"})
        REQUIRE(fs::exists(cfg.checkpoint_path(stage)));

    const std::string wav = write_sine_wav(td.sub("speech.wav"), 1.0);
    const pl::GenerateResult r1 = pl::generate_end_to_end(wav, cfg, "t1");
    CHECK(r1.frame_count == 25);
    CHECK(r1.frames_dir == td.sub("out/runs/t1/frames"));
    CHECK(fs::exists(r1.frames_dir + "/" + frame_png(0)));
    CHECK(fs::exists(r1.frames_dir + "/" + frame_png(24)));
    CHECK_FALSE(fs::exists(r1.frames_dir + "/" + frame_png(25)));

    const pl::RunManifest man = pl::RunManifest::load(td.sub("out/runs/t1/manifest.json"));
    CHECK(man.config_hash == cfg.config_hash());
    CHECK(man.code_version == pl::kCodeVersion);
    CHECK(man.name == "t1");
    CHECK(man.seed == cfg.seed);
    CHECK(man.fps == 25);
    CHECK(man.frame_count == 25);
    CHECK(man.frames_dir == r1.frames_dir);
    CHECK(man.checkpoints.size() == 5);
    CHECK(man.checkpoints.at("conre") == cfg.checkpoint_path("conre"));
    CHECK(man.checkpoints.at("codebook") == cfg.checkpoint_path("codebook"));

    // a second run with the same seed reproduces the frames byte for byte
    const pl::GenerateResult r2 = pl::generate_end_to_end(wav, cfg, "t2");
    REQUIRE(r2.frame_count == r1.frame_count);
    for (int t : {0, 12, 24})
        CHECK(read_bytes(r1.frames_dir + "/" + frame_png(t)) ==
              read_bytes(r2.frames_dir + "/" + frame_png(t)));

    // a pass-through editor is invoked once and changes nothing
    CountingEditor counter;
    const pl::GenerateResult r3 = pl::generate_end_to_end(wav, cfg, "t3", &counter);
    CHECK(counter.calls == 1);
    CHECK(read_bytes(r1.frames_dir + "/" + frame_png(0)) ==
          read_bytes(r3.frames_dir + "/" + frame_png(0)));

    // an inverting editor reaches the rendered output
    InvertEditor invert;
    const pl::GenerateResult r4 = pl::generate_end_to_end(wav, cfg, "t4", &invert);
    Scalar total = 0.0;
    for (int t = 0; t < r4.frame_count; ++t)
        total += max_abs_diff(avd::read_png(r1.frames_dir + "/" + frame_png(t)),
                              avd::read_png(r4.frames_dir + "/" + frame_png(t)));
    CHECK(total > 0.0);

    // clips outside the supported length range
    CHECK_THROWS_AS((void)pl::generate_end_to_end(write_sine_wav(td.sub("long.wav"), 6.5), cfg, "x"),
                    DataError);
    CHECK_THROWS_AS(
        (void)pl::generate_end_to_end(write_sine_wav(td.sub("short.wav"), 0.02), cfg, "x"),
        DataError);
    CHECK_THROWS_AS((void)pl::generate_end_to_end(td.sub("absent.wav"), cfg, "x"), DataError);

    // self-comparison puts every similarity metric at its best value
    const auto rep = pl::evaluate_dirs(r1.frames_dir, r1.frames_dir, cfg);
    CHECK(rep.values.at("ssim") == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(rep.values.at("psnr") == 100.0);
    CHECK(rep.capped.at("psnr"));
    CHECK(rep.values.at("perceptual") == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(rep.values.at("fid") < 1e-6);
    REQUIRE(has_value(rep, "temporal_mad"));
    CHECK(rep.values.at("temporal_mad") >= 0.0);
    CHECK(std::isfinite(rep.values.at("temporal_mad")));
    CHECK(is_unavailable(rep, "lse_d"));
    CHECK(is_unavailable(rep, "lse_c"));
    CHECK(rep.dataset == r1.frames_dir);

    // no shared frame names between the directories
    fs::create_directories(td.sub("other"));
    avd::write_png(td.sub("other/zz.png"), Tensor({1, 12, 12}, 0.5));
    CHECK_THROWS_AS((void)pl::evaluate_dirs(r1.frames_dir, td.sub("other"), cfg), DataError);
    CHECK_THROWS_AS((void)pl::evaluate_dirs(r1.frames_dir, td.sub("no_dir"), cfg), DataError);

    // missing checkpoints name the stage and the verb that produces them
    pl::ExperimentConfig fresh = tiny_cfg(td.sub("fresh_out"));
    fresh.data_dir = cfg.data_dir;
    try {
        (void)pl::load_stages(fresh);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(message_contains(e, "missing checkpoint for stage 'conre'"));
        CHECK(message_contains(e, "train-conre"));
    }

    // checkpoints from a different geometry are rejected, not misloaded
    pl::ExperimentConfig mismatched = cfg;
    mismatched.embed_dim = 6;
    try {
        (void)pl::load_stages(mismatched);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(message_contains(e, "does not match"));
    }

    // corrupt checkpoint bytes surface as data errors naming the stage
    pl::ExperimentConfig bad = tiny_cfg(td.sub("bad_out"));
    bad.data_dir = cfg.data_dir;
    fs::create_directories(td.sub("bad_out/checkpoints"));
    {
        std::ofstream f(bad.checkpoint_path("conre"), std::ios::binary);
        f << "garbage bytes, not a container";
    }
    try {
        (void)pl::load_stages(bad);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(message_contains(e, "stage 'conre'"));
    }
}

TEST_CASE("run experiment produces a complete report with sync scores") {
    TmpDir td;
    pl::ExperimentConfig cfg = tiny_cfg(td.sub("exp_out"));
    cfg.stages.sync_scorer = true;  // data_dir stays empty: the corpus is synthesized

    const auto report = pl::run_experiment(cfg);
    for (const std::string key : {"ssim", "psnr", "perceptual", "fid", "temporal_mad",
                                  "recall_at_1", "recall_at_5", "lse_d", "lse_c"}) {
        REQUIRE(has_value(report, key));
        CHECK(std::isfinite(report.values.at(key)));
    }
    CHECK_FALSE(is_unavailable(report, "lse_d"));
    CHECK_FALSE(is_unavailable(report, "lse_c"));
    CHECK(report.values.at("ssim") >= -1.0);
    CHECK(report.values.at("ssim") <= 1.0);
    CHECK(report.values.at("fid") >= 0.0);
    const Scalar r1 = report.values.at("recall_at_1");
    const Scalar r5 = report.values.at("recall_at_5");
    CHECK(r1 >= 0.0);
    CHECK(r1 <= 1.0);
    CHECK(r5 >= r1);
    CHECK(r5 <= 1.0);
    CHECK(report.model == cfg.name);

    CHECK(fs::exists(td.sub("exp_out/data/raw/clip023.wav")));
    CHECK(fs::exists(td.sub("exp_out/runs/experiment/ref/" + frame_png(0))));

    const std::string report_path = td.sub("exp_out/runs/experiment/report.json");
    REQUIRE(fs::exists(report_path));
    {
        const auto reread = ptalk::metrics::MetricReport::from_json(read_bytes(report_path));
        CHECK(reread.values.at("ssim") == report.values.at("ssim"));
        CHECK(reread.values.at("lse_d") == report.values.at("lse_d"));
    }

    const pl::RunManifest man = pl::RunManifest::load(td.sub("exp_out/runs/experiment/manifest.json"));
    CHECK(man.report_path == report_path);
    CHECK(man.frame_count == 25);
}

#ifdef PRIOR_TALKER_BIN
namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(PRIOR_TALKER_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("command line maps the error taxonomy onto exit codes") {
    TmpDir td;
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 2);                 // a subcommand is required
    CHECK(run_cli("frobnicate") == 2);       // unknown verb
    CHECK(run_cli("generate --config " + td.sub("absent.json") + " --speech x.wav") == 2);

    pl::ExperimentConfig cfg = tiny_cfg(td.sub("out"));
    {
        std::ofstream f(td.sub("cfg.json"));
        f << cfg.to_json().dump();
    }
    // valid config, but the raw corpus directory does not exist: a data error
    CHECK(run_cli("preprocess --config " + td.sub("cfg.json") + " --raw " + td.sub("no_raw") +
                  " --out " + td.sub("proc")) == 3);
    // valid config, no checkpoints trained yet: a configuration error
    CHECK(run_cli("generate --config " + td.sub("cfg.json") + " --speech " +
                  write_sine_wav(td.sub("s.wav"), 1.0)) == 2);
}
#endif
