#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "ptalk/avdata.hpp"
#include "ptalk/conre.hpp"
#include "ptalk/diffusion.hpp"
#include "ptalk/metrics.hpp"
#include "ptalk/motion.hpp"
#include "ptalk/motion_diffusion.hpp"
#include "ptalk/prior.hpp"
#include "ptalk/tensor.hpp"
#include "ptalk/vq.hpp"

namespace ptalk::pipeline {

inline constexpr const char* kCodeVersion = "0.1.0";
inline constexpr const char* kOutputRootEnv = "PRIOR_TALKER_OUT";

struct StageToggles {
    bool conre = true;
    bool portrait = true;
    bool motion = true;
    bool motion_diffusion = true;
    bool codebook = true;
    bool sync_scorer = false;  // optional capability; off marks LSE unavailable
};

struct TrainSteps {
    int conre = 150;
    int portrait = 300;
    int motion = 250;
    int motion_diffusion = 200;
    int codebook = 200;
};

// Every knob of a run: desk-scale dimensions, stage toggles, budgets, paths.
// The seed is the root of all named randomness streams.
struct ExperimentConfig {
    std::string name = "desk";
    uint64_t seed = 7;
    std::string data_dir;        // processed dataset (may be empty until preprocess)
    std::string out_dir = "out"; // checkpoints, frames, reports

    int image_size = 16;      // frame resolution (multiple of 4)
    int image_channels = 1;
    int latent_channels = 4;  // motion latent map channels == codebook dim
    int embed_dim = 8;        // ConRe embedding == portrait latent dimension
    int speech_frame_dim = 6; // per-frame speech feature bands
    int motion_dim = 4;
    int width = 8;            // conv width of the toy encoders
    int hidden = 24;          // MLP denoiser width
    int diffusion_steps = 10;
    int codebook_size = 16;
    int video_frames = 6;     // frames per training clip
    Scalar lr = 0.01;

    StageToggles stages;
    TrainSteps steps;

    void validate() const;  // throws ConfigError
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    // Parses the file, validates, and checks that referenced paths exist.
    static ExperimentConfig load(const std::string& path);

    std::string config_hash() const;
    std::string checkpoint_path(const std::string& stage) const;
    int latent_size() const { return image_size / 4; }
};

// Applies the output-root environment override to a relative path.
std::string resolve_out_dir(const std::string& out_dir);

// Everything needed to re-run or audit a generation.
struct RunManifest {
    std::string config_hash;
    std::string code_version = kCodeVersion;
    std::string name;
    uint64_t seed = 0;
    int fps = 25;
    int frame_count = 0;
    std::string frames_dir;
    std::string report_path;
    std::map<std::string, std::string> checkpoints;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static RunManifest load(const std::string& path);
};

// One preprocessed clip: reduced spectrogram for the speech tower, aligned
// per-frame speech features, the face crop and the short frame track.
struct ProcessedSample {
    std::string stem;
    bool female = false;
    Tensor spec_small;     // (2, 64, 32)
    Tensor speech_frames;  // (video_frames, speech_frame_dim)
    std::vector<Tensor> frames;  // each (C, S, S); frames[0] is the face crop
};

struct Dataset {
    std::vector<ProcessedSample> samples;
    int size() const { return static_cast<int>(samples.size()); }
};

// Synthetic raw corpus: per identity a tone whose pitch tracks the identity
// parameters that also shape the face, plus a frame track whose vertical
// motion follows the loudness envelope. Writes stem.wav, stem.json and
// stem_f<k>.png files.
void write_synthetic_corpus(const std::string& dir, int n, const ExperimentConfig& cfg);

// Raw wav/png corpus -> processed PTLK1 samples; returns the sample count.
int preprocess(const std::string& raw_dir, const std::string& processed_dir,
               const ExperimentConfig& cfg);

Dataset load_dataset(const std::string& processed_dir);

// Per-frame speech features for a clip: band energies per hop, averaged into
// 40 ms frame windows.
Tensor speech_frame_features(const avdata::AudioClip& clip, int n_frames, int n_bands);
Tensor reduce_spectrogram(const Tensor& spec_channels);  // (2,64,32) speech-tower input

// Stage training entry points; each writes its PTLK1 checkpoint under the
// config's output directory and returns the final loss (or distance).
Scalar train_conre_stage(const ExperimentConfig& cfg);
void compute_prior_stage(const ExperimentConfig& cfg);
Scalar train_portrait_stage(const ExperimentConfig& cfg);
Scalar train_motion_stage(const ExperimentConfig& cfg);
Scalar train_motion_diffusion_stage(const ExperimentConfig& cfg);
Scalar finetune_codebook_stage(const ExperimentConfig& cfg);

// Cosmetic portrait edit seam; the default keeps the portrait unchanged.
class PortraitEditor {
public:
    virtual ~PortraitEditor() = default;
    virtual Tensor edit(const Tensor& portrait) const { return portrait; }
};

// All trained stages, loaded and shape-checked against the config.
struct Stages {
    conre::ConreModel conre;
    prior::FacePrior face_prior;
    prior::Saw saw;
    diffusion::MlpDenoiser portrait;
    motion::MotionModel motion;
    motion::LipRefiner refiner;
    motion_diffusion::TemporalConvDenoiser mdiff;
    vq::Codebook book;
    vq::HrDecoder hr;

    Stages(const ExperimentConfig& cfg, uint64_t init_seed);
};

// Missing or mismatched checkpoints raise ConfigError naming the stage.
Stages load_stages(const ExperimentConfig& cfg);

struct GenerateResult {
    std::string frames_dir;
    int frame_count = 0;
    RunManifest manifest;
};

// speech -> portrait -> motion -> refined, codebook-decoded PNG frames.
GenerateResult generate_end_to_end(const std::string& speech_wav, const ExperimentConfig& cfg,
                                   const std::string& run_name = "gen",
                                   const PortraitEditor* editor = nullptr);

// Paired image metrics over matching filenames in two frame directories.
metrics::MetricReport evaluate_dirs(const std::string& gen_dir, const std::string& ref_dir,
                                    const ExperimentConfig& cfg);

// Full desk run: synthesizes a corpus when none is configured, trains every
// enabled stage, generates from a held-out clip and writes report + manifest.
metrics::MetricReport run_experiment(const ExperimentConfig& cfg);

}  // namespace ptalk::pipeline
