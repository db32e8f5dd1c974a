#include <cstdio>
#include <exception>
#include <fstream>
#include <string>

#include "CLI11.hpp"
#include "ptalk/errors.hpp"
#include "ptalk/pipeline.hpp"

namespace {

using ptalk::pipeline::ExperimentConfig;

ExperimentConfig load_config(const std::string& path) { return ExperimentConfig::load(path); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage speech-to-talking-face pipeline"};
    std::string config_path, raw_dir, out_dir, speech, run_name = "gen", gen_dir, ref_dir, report_path;
    int synth = 0;

    CLI::App* pre = app.add_subcommand("preprocess", "Raw wav/png corpus to processed samples");
    pre->add_option("--config", config_path, "Experiment config JSON")->required();
    pre->add_option("--raw", raw_dir, "Raw corpus directory")->required();
    pre->add_option("--out", out_dir, "Processed output directory")->required();
    pre->add_option("--synth", synth, "Write this many synthetic clips into --raw first");

    CLI::App* conre = app.add_subcommand("pretrain-conre", "Contrastive + reconstruction pretraining");
    conre->add_option("--config", config_path, "Experiment config JSON")->required();

    CLI::App* cprior = app.add_subcommand("compute-prior", "Mean face embedding over the dataset");
    cprior->add_option("--config", config_path, "Experiment config JSON")->required();

    CLI::App* tport = app.add_subcommand("train-portrait", "Prior-guided portrait diffusion");
    tport->add_option("--config", config_path, "Experiment config JSON")->required();

    CLI::App* tmot = app.add_subcommand("train-motion", "Warp/refine frame reconstruction");
    tmot->add_option("--config", config_path, "Experiment config JSON")->required();

    CLI::App* tmd = app.add_subcommand("train-motion-diffusion", "Speech-conditioned motion sequences");
    tmd->add_option("--config", config_path, "Experiment config JSON")->required();

    CLI::App* tvq = app.add_subcommand("finetune-codebook", "Codebook + high-res decoder");
    tvq->add_option("--config", config_path, "Experiment config JSON")->required();

    CLI::App* gen = app.add_subcommand("generate", "Speech to talking-face frames");
    gen->add_option("--config", config_path, "Experiment config JSON")->required();
    gen->add_option("--speech", speech, "Input wav (up to 6 s)")->required();
    gen->add_option("--run", run_name, "Run name under the output directory");

    CLI::App* eval = app.add_subcommand("evaluate", "Image metrics between two frame directories");
    eval->add_option("--config", config_path, "Experiment config JSON")->required();
    eval->add_option("--gen", gen_dir, "Generated frames")->required();
    eval->add_option("--ref", ref_dir, "Reference frames")->required();
    eval->add_option("--report", report_path, "Report JSON path")->required();

    app.require_subcommand(1);
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // usage problems are configuration errors
    }

    try {
        namespace pl = ptalk::pipeline;
        if (pre->parsed()) {
            const ExperimentConfig cfg = load_config(config_path);
            if (synth > 0) pl::write_synthetic_corpus(raw_dir, synth, cfg);
            const int count = pl::preprocess(raw_dir, out_dir, cfg);
            std::printf("preprocessed %d samples into %s\n", count, out_dir.c_str());
        } else if (conre->parsed()) {
            const ExperimentConfig cfg = load_config(config_path);
            std::printf("conre final loss %.6f\n", pl::train_conre_stage(cfg));
        } else if (cprior->parsed()) {
            const ExperimentConfig cfg = load_config(config_path);
            pl::compute_prior_stage(cfg);
            std::printf("prior written to %s\n", cfg.checkpoint_path("prior").c_str());
        } else if (tport->parsed()) {
            const ExperimentConfig cfg = load_config(config_path);
            std::printf("portrait final loss %.6f\n", pl::train_portrait_stage(cfg));
        } else if (tmot->parsed()) {
            const ExperimentConfig cfg = load_config(config_path);
            std::printf("motion final reconstruction loss %.6f\n", pl::train_motion_stage(cfg));
        } else if (tmd->parsed()) {
            const ExperimentConfig cfg = load_config(config_path);
            std::printf("motion-diffusion final loss %.6f\n", pl::train_motion_diffusion_stage(cfg));
        } else if (tvq->parsed()) {
            const ExperimentConfig cfg = load_config(config_path);
            std::printf("codebook final loss %.6f\n", pl::finetune_codebook_stage(cfg));
        } else if (gen->parsed()) {
            const ExperimentConfig cfg = load_config(config_path);
            const pl::GenerateResult res = pl::generate_end_to_end(speech, cfg, run_name);
            std::printf("wrote %d frames to %s\n", res.frame_count, res.frames_dir.c_str());
        } else if (eval->parsed()) {
            const ExperimentConfig cfg = load_config(config_path);
            const auto report = pl::evaluate_dirs(gen_dir, ref_dir, cfg);
            std::ofstream f(report_path);
            if (!f) throw ptalk::DataError("evaluate: cannot write " + report_path);
            f << report.to_json() << "\n";
            std::printf("report written to %s\n", report_path.c_str());
        }
        return 0;
    } catch (const ptalk::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ptalk::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const ptalk::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
