#pragma once

#include <cstdint>
#include <vector>

#include "ptalk/nn.hpp"
#include "ptalk/tensor.hpp"

namespace ptalk::vq {

class Codebook : public nn::Module {
public:
    Codebook() = default;
    Codebook(int n_codes, int dim, uint64_t seed, Scalar init_scale = 1.0);

    int size() const { return entries.value.dim(0); }
    int dim() const { return entries.value.dim(1); }
    void collect(std::vector<nn::Parameter*>& out) override { out.push_back(&entries); }

    nn::Parameter entries;  // (N_c, d)
};

// Codeword assignment over an (m,n,d) grid; values[i,j] is an exact copy of
// the chosen codeword.
struct QuantizedLatent {
    int rows = 0, cols = 0;
    std::vector<int> indices;  // row-major m*n
    Tensor values;             // (m,n,d)

    int index_at(int i, int j) const { return indices[static_cast<size_t>(i) * cols + j]; }
};

// Nearest codeword per pixel by squared distance; ties go to the lowest index.
QuantizedLatent quantize(const Tensor& z_grid, const Codebook& book);

// (C,H,W) map <-> (H,W,C) grid / (H*W,C) rows, for feeding conv latents
// through the per-pixel codebook.
Tensor map_to_grid(const Tensor& chw);
Tensor grid_to_map(const Tensor& grid);
Tensor map_to_rows(const Tensor& chw);
Tensor rows_to_map(const Tensor& rows, int h, int w);

// Straight-through quantization of (P,d) rows: forward emits the codeword
// values, backward passes gradients to z unchanged. Chosen indices optionally
// reported.
ad::Var quantize_st(ad::Tape& tape, ad::Var z_rows, const Codebook& book,
                    std::vector<int>* indices_out = nullptr);

// mean((sg(z)-z_q)^2) + w * mean((z-sg(z_q))^2) over precomputed values.
Scalar code_loss_value(const Tensor& z_wr, const Tensor& z_q, Scalar commitment_weight);

// Tape version wired for training: the first term pulls the indexed codebook
// rows toward z, the second (weighted) term pulls z toward the codewords.
ad::Var code_loss(ad::Tape& tape, ad::Var z_rows, Codebook& book, const std::vector<int>& indices,
                  Scalar commitment_weight);

// Latent map (d,m,n) to an image at 2x or 4x spatial scale, range (0,1).
class HrDecoder : public nn::Module {
public:
    HrDecoder() = default;
    HrDecoder(int code_dim, int channels, int scale, int width, uint64_t seed);

    ad::Var decode(ad::Tape& tape, ad::Var zq_map);
    Tensor decode_tensor(const Tensor& zq_map);
    int scale() const { return scale_; }
    void collect(std::vector<nn::Parameter*>& out) override;

private:
    int scale_ = 2;
    nn::Conv2d in_;
    std::vector<nn::Conv2d> ups_;
    nn::Conv2d out_;
};

Tensor decode_hr(const QuantizedLatent& zq, HrDecoder& decoder);

struct VqTrainConfig {
    int steps = 1000;
    Scalar lr = 1e-2;
    Scalar commitment_weight = 0.25;
    Scalar code_loss_weight = 1.0;
};

// Joint codebook + decoder fit: reconstruct targets from quantized latents.
// Returns per-step total loss.
std::vector<Scalar> finetune_codebook(Codebook& book, HrDecoder& decoder,
                                      const std::vector<Tensor>& latent_maps,
                                      const std::vector<Tensor>& targets, const VqTrainConfig& cfg);

}  // namespace ptalk::vq
