#include "ptalk/vq.hpp"

#include <cmath>

#include "ptalk/errors.hpp"

namespace ptalk::vq {

Codebook::Codebook(int n_codes, int dim, uint64_t seed, Scalar init_scale) {
    if (n_codes < 1 || dim < 1) throw std::invalid_argument("Codebook: need n_codes >= 1 and dim >= 1");
    SeedStream rng(seed, "vq/codebook");
    entries = nn::Parameter("vq.entries", rng.normal_tensor({n_codes, dim}, init_scale));
}

QuantizedLatent quantize(const Tensor& z_grid, const Codebook& book) {
    if (book.entries.value.rank() != 2 || book.entries.value.dim(0) < 1)
        throw std::invalid_argument("quantize: empty codebook");
    if (z_grid.rank() != 3 || z_grid.dim(2) != book.dim())
        throw std::invalid_argument("quantize: grid must be (m,n," + std::to_string(book.dim()) +
                                    "), got " + shape_str(z_grid.shape));
    const int m = z_grid.dim(0), n = z_grid.dim(1), d = book.dim(), nc = book.size();
    QuantizedLatent q;
    q.rows = m;
    q.cols = n;
    q.indices.resize(static_cast<size_t>(m) * n);
    q.values = Tensor({m, n, d});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            int best = 0;
            Scalar best_d2 = 0.0;
            for (int k = 0; k < nc; ++k) {
                Scalar d2 = 0.0;
                for (int c = 0; c < d; ++c) {
                    const Scalar diff = z_grid.at(i, j, c) - book.entries.value.at(k, c);
                    d2 += diff * diff;
                }
                if (k == 0 || d2 < best_d2) {  // strict: equals keep the lower index
                    best = k;
                    best_d2 = d2;
                }
            }
            q.indices[static_cast<size_t>(i) * n + j] = best;
            for (int c = 0; c < d; ++c) q.values.at(i, j, c) = book.entries.value.at(best, c);
        }
    return q;
}

Tensor map_to_grid(const Tensor& chw) {
    if (chw.rank() != 3) throw std::invalid_argument("map_to_grid: expects (C,H,W)");
    const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    Tensor grid({h, w, c});
    for (int i = 0; i < c; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) grid.at(y, x, i) = chw.at(i, y, x);
    return grid;
}

Tensor grid_to_map(const Tensor& grid) {
    if (grid.rank() != 3) throw std::invalid_argument("grid_to_map: expects (H,W,C)");
    const int h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
    Tensor chw({c, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int i = 0; i < c; ++i) chw.at(i, y, x) = grid.at(y, x, i);
    return chw;
}

Tensor map_to_rows(const Tensor& chw) {
    if (chw.rank() != 3) throw std::invalid_argument("map_to_rows: expects (C,H,W)");
    const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    return map_to_grid(chw).reshaped({h * w, c});
}

Tensor rows_to_map(const Tensor& rows, int h, int w) {
    if (rows.rank() != 2 || rows.dim(0) != h * w)
        throw std::invalid_argument("rows_to_map: rows must be (" + std::to_string(h * w) + ",d)");
    return grid_to_map(rows.reshaped({h, w, rows.dim(1)}));
}

namespace {

std::vector<int> nearest_indices(const Tensor& rows, const Codebook& book) {
    const int p = rows.dim(0), d = rows.dim(1), nc = book.size();
    std::vector<int> idx(static_cast<size_t>(p));
    for (int r = 0; r < p; ++r) {
        int best = 0;
        Scalar best_d2 = 0.0;
        for (int k = 0; k < nc; ++k) {
            Scalar d2 = 0.0;
            for (int c = 0; c < d; ++c) {
                const Scalar diff = rows.at(r, c) - book.entries.value.at(k, c);
                d2 += diff * diff;
            }
            if (k == 0 || d2 < best_d2) {
                best = k;
                best_d2 = d2;
            }
        }
        idx[static_cast<size_t>(r)] = best;
    }
    return idx;
}

}  // namespace

ad::Var quantize_st(ad::Tape& tape, ad::Var z_rows, const Codebook& book,
                    std::vector<int>* indices_out) {
    if (book.entries.value.rank() != 2 || book.entries.value.dim(0) < 1)
        throw std::invalid_argument("quantize_st: empty codebook");
    const Tensor& zv = z_rows.val();
    if (zv.rank() != 2 || zv.dim(1) != book.dim())
        throw std::invalid_argument("quantize_st: rows must be (P," + std::to_string(book.dim()) + ")");
    std::vector<int> idx = nearest_indices(zv, book);
    Tensor delta({zv.dim(0), zv.dim(1)});
    for (int r = 0; r < zv.dim(0); ++r)
        for (int c = 0; c < zv.dim(1); ++c)
            delta.at(r, c) = book.entries.value.at(idx[static_cast<size_t>(r)], c) - zv.at(r, c);
    if (indices_out != nullptr) *indices_out = std::move(idx);
    // value z + (z_q - z) = z_q; the correction is a constant, so gradients
    // reach z as if quantization were the identity
    return tape.add(z_rows, tape.constant(std::move(delta)));
}

Scalar code_loss_value(const Tensor& z_wr, const Tensor& z_q, Scalar commitment_weight) {
    if (commitment_weight < 0.0) throw std::invalid_argument("code_loss: negative commitment weight");
    require_same_shape(z_wr, z_q, "code_loss");
    Scalar m = 0.0;
    for (int64_t i = 0; i < z_wr.size(); ++i) {
        const Scalar diff = z_wr[i] - z_q[i];
        m += diff * diff;
    }
    m /= static_cast<Scalar>(z_wr.size());
    return m + commitment_weight * m;
}

ad::Var code_loss(ad::Tape& tape, ad::Var z_rows, Codebook& book, const std::vector<int>& indices,
                  Scalar commitment_weight) {
    if (commitment_weight < 0.0) throw std::invalid_argument("code_loss: negative commitment weight");
    ad::Var codewords = tape.gather_rows(book.entries.use(tape), indices);
    ad::Var pull_codes = tape.mse(tape.constant(z_rows.val()), codewords);
    if (commitment_weight == 0.0) return pull_codes;
    ad::Var commit = tape.mse(z_rows, tape.constant(codewords.val()));
    return tape.add(pull_codes, tape.smul(commit, commitment_weight));
}

HrDecoder::HrDecoder(int code_dim, int channels, int scale, int width, uint64_t seed) : scale_(scale) {
    if (scale != 2 && scale != 4) throw std::invalid_argument("HrDecoder: scale must be 2 or 4");
    SeedStream rng(seed, "vq/hr_decoder");
    in_ = nn::Conv2d("hrd.in", code_dim, width, 3, 1, 1, rng);
    for (int r = 0; scale >> (r + 1); ++r)
        ups_.emplace_back("hrd.up" + std::to_string(r), width, width, 3, 1, 1, rng);
    out_ = nn::Conv2d("hrd.out", width, channels, 3, 1, 1, rng);
}

ad::Var HrDecoder::decode(ad::Tape& t, ad::Var zq_map) {
    ad::Var h = t.tanh_(in_(t, zq_map));
    for (nn::Conv2d& up : ups_) h = t.tanh_(up(t, t.upsample2x(h)));
    return t.sigmoid_(out_(t, h));
}

Tensor HrDecoder::decode_tensor(const Tensor& zq_map) {
    ad::Tape t;
    return decode(t, t.constant(zq_map)).val();
}

void HrDecoder::collect(std::vector<nn::Parameter*>& out) {
    in_.collect(out);
    for (nn::Conv2d& up : ups_) up.collect(out);
    out_.collect(out);
}

Tensor decode_hr(const QuantizedLatent& zq, HrDecoder& decoder) {
    return decoder.decode_tensor(grid_to_map(zq.values));
}

std::vector<Scalar> finetune_codebook(Codebook& book, HrDecoder& decoder,
                                      const std::vector<Tensor>& latent_maps,
                                      const std::vector<Tensor>& targets, const VqTrainConfig& cfg) {
    if (latent_maps.empty() || latent_maps.size() != targets.size())
        throw std::invalid_argument("finetune_codebook: need equal nonzero latent/target counts");
    std::vector<nn::Parameter*> params = book.parameters();
    decoder.collect(params);
    nn::Adam opt(params, cfg.lr);
    std::vector<Scalar> history;
    history.reserve(static_cast<size_t>(cfg.steps));
    for (int s = 0; s < cfg.steps; ++s) {
        const size_t i = static_cast<size_t>(s) % latent_maps.size();
        const Tensor& lat = latent_maps[i];
        const int h = lat.dim(1), w = lat.dim(2);
        ad::Tape t;
        ad::Var rows = t.constant(map_to_rows(lat));
        std::vector<int> idx = nearest_indices(rows.val(), book);
        // decoder consumes the codebook rows directly so its gradient shapes
        // the codewords as well
        ad::Var code_rows = t.gather_rows(book.entries.use(t), idx);
        ad::Var zq_map = t.reshape(t.transpose2d(code_rows), {book.dim(), h, w});
        ad::Var recon = decoder.decode(t, zq_map);
        ad::Var loss = t.mse(t.constant(targets[i]), recon);
        if (cfg.code_loss_weight > 0.0)
            loss = t.add(loss, t.smul(code_loss(t, rows, book, idx, cfg.commitment_weight),
                                      cfg.code_loss_weight));
        if (!loss.val().all_finite())
            throw NumericError("finetune_codebook: non-finite loss at step " + std::to_string(s));
        for (nn::Parameter* p : params) p->zero_grad();
        t.backward(loss);
        opt.step();
        history.push_back(loss.val()[0]);
    }
    return history;
}

}  // namespace ptalk::vq
