#include "ptalk/conre.hpp"

#include <cmath>

#include "ptalk/errors.hpp"

namespace ptalk::conre {

Temperature::Temperature(Scalar tau_init) {
    if (!(tau_init > 0.0)) throw std::invalid_argument("Temperature: tau must be positive");
    log_tau = nn::Parameter("conre.log_tau", Tensor({1}, std::log(tau_init)));
}

ad::Var contrastive_loss(ad::Tape& t, ad::Var speech_embeds, ad::Var face_embeds, Temperature& temp,
                         bool allow_single) {
    const Tensor& sv = speech_embeds.val();
    const Tensor& fv = face_embeds.val();
    if (sv.rank() != 2 || fv.rank() != 2)
        throw std::invalid_argument("contrastive_loss: embeddings must be (B,d)");
    require_same_shape(sv, fv, "contrastive_loss");
    if (sv.dim(0) < 2 && !allow_single)
        throw std::invalid_argument("contrastive_loss: batch size must be >= 2");

    ad::Var sn = t.l2_normalize_rows(speech_embeds);
    ad::Var fn = t.l2_normalize_rows(face_embeds);
    ad::Var logits = t.scale_by(t.matmul(sn, t.transpose2d(fn)), temp.inv_tau(t));
    ad::Var fwd = t.softmax_ce_diag(logits);
    ad::Var bwd = t.softmax_ce_diag(t.transpose2d(logits));
    return t.smul(t.add(fwd, bwd), 0.5);
}

Scalar contrastive_loss_value(const Tensor& speech_embeds, const Tensor& face_embeds, Temperature& temp,
                              bool allow_single) {
    ad::Tape t;
    return contrastive_loss(t, t.constant(speech_embeds), t.constant(face_embeds), temp, allow_single)
        .val()[0];
}

ad::Var reconstruction_loss(ad::Tape& t, ad::Var original, ad::Var reconstructed,
                            features::FeatureExtractor& fx) {
    require_same_shape(original.val(), reconstructed.val(), "reconstruction_loss");
    return t.add(t.mae(original, reconstructed), features::perceptual_l2(t, fx, original, reconstructed));
}

SpeechEncoder::SpeechEncoder(int in_channels, int width, int embed_dim, uint64_t seed) {
    SeedStream rng(seed, "conre/speech_encoder");
    c1_ = nn::Conv2d("spe.c1", in_channels, width, 3, 2, 1, rng);
    c2_ = nn::Conv2d("spe.c2", width, width, 3, 2, 1, rng);
    attn_ = nn::Linear("spe.attn", width, width, rng);
    proj_ = nn::Linear("spe.proj", width, embed_dim, rng);
}

ad::Var SpeechEncoder::encode(ad::Tape& t, const Tensor& spectrogram) {
    if (spectrogram.rank() != 3)
        throw std::invalid_argument("SpeechEncoder: expects (channels, frames, bins)");
    ad::Var h = t.tanh_(c1_(t, t.constant(spectrogram)));
    h = t.tanh_(c2_(t, h));
    // squeeze-excite: gate channels by a sigmoid of their pooled response
    ad::Var pooled = t.reshape(t.channel_mean(h), {1, attn_.w.value.dim(0)});
    ad::Var gate = t.sigmoid_(attn_(t, pooled));
    h = t.channel_scale(h, t.reshape(gate, {attn_.w.value.dim(1)}));
    ad::Var flat = t.reshape(t.channel_mean(h), {1, proj_.w.value.dim(0)});
    return t.reshape(proj_(t, flat), {embed_dim()});
}

void SpeechEncoder::collect(std::vector<nn::Parameter*>& out) {
    c1_.collect(out);
    c2_.collect(out);
    attn_.collect(out);
    proj_.collect(out);
}

FaceEncoder::FaceEncoder(int channels, int width, int embed_dim, uint64_t seed) {
    SeedStream rng(seed, "conre/face_encoder");
    c1_ = nn::Conv2d("fae.c1", channels, width, 3, 2, 1, rng);
    c2_ = nn::Conv2d("fae.c2", width, width, 3, 2, 1, rng);
    proj_ = nn::Linear("fae.proj", width, embed_dim, rng);
}

ad::Var FaceEncoder::encode(ad::Tape& t, const Tensor& image) {
    if (image.rank() != 3) throw std::invalid_argument("FaceEncoder: expects (C,H,W)");
    ad::Var h = t.tanh_(c1_(t, t.constant(image)));
    h = t.tanh_(c2_(t, h));
    ad::Var flat = t.reshape(t.channel_mean(h), {1, proj_.w.value.dim(0)});
    return t.reshape(proj_(t, flat), {embed_dim()});
}

void FaceEncoder::collect(std::vector<nn::Parameter*>& out) {
    c1_.collect(out);
    c2_.collect(out);
    proj_.collect(out);
}

FaceDecoder::FaceDecoder(int embed_dim, int channels, int size, int width, uint64_t seed)
    : size_(size), channels_(channels), width_(width) {
    if (size % 4 != 0 || size < 4) throw std::invalid_argument("FaceDecoder: size must be a multiple of 4");
    SeedStream rng(seed, "conre/face_decoder");
    const int base = size / 4;
    expand_ = nn::Linear("fad.expand", embed_dim, width * base * base, rng);
    c1_ = nn::Conv2d("fad.c1", width, width, 3, 1, 1, rng);
    c2_ = nn::Conv2d("fad.c2", width, channels, 3, 1, 1, rng);
}

ad::Var FaceDecoder::decode(ad::Tape& t, ad::Var embedding) {
    const int d = expand_.w.value.dim(0);
    ad::Var e = embedding.val().rank() == 1 ? t.reshape(embedding, {1, d}) : embedding;
    const int base = size_ / 4;
    ad::Var h = t.reshape(t.tanh_(expand_(t, e)), {width_, base, base});
    h = t.tanh_(c1_(t, t.upsample2x(h)));
    return t.sigmoid_(c2_(t, t.upsample2x(h)));
}

Tensor FaceDecoder::decode_tensor(const Tensor& embedding) {
    ad::Tape t;
    return decode(t, t.constant(embedding)).val();
}

void FaceDecoder::collect(std::vector<nn::Parameter*>& out) {
    expand_.collect(out);
    c1_.collect(out);
    c2_.collect(out);
}

ConreParts conre_loss(ad::Tape& t, const PairBatch& batch, Temperature& temp, FaceDecoder& decoder,
                      features::FeatureExtractor& fx, bool allow_single) {
    const int B = batch.speech_embeds.dim(0);
    if (static_cast<int>(batch.images.size()) != B)
        throw std::invalid_argument("conre_loss: image count != batch size");
    ad::Var lc = contrastive_loss(t, t.constant(batch.speech_embeds), t.constant(batch.face_embeds),
                                  temp, allow_single);
    ad::Var lr = t.constant_scalar(0.0);
    const int d = batch.face_embeds.dim(1);
    for (int i = 0; i < B; ++i) {
        Tensor emb({d});
        for (int j = 0; j < d; ++j) emb[j] = batch.face_embeds.at(i, j);
        ad::Var rec = decoder.decode(t, t.constant(emb));
        lr = t.add(lr, reconstruction_loss(t, t.constant(batch.images[static_cast<size_t>(i)]), rec, fx));
    }
    lr = t.smul(lr, 1.0 / B);
    return ConreParts{t.add(lc, lr), lc, lr};
}

ConreModel::ConreModel(int spec_channels, int image_channels, int image_size, int width, int embed_dim,
                       uint64_t seed)
    : speech(spec_channels, width, embed_dim, seed),
      face(image_channels, width, embed_dim, seed + 1),
      decoder(embed_dim, image_channels, image_size, width, seed + 2) {}

void ConreModel::collect(std::vector<nn::Parameter*>& out) {
    speech.collect(out);
    face.collect(out);
    decoder.collect(out);
    temp.collect(out);
}

ConreParts conre_training_loss(ad::Tape& t, ConreModel& model, const std::vector<Tensor>& spectrograms,
                               const std::vector<Tensor>& images, features::FeatureExtractor& fx) {
    if (spectrograms.size() != images.size() || spectrograms.empty())
        throw std::invalid_argument("conre_training_loss: need equal nonzero counts of spectrograms and images");
    const int B = static_cast<int>(images.size());
    std::vector<ad::Var> srows, frows;
    for (int i = 0; i < B; ++i) {
        srows.push_back(model.speech.encode(t, spectrograms[static_cast<size_t>(i)]));
        frows.push_back(model.face.encode(t, images[static_cast<size_t>(i)]));
    }
    ad::Var se = t.stack_rows(srows);
    ad::Var fe = t.stack_rows(frows);
    ad::Var lc = contrastive_loss(t, se, fe, model.temp, B == 1);
    ad::Var lr = t.constant_scalar(0.0);
    for (int i = 0; i < B; ++i) {
        ad::Var rec = model.decoder.decode(t, frows[static_cast<size_t>(i)]);
        lr = t.add(lr, reconstruction_loss(t, t.constant(images[static_cast<size_t>(i)]), rec, fx));
    }
    lr = t.smul(lr, 1.0 / B);
    return ConreParts{t.add(lc, lr), lc, lr};
}

std::vector<Scalar> pretrain_conre(ConreModel& model, const std::vector<Tensor>& spectrograms,
                                   const std::vector<Tensor>& images, features::FeatureExtractor& fx,
                                   int steps, Scalar lr) {
    nn::Adam opt(model.parameters(), lr);
    std::vector<Scalar> history;
    history.reserve(static_cast<size_t>(steps));
    for (int s = 0; s < steps; ++s) {
        ad::Tape t;
        ConreParts parts = conre_training_loss(t, model, spectrograms, images, fx);
        if (!parts.total.val().all_finite())
            throw NumericError("pretrain_conre: non-finite loss at step " + std::to_string(s));
        model.zero_grad();
        t.backward(parts.total);
        opt.step();
        history.push_back(parts.total.val()[0]);
    }
    return history;
}

}  // namespace ptalk::conre
