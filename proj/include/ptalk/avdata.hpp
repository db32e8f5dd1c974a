#pragma once

#include <complex>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ptalk/tensor.hpp"

namespace ptalk::avdata {

inline constexpr int kSampleRate = 16000;
inline constexpr int kClipSamples = 6 * kSampleRate;  // fixed 6-second clips
inline constexpr int kWinLength = 400;                // 25 ms
inline constexpr int kHopLength = 160;                // 10 ms
inline constexpr int kFftSize = 512;
inline constexpr int kBins = kFftSize / 2 + 1;
inline constexpr int kFps = 25;
inline constexpr int kHopsPerFrame = 4;  // 40 ms of speech per video frame

struct AudioClip {
    std::vector<Scalar> samples;  // mono, 16 kHz
    Scalar duration() const { return static_cast<Scalar>(samples.size()) / kSampleRate; }
};

struct Spectrogram {
    Tensor channels;  // (2, frames, kBins): power-law-compressed real, imaginary
    int frames() const { return channels.dim(1); }
    int bins() const { return channels.dim(2); }
};

// sgn(x)|x|^0.3, applied elementwise to both spectrogram channels.
Scalar power_law_compress(Scalar x);

AudioClip read_wav(const std::string& path);  // PCM16/float32; downmixed, resampled to 16 kHz
void write_wav(const std::string& path, const AudioClip& clip);

// Exactly 6 s: longer input is truncated, shorter input tiled then truncated.
AudioClip fix_length(const AudioClip& clip);

// In-place radix-2 FFT; size must be a power of two.
void fft(std::vector<std::complex<Scalar>>& a);

// Centered STFT (reflect padding, Hann window) with per-element power-law
// compression of the real and imaginary parts.
Spectrogram spectrogram(const AudioClip& clip);

// Band-averaged magnitudes per hop: (frames, n_bands) summary features.
Tensor frame_features(const Spectrogram& spec, int n_bands);

// Per-video-frame speech features at 25 FPS: mean of the 4 hops in each
// frame's 40 ms window.
Tensor align_speech_to_frames(const Tensor& hop_features, int n_frames);

int frames_for_duration(Scalar seconds);  // video frames covering the audio

Tensor read_png(const std::string& path);  // (C,H,W) in [0,1]
void write_png(const std::string& path, const Tensor& image);

// Box-filter (area-weighted) resampling.
Tensor resize_area(const Tensor& image, int out_h, int out_w);

struct FaceBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open [x0,x1) x [y0,y1)
    Scalar cx() const { return 0.5 * (x0 + x1); }
    Scalar cy() const { return 0.5 * (y0 + y1); }
};

// Crop to the box (the one nearest the target coordinate when several are
// given) and resize to out_size x out_size.
Tensor crop_resize_face(const Tensor& image, const std::vector<FaceBox>& boxes,
                        std::optional<std::pair<Scalar, Scalar>> target_coord = std::nullopt,
                        int out_size = 256);

// Injected media decoder; the codec layer is out of scope.
class VideoSource {
public:
    virtual ~VideoSource() = default;
    virtual int frame_count() const = 0;
    virtual Scalar fps() const = 0;
    virtual Tensor frame(int index) const = 0;  // (C,H,W) in [0,1]
};

// Frames on the 25 FPS timeline, each resized to out_size; sources smaller
// than out_size are rejected.
std::vector<Tensor> extract_frames(const VideoSource& src, int out_size = 256);

}  // namespace ptalk::avdata
