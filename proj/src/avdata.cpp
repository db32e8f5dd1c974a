#include "ptalk/avdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <png.h>

#include "ptalk/errors.hpp"

namespace ptalk::avdata {

Scalar power_law_compress(Scalar x) {
    return x >= 0.0 ? std::pow(x, 0.3) : -std::pow(-x, 0.3);
}

namespace {

uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t read_u16(std::ifstream& f) {
    unsigned char b[2];
    f.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ofstream& f, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    f.write(b, 4);
}

void write_u16(std::ofstream& f, uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    f.write(b, 2);
}

std::vector<Scalar> resample_linear(const std::vector<Scalar>& in, int rate_in, int rate_out) {
    if (rate_in == rate_out || in.empty()) return in;
    const size_t n_out =
        static_cast<size_t>(static_cast<double>(in.size()) * rate_out / rate_in);
    std::vector<Scalar> out(n_out);
    for (size_t i = 0; i < n_out; ++i) {
        const double pos = static_cast<double>(i) * rate_in / rate_out;
        const size_t i0 = std::min(static_cast<size_t>(pos), in.size() - 1);
        const size_t i1 = std::min(i0 + 1, in.size() - 1);
        const double frac = pos - static_cast<double>(i0);
        out[i] = (1.0 - frac) * in[i0] + frac * in[i1];
    }
    return out;
}

}  // namespace

AudioClip read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("wav: cannot open " + path);
    char tag[4];
    f.read(tag, 4);
    if (!f || std::memcmp(tag, "RIFF", 4) != 0) throw DataError("wav: not a RIFF file: " + path);
    read_u32(f);  // riff size
    f.read(tag, 4);
    if (!f || std::memcmp(tag, "WAVE", 4) != 0) throw DataError("wav: not a WAVE file: " + path);

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    std::vector<char> data;
    while (f.read(tag, 4)) {
        const uint32_t size = read_u32(f);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            format = read_u16(f);
            channels = read_u16(f);
            rate = read_u32(f);
            read_u32(f);  // byte rate
            read_u16(f);  // block align
            bits = read_u16(f);
            if (size > 16) f.seekg(size - 16, std::ios::cur);
        } else if (std::memcmp(tag, "data", 4) == 0) {
            data.resize(size);
            f.read(data.data(), size);
            if (!f) throw DataError("wav: truncated data chunk in " + path);
        } else {
            f.seekg(size + (size & 1), std::ios::cur);
        }
    }
    if (format == 0 || data.empty()) throw DataError("wav: missing fmt/data chunk in " + path);
    if (channels < 1) throw DataError("wav: zero channels in " + path);

    std::vector<Scalar> mono;
    if (format == 1 && bits == 16) {
        const size_t n = data.size() / 2 / channels;
        mono.resize(n);
        const auto* s = reinterpret_cast<const int16_t*>(data.data());
        for (size_t i = 0; i < n; ++i) {
            Scalar acc = 0.0;
            for (int c = 0; c < channels; ++c) acc += s[i * channels + c] / 32768.0;
            mono[i] = acc / channels;
        }
    } else if (format == 3 && bits == 32) {
        const size_t n = data.size() / 4 / channels;
        mono.resize(n);
        const auto* s = reinterpret_cast<const float*>(data.data());
        for (size_t i = 0; i < n; ++i) {
            Scalar acc = 0.0;
            for (int c = 0; c < channels; ++c) acc += s[i * channels + c];
            mono[i] = acc / channels;
        }
    } else {
        throw DataError("wav: unsupported encoding (format " + std::to_string(format) + ", " +
                        std::to_string(bits) + " bit) in " + path);
    }
    return AudioClip{resample_linear(mono, static_cast<int>(rate), kSampleRate)};
}

void write_wav(const std::string& path, const AudioClip& clip) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("wav: cannot open for write " + path);
    const uint32_t data_bytes = static_cast<uint32_t>(clip.samples.size() * 2);
    f.write("RIFF", 4);
    write_u32(f, 36 + data_bytes);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    write_u32(f, 16);
    write_u16(f, 1);  // PCM
    write_u16(f, 1);  // mono
    write_u32(f, kSampleRate);
    write_u32(f, kSampleRate * 2);
    write_u16(f, 2);
    write_u16(f, 16);
    f.write("data", 4);
    write_u32(f, data_bytes);
    for (Scalar v : clip.samples) {
        const int s = static_cast<int>(std::lround(std::clamp(v, -1.0, 1.0) * 32767.0));
        write_u16(f, static_cast<uint16_t>(static_cast<int16_t>(s)));
    }
    if (!f) throw DataError("wav: write failed " + path);
}

AudioClip fix_length(const AudioClip& clip) {
    if (clip.samples.empty()) throw std::invalid_argument("fix_length: empty audio");
    AudioClip out;
    out.samples.reserve(kClipSamples);
    while (out.samples.size() < static_cast<size_t>(kClipSamples)) {
        const size_t take =
            std::min(clip.samples.size(), static_cast<size_t>(kClipSamples) - out.samples.size());
        out.samples.insert(out.samples.end(), clip.samples.begin(),
                           clip.samples.begin() + static_cast<std::ptrdiff_t>(take));
    }
    return out;
}

void fft(std::vector<std::complex<Scalar>>& a) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft: size must be a power of two");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const Scalar ang = -2.0 * std::numbers::pi_v<Scalar> / static_cast<Scalar>(len);
        const std::complex<Scalar> wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<Scalar> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                const std::complex<Scalar> u = a[i + k];
                const std::complex<Scalar> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

Spectrogram spectrogram(const AudioClip& clip) {
    if (clip.samples.size() != static_cast<size_t>(kClipSamples))
        throw std::invalid_argument("spectrogram: expected a fixed 6 s clip (" +
                                    std::to_string(kClipSamples) + " samples), got " +
                                    std::to_string(clip.samples.size()));
    const int pad = kWinLength / 2;
    std::vector<Scalar> padded(clip.samples.size() + 2 * static_cast<size_t>(pad));
    for (int i = 0; i < pad; ++i) padded[static_cast<size_t>(i)] = clip.samples[static_cast<size_t>(pad - i)];
    std::copy(clip.samples.begin(), clip.samples.end(), padded.begin() + pad);
    const size_t n = clip.samples.size();
    for (int i = 0; i < pad; ++i)
        padded[n + static_cast<size_t>(pad) + static_cast<size_t>(i)] =
            clip.samples[n - 2 - static_cast<size_t>(i)];

    std::vector<Scalar> window(kWinLength);
    for (int i = 0; i < kWinLength; ++i)
        window[static_cast<size_t>(i)] =
            0.5 * (1.0 - std::cos(2.0 * std::numbers::pi_v<Scalar> * i / kWinLength));

    const int n_frames = static_cast<int>(n) / kHopLength + 1;
    Spectrogram spec;
    spec.channels = Tensor({2, n_frames, kBins});
    std::vector<std::complex<Scalar>> buf(kFftSize);
    for (int t = 0; t < n_frames; ++t) {
        const size_t start = static_cast<size_t>(t) * kHopLength;
        for (int i = 0; i < kWinLength; ++i)
            buf[static_cast<size_t>(i)] = padded[start + static_cast<size_t>(i)] * window[static_cast<size_t>(i)];
        for (int i = kWinLength; i < kFftSize; ++i) buf[static_cast<size_t>(i)] = 0.0;
        fft(buf);
        for (int b = 0; b < kBins; ++b) {
            spec.channels.at(0, t, b) = power_law_compress(buf[static_cast<size_t>(b)].real());
            spec.channels.at(1, t, b) = power_law_compress(buf[static_cast<size_t>(b)].imag());
        }
    }
    return spec;
}

Tensor frame_features(const Spectrogram& spec, int n_bands) {
    if (n_bands < 1 || n_bands > spec.bins())
        throw std::invalid_argument("frame_features: bad band count " + std::to_string(n_bands));
    const int f = spec.frames(), bins = spec.bins();
    Tensor out({f, n_bands}, 0.0);
    for (int t = 0; t < f; ++t)
        for (int band = 0; band < n_bands; ++band) {
            const int b0 = band * bins / n_bands;
            const int b1 = (band + 1) * bins / n_bands;
            Scalar acc = 0.0;
            for (int b = b0; b < b1; ++b)
                acc += std::hypot(spec.channels.at(0, t, b), spec.channels.at(1, t, b));
            out.at(t, band) = acc / std::max(b1 - b0, 1);
        }
    return out;
}

Tensor align_speech_to_frames(const Tensor& hop_features, int n_frames) {
    if (hop_features.rank() != 2) throw std::invalid_argument("align_speech_to_frames: expects (hops,d)");
    if (n_frames < 1) throw std::invalid_argument("align_speech_to_frames: n_frames < 1");
    const int hops = hop_features.dim(0), d = hop_features.dim(1);
    if (n_frames * kHopsPerFrame > hops)
        throw std::invalid_argument("align_speech_to_frames: " + std::to_string(n_frames) +
                                    " frames need " + std::to_string(n_frames * kHopsPerFrame) +
                                    " hops, have " + std::to_string(hops));
    Tensor out({n_frames, d}, 0.0);
    for (int i = 0; i < n_frames; ++i)
        for (int j = 0; j < d; ++j) {
            Scalar acc = 0.0;
            for (int k = 0; k < kHopsPerFrame; ++k) acc += hop_features.at(i * kHopsPerFrame + k, j);
            out.at(i, j) = acc / kHopsPerFrame;
        }
    return out;
}

int frames_for_duration(Scalar seconds) {
    if (!(seconds > 0.0)) throw std::invalid_argument("frames_for_duration: non-positive duration");
    return static_cast<int>(std::floor(seconds * kFps));
}

Tensor read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (fp == nullptr) throw DataError("png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (info == nullptr) {
        if (png != nullptr) png_destroy_read_struct(&png, nullptr, nullptr);
        std::fclose(fp);
        throw DataError("png: allocation failure reading " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw DataError("png: corrupt file " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int channels = static_cast<int>(png_get_channels(png, info));
    std::vector<png_byte> row(static_cast<size_t>(w) * static_cast<size_t>(channels));
    Tensor img({channels, h, w});
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(c, y, x) = row[static_cast<size_t>(x) * channels + c] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

void write_png(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
        throw std::invalid_argument("png: image must be (1|3,H,W), got " + shape_str(image.shape));
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (fp == nullptr) throw DataError("png: cannot open for write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (info == nullptr) {
        if (png != nullptr) png_destroy_write_struct(&png, nullptr);
        std::fclose(fp);
        throw DataError("png: allocation failure writing " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw DataError("png: write failure " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(w) * static_cast<size_t>(c));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int i = 0; i < c; ++i)
                row[static_cast<size_t>(x) * c + i] = static_cast<png_byte>(
                    std::lround(std::clamp(image.at(i, y, x), 0.0, 1.0) * 255.0));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Tensor resize_area(const Tensor& image, int out_h, int out_w) {
    if (image.rank() != 3) throw std::invalid_argument("resize_area: expects (C,H,W)");
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_area: non-positive output size");
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const Scalar sy = static_cast<Scalar>(h) / out_h;
    const Scalar sx = static_cast<Scalar>(w) / out_w;
    Tensor out({c, out_h, out_w}, 0.0);
    for (int oy = 0; oy < out_h; ++oy) {
        const Scalar y0 = oy * sy, y1 = (oy + 1) * sy;
        for (int ox = 0; ox < out_w; ++ox) {
            const Scalar x0 = ox * sx, x1 = (ox + 1) * sx;
            for (int i = 0; i < c; ++i) {
                Scalar acc = 0.0;
                for (int y = static_cast<int>(y0); y < y1 && y < h; ++y) {
                    const Scalar wy = std::min<Scalar>(y + 1, y1) - std::max<Scalar>(y, y0);
                    if (wy <= 0.0) continue;
                    for (int x = static_cast<int>(x0); x < x1 && x < w; ++x) {
                        const Scalar wx = std::min<Scalar>(x + 1, x1) - std::max<Scalar>(x, x0);
                        if (wx > 0.0) acc += image.at(i, y, x) * wy * wx;
                    }
                }
                out.at(i, oy, ox) = acc / (sy * sx);
            }
        }
    }
    return out;
}

Tensor crop_resize_face(const Tensor& image, const std::vector<FaceBox>& boxes,
                        std::optional<std::pair<Scalar, Scalar>> target_coord, int out_size) {
    if (image.rank() != 3) throw std::invalid_argument("crop_resize_face: expects (C,H,W)");
    if (boxes.empty()) throw DataError("crop_resize_face: no face box detected or supplied");
    size_t chosen = 0;
    if (boxes.size() > 1) {
        if (!target_coord.has_value())
            throw std::invalid_argument("crop_resize_face: several boxes but no target coordinate");
        Scalar best = -1.0;
        for (size_t i = 0; i < boxes.size(); ++i) {
            const Scalar dx = boxes[i].cx() - target_coord->first;
            const Scalar dy = boxes[i].cy() - target_coord->second;
            const Scalar d2 = dx * dx + dy * dy;
            if (best < 0.0 || d2 < best) {
                best = d2;
                chosen = i;
            }
        }
    }
    const FaceBox& b = boxes[chosen];
    const int h = image.dim(1), w = image.dim(2);
    const int x0 = std::clamp(b.x0, 0, w), x1 = std::clamp(b.x1, 0, w);
    const int y0 = std::clamp(b.y0, 0, h), y1 = std::clamp(b.y1, 0, h);
    if (x1 <= x0 || y1 <= y0) throw std::invalid_argument("crop_resize_face: empty box");
    Tensor crop({image.dim(0), y1 - y0, x1 - x0});
    for (int i = 0; i < image.dim(0); ++i)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) crop.at(i, y - y0, x - x0) = image.at(i, y, x);
    if (crop.dim(1) == out_size && crop.dim(2) == out_size) return crop;
    return resize_area(crop, out_size, out_size);
}

std::vector<Tensor> extract_frames(const VideoSource& src, int out_size) {
    if (src.frame_count() < 1) throw DataError("extract_frames: empty source");
    if (!(src.fps() > 0.0)) throw DataError("extract_frames: non-positive source fps");
    const Scalar duration = src.frame_count() / src.fps();
    const int n_out = static_cast<int>(std::floor(duration * kFps + 1e-9));
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(n_out));
    for (int i = 0; i < n_out; ++i) {
        const int idx = std::min(static_cast<int>(std::lround(i / static_cast<Scalar>(kFps) * src.fps())),
                                 src.frame_count() - 1);
        Tensor frame = src.frame(idx);
        if (frame.rank() != 3) throw DataError("extract_frames: source frame must be (C,H,W)");
        if (frame.dim(1) < out_size || frame.dim(2) < out_size)
            throw DataError("extract_frames: source resolution " + std::to_string(frame.dim(2)) + "x" +
                            std::to_string(frame.dim(1)) + " below required " + std::to_string(out_size) +
                            "x" + std::to_string(out_size));
        out.push_back(frame.dim(1) == out_size && frame.dim(2) == out_size
                          ? std::move(frame)
                          : resize_area(frame, out_size, out_size));
    }
    return out;
}

}  // namespace ptalk::avdata
