// dsp.hpp -- audio front-end: resampling, framing, windowing, power spectra,
// Mel filterbanks and MFCC/log-Mel feature extraction.
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "kwsbias/common.hpp"

namespace kwsbias {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

struct AudioClip {
    std::vector<double> samples;  // mono, nominally in [-1, 1]
    int sample_rate = 16000;
    int duration_ms = 0;
};

inline AudioClip make_clip(std::vector<double> samples, int sample_rate) {
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.duration_ms = static_cast<int>(std::lround(
        1000.0 * static_cast<double>(samples.size()) / static_cast<double>(sample_rate)));
    clip.samples = std::move(samples);
    return clip;
}

enum class FeatureType { log_mel, mfcc };
enum class WindowFn { hamming, hann };

inline const char* to_string(FeatureType t) {
    return t == FeatureType::log_mel ? "log_mel" : "mfcc";
}

inline const char* to_string(WindowFn w) {
    return w == WindowFn::hamming ? "hamming" : "hann";
}

inline FeatureType feature_type_from_string(const std::string& s) {
    if (s == "log_mel") return FeatureType::log_mel;
    if (s == "mfcc") return FeatureType::mfcc;
    fail(ErrorCode::invalid_config, "unknown feature type '" + s + "'");
}

inline WindowFn window_fn_from_string(const std::string& s) {
    if (s == "hamming") return WindowFn::hamming;
    if (s == "hann") return WindowFn::hann;
    fail(ErrorCode::invalid_config, "unknown window function '" + s + "'");
}

// Feature extraction parameters. The discrete domains below are the supported
// experiment grid; validate() enforces them so that sweep configurations and
// ad-hoc runs agree on what a legal configuration is.
struct FeatureConfig {
    int sample_rate = 16000;                 // Hz, 8000 or 16000
    FeatureType feature_type = FeatureType::mfcc;
    int num_mel_banks = 40;                  // {20, 32, 40, 60, 80, 128}
    std::optional<int> num_mfcc = 13;        // {10..14}, only for mfcc
    int frame_length_ms = 25;                // {20, 25, 30, 40}
    int frame_step_pct = 40;                 // {40, 50, 60} percent of frame length
    WindowFn window_fn = WindowFn::hamming;
    int clip_duration_ms = 1000;             // clips are padded/truncated to this

    void validate() const {
        require(sample_rate == 8000 || sample_rate == 16000, ErrorCode::invalid_config,
                "sample_rate must be 8000 or 16000");
        const bool mel_ok = num_mel_banks == 20 || num_mel_banks == 32 || num_mel_banks == 40 ||
                            num_mel_banks == 60 || num_mel_banks == 80 || num_mel_banks == 128;
        require(mel_ok, ErrorCode::invalid_config, "num_mel_banks outside supported set");
        if (feature_type == FeatureType::mfcc) {
            require(num_mfcc.has_value(), ErrorCode::invalid_config,
                    "mfcc features require num_mfcc");
            require(*num_mfcc >= 10 && *num_mfcc <= 14, ErrorCode::invalid_config,
                    "num_mfcc must be in [10, 14]");
            require(*num_mfcc <= num_mel_banks, ErrorCode::invalid_config,
                    "num_mfcc cannot exceed num_mel_banks");
        } else {
            require(!num_mfcc.has_value(), ErrorCode::invalid_config,
                    "log_mel features take no num_mfcc");
        }
        const bool len_ok = frame_length_ms == 20 || frame_length_ms == 25 ||
                            frame_length_ms == 30 || frame_length_ms == 40;
        require(len_ok, ErrorCode::invalid_config, "frame_length_ms outside supported set");
        const bool step_ok = frame_step_pct == 40 || frame_step_pct == 50 || frame_step_pct == 60;
        require(step_ok, ErrorCode::invalid_config, "frame_step_pct outside supported set");
        require(clip_duration_ms > 0, ErrorCode::invalid_config,
                "clip_duration_ms must be positive");
    }

    int num_coeffs() const {
        return feature_type == FeatureType::mfcc ? *num_mfcc : num_mel_banks;
    }
};

// Row-major (frame-major) feature matrix.
struct FeatureMatrix {
    std::vector<double> values;
    int num_frames = 0;
    int num_coeffs = 0;

    double& at(int frame, int coeff) { return values[static_cast<std::size_t>(frame) * num_coeffs + coeff]; }
    double at(int frame, int coeff) const { return values[static_cast<std::size_t>(frame) * num_coeffs + coeff]; }
};

inline int frame_length_samples(int frame_length_ms, int sample_rate) {
    return static_cast<int>(std::lround(frame_length_ms * sample_rate / 1000.0));
}

inline int frame_step_samples(int frame_length_ms, int frame_step_pct, int sample_rate) {
    const int frame = frame_length_samples(frame_length_ms, sample_rate);
    return static_cast<int>(std::lround(frame * frame_step_pct / 100.0));
}

// Number of fully contained frames; trailing samples that do not fill a frame
// are dropped.
inline int frame_count(std::size_t signal_length, int frame_samples, int step_samples) {
    if (signal_length < static_cast<std::size_t>(frame_samples)) {
        return 0;
    }
    return static_cast<int>((signal_length - static_cast<std::size_t>(frame_samples)) /
                            static_cast<std::size_t>(step_samples)) + 1;
}

inline std::vector<std::vector<double>> frame_signal(const std::vector<double>& signal,
                                                     int frame_length_ms, int frame_step_pct,
                                                     int sample_rate) {
    const int frame = frame_length_samples(frame_length_ms, sample_rate);
    const int step = frame_step_samples(frame_length_ms, frame_step_pct, sample_rate);
    require(frame >= 1, ErrorCode::invalid_argument, "frame length must be >= 1 sample");
    require(step >= 1, ErrorCode::invalid_argument, "frame step must be >= 1 sample");
    require(signal.size() >= static_cast<std::size_t>(frame), ErrorCode::too_short_signal,
            "signal shorter than one frame");
    const int count = frame_count(signal.size(), frame, step);
    std::vector<std::vector<double>> frames(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const std::size_t start = static_cast<std::size_t>(i) * static_cast<std::size_t>(step);
        frames[static_cast<std::size_t>(i)].assign(signal.begin() + static_cast<std::ptrdiff_t>(start),
                                                   signal.begin() + static_cast<std::ptrdiff_t>(start + frame));
    }
    return frames;
}

// Periodic (DFT-even) windows: w[n] = a - (1 - a) * cos(2*pi*n / N) over
// n = 0..N-1, with a = 0.54 for Hamming and a = 0.5 for Hann.
inline std::vector<double> window_coefficients(WindowFn fn, int length) {
    require(length >= 1, ErrorCode::invalid_length, "window length must be >= 1");
    const double a = fn == WindowFn::hamming ? 0.54 : 0.5;
    std::vector<double> w(static_cast<std::size_t>(length));
    const double step = 2.0 * kPi / static_cast<double>(length);
    for (int n = 0; n < length; ++n) {
        w[static_cast<std::size_t>(n)] = a - (1.0 - a) * std::cos(step * n);
    }
    return w;
}

inline std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) {
        p <<= 1;
    }
    return p;
}

namespace detail {

// Iterative radix-2 FFT, in place. Twiddle factors come from a per-size table
// computed with std::polar each time the size first appears in a thread
// (thread_local cache, so concurrent sweeps never share mutable state).
inline const std::vector<std::complex<double>>& twiddle_table(std::size_t n) {
    thread_local std::vector<std::vector<std::complex<double>>> cache;
    std::size_t log2n = 0;
    while ((std::size_t{1} << log2n) < n) {
        ++log2n;
    }
    if (cache.size() <= log2n) {
        cache.resize(log2n + 1);
    }
    auto& table = cache[log2n];
    if (table.empty()) {
        table.resize(n / 2 + 1);
        for (std::size_t k = 0; k <= n / 2; ++k) {
            table[k] = std::polar(1.0, -2.0 * kPi * static_cast<double>(k) /
                                           static_cast<double>(n));
        }
    }
    return table;
}

inline void fft_inplace(std::vector<std::complex<double>>& x) {
    const std::size_t n = x.size();
    if (n <= 1) {
        return;
    }
    // Bit-reversal permutation.
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) {
            j ^= bit;
        }
        j ^= bit;
        if (i < j) {
            std::swap(x[i], x[j]);
        }
    }
    const auto& tw = twiddle_table(n);
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const std::size_t stride = n / len;
        for (std::size_t i = 0; i < n; i += len) {
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> w = tw[k * stride];
                const std::complex<double> u = x[i + k];
                const std::complex<double> v = x[i + k + len / 2] * w;
                x[i + k] = u + v;
                x[i + k + len / 2] = u - v;
            }
        }
    }
}

}  // namespace detail

// One-sided power spectrum |X[k]|^2 for k = 0..fft_size/2, where fft_size is
// the next power of two >= the frame length (zero padded).
inline std::vector<double> power_spectrum(const std::vector<double>& frame) {
    require(!frame.empty(), ErrorCode::invalid_length, "empty frame");
    for (double v : frame) {
        require(std::isfinite(v), ErrorCode::invalid_signal, "non-finite sample in frame");
    }
    const std::size_t fft_size = next_pow2(frame.size());
    std::vector<std::complex<double>> x(fft_size);
    for (std::size_t i = 0; i < frame.size(); ++i) {
        x[i] = frame[i];
    }
    detail::fft_inplace(x);
    std::vector<double> power(fft_size / 2 + 1);
    for (std::size_t k = 0; k < power.size(); ++k) {
        power[k] = std::norm(x[k]);
    }
    return power;
}

// HTK-style Mel scale.
inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Center frequency (Hz) of triangular filter `bank` when num_banks filters are
// spread evenly in Mel between f_min and f_max.
inline double mel_bank_center_hz(int num_banks, double f_min, double f_max, int bank) {
    const double mel_lo = hz_to_mel(f_min);
    const double mel_hi = hz_to_mel(f_max);
    const double step = (mel_hi - mel_lo) / static_cast<double>(num_banks + 1);
    return mel_to_hz(mel_lo + step * static_cast<double>(bank + 1));
}

// Triangular unit-peak filterbank evaluated on the FFT bin frequencies.
// Returns num_banks rows of fft_size/2 + 1 weights.
inline std::vector<std::vector<double>> mel_filterbank(int num_banks, std::size_t fft_size,
                                                       int sample_rate, double f_min,
                                                       double f_max) {
    require(num_banks >= 1, ErrorCode::invalid_argument, "need at least one Mel bank");
    require(f_min >= 0.0 && f_min < f_max, ErrorCode::invalid_argument,
            "need 0 <= f_min < f_max");
    require(f_max <= sample_rate / 2.0 + 1e-9, ErrorCode::invalid_argument,
            "f_max beyond Nyquist");
    const double mel_lo = hz_to_mel(f_min);
    const double mel_hi = hz_to_mel(f_max);
    std::vector<double> edges(static_cast<std::size_t>(num_banks) + 2);
    for (std::size_t i = 0; i < edges.size(); ++i) {
        const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                        static_cast<double>(num_banks + 1);
        edges[i] = mel_to_hz(mel);
    }
    const std::size_t num_bins = fft_size / 2 + 1;
    const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(fft_size);
    std::vector<std::vector<double>> banks(static_cast<std::size_t>(num_banks),
                                           std::vector<double>(num_bins, 0.0));
    for (int b = 0; b < num_banks; ++b) {
        const double left = edges[static_cast<std::size_t>(b)];
        const double center = edges[static_cast<std::size_t>(b) + 1];
        const double right = edges[static_cast<std::size_t>(b) + 2];
        bool any = false;
        for (std::size_t k = 0; k < num_bins; ++k) {
            const double f = bin_hz * static_cast<double>(k);
            const double rise = (f - left) / (center - left);
            const double fall = (right - f) / (right - center);
            const double w = std::max(0.0, std::min(rise, fall));
            banks[static_cast<std::size_t>(b)][k] = w;
            any = any || w > 0.0;
        }
        require(any, ErrorCode::degenerate_filterbank,
                "Mel bank " + std::to_string(b) + " covers no FFT bin; "
                "increase fft size or reduce num_mel_banks");
    }
    return banks;
}

// Orthonormal DCT-II matrix (row k, column n):
//   D[k][n] = c_k * cos(pi * k * (2n + 1) / (2M)),
//   c_0 = sqrt(1/M), c_k = sqrt(2/M) for k > 0, so D * D^T = I.
inline std::vector<std::vector<double>> dct_matrix(int size) {
    require(size >= 1, ErrorCode::invalid_argument, "DCT size must be >= 1");
    std::vector<std::vector<double>> d(static_cast<std::size_t>(size),
                                       std::vector<double>(static_cast<std::size_t>(size)));
    const double m = static_cast<double>(size);
    for (int k = 0; k < size; ++k) {
        const double scale = k == 0 ? std::sqrt(1.0 / m) : std::sqrt(2.0 / m);
        for (int n = 0; n < size; ++n) {
            d[static_cast<std::size_t>(k)][static_cast<std::size_t>(n)] =
                scale * std::cos(kPi * k * (2.0 * n + 1.0) / (2.0 * m));
        }
    }
    return d;
}

// Windowed-sinc FIR decimation. Only integer downsampling is supported
// (16 kHz -> 8 kHz in practice); other ratios raise unsupported-rate.
inline AudioClip resample(const AudioClip& clip, int target_rate) {
    require(target_rate > 0, ErrorCode::invalid_argument, "target rate must be positive");
    if (clip.sample_rate == target_rate) {
        return clip;
    }
    require(clip.sample_rate % target_rate == 0, ErrorCode::unsupported_rate,
            "only integer decimation is supported (" + std::to_string(clip.sample_rate) +
                " -> " + std::to_string(target_rate) + ")");
    const int ratio = clip.sample_rate / target_rate;
    // Zero-phase low-pass at the new Nyquist: odd-length windowed sinc centered
    // on the output sample instant.
    const int half = 16 * ratio;
    const int taps = 2 * half + 1;
    const double cutoff = 0.5 / static_cast<double>(ratio);  // cycles per input sample
    std::vector<double> h(static_cast<std::size_t>(taps));
    double sum = 0.0;
    for (int i = 0; i < taps; ++i) {
        const double t = static_cast<double>(i - half);
        const double arg = 2.0 * kPi * cutoff * t;
        const double sinc = t == 0.0 ? 1.0 : std::sin(arg) / arg;
        // Blackman window over the tap span.
        const double u = static_cast<double>(i) / static_cast<double>(taps - 1);
        const double w = 0.42 - 0.5 * std::cos(2.0 * kPi * u) + 0.08 * std::cos(4.0 * kPi * u);
        h[static_cast<std::size_t>(i)] = 2.0 * cutoff * sinc * w;
        sum += h[static_cast<std::size_t>(i)];
    }
    for (double& v : h) {
        v /= sum;  // unit DC gain
    }
    const std::size_t out_len = clip.samples.size() / static_cast<std::size_t>(ratio);
    AudioClip out;
    out.sample_rate = target_rate;
    out.duration_ms = clip.duration_ms;
    out.samples.resize(out_len);
    const auto n = static_cast<std::ptrdiff_t>(clip.samples.size());
    for (std::size_t m = 0; m < out_len; ++m) {
        const std::ptrdiff_t center = static_cast<std::ptrdiff_t>(m) * ratio;
        double acc = 0.0;
        for (int i = 0; i < taps; ++i) {
            const std::ptrdiff_t src = center + i - half;
            if (src >= 0 && src < n) {
                acc += h[static_cast<std::size_t>(i)] * clip.samples[static_cast<std::size_t>(src)];
            }
        }
        out.samples[m] = acc;
    }
    return out;
}

// Full front-end. Steps: normalize length, frame, window, power spectrum,
// Mel filterbank, ln(energy + 1e-6), then for MFCC an orthonormal DCT-II
// keeping coefficients 0..num_mfcc-1. Finally each feature column has its
// mean removed.
inline FeatureMatrix extract_features(const AudioClip& clip, const FeatureConfig& config) {
    config.validate();
    require(clip.sample_rate == config.sample_rate, ErrorCode::unsupported_rate,
            "clip rate " + std::to_string(clip.sample_rate) +
                " does not match configured rate " + std::to_string(config.sample_rate) +
                "; resample first");

    // Pad with trailing zeros or truncate from the end to the target duration.
    const auto target_len = static_cast<std::size_t>(
        std::lround(config.clip_duration_ms * config.sample_rate / 1000.0));
    std::vector<double> signal = clip.samples;
    signal.resize(target_len, 0.0);

    auto frames = frame_signal(signal, config.frame_length_ms, config.frame_step_pct,
                               config.sample_rate);
    const int frame_len = frame_length_samples(config.frame_length_ms, config.sample_rate);
    const auto window = window_coefficients(config.window_fn, frame_len);
    const std::size_t fft_size = next_pow2(static_cast<std::size_t>(frame_len));
    const auto banks = mel_filterbank(config.num_mel_banks, fft_size, config.sample_rate, 0.0,
                                      config.sample_rate / 2.0);

    const int num_out = config.num_coeffs();
    std::vector<std::vector<double>> dct;
    if (config.feature_type == FeatureType::mfcc) {
        dct = dct_matrix(config.num_mel_banks);
    }

    FeatureMatrix features;
    features.num_frames = static_cast<int>(frames.size());
    features.num_coeffs = num_out;
    features.values.resize(frames.size() * static_cast<std::size_t>(num_out));

    std::vector<double> log_mel(static_cast<std::size_t>(config.num_mel_banks));
    for (std::size_t f = 0; f < frames.size(); ++f) {
        auto& frame = frames[f];
        for (int n = 0; n < frame_len; ++n) {
            frame[static_cast<std::size_t>(n)] *= window[static_cast<std::size_t>(n)];
        }
        const auto power = power_spectrum(frame);
        for (int b = 0; b < config.num_mel_banks; ++b) {
            const auto& bank = banks[static_cast<std::size_t>(b)];
            double energy = 0.0;
            for (std::size_t k = 0; k < power.size(); ++k) {
                energy += bank[k] * power[k];
            }
            log_mel[static_cast<std::size_t>(b)] = std::log(energy + 1e-6);
        }
        if (config.feature_type == FeatureType::mfcc) {
            for (int k = 0; k < num_out; ++k) {
                const auto& row = dct[static_cast<std::size_t>(k)];
                double acc = 0.0;
                for (int b = 0; b < config.num_mel_banks; ++b) {
                    acc += row[static_cast<std::size_t>(b)] * log_mel[static_cast<std::size_t>(b)];
                }
                features.at(static_cast<int>(f), k) = acc;
            }
        } else {
            for (int b = 0; b < num_out; ++b) {
                features.at(static_cast<int>(f), b) = log_mel[static_cast<std::size_t>(b)];
            }
        }
    }

    // Per-coefficient mean removal. The first row is subtracted before
    // averaging so that a column of identical values comes out exactly zero.
    for (int c = 0; c < num_out; ++c) {
        const double base = features.at(0, c);
        double mean = 0.0;
        for (int f = 0; f < features.num_frames; ++f) {
            mean += features.at(f, c) - base;
        }
        mean /= static_cast<double>(features.num_frames);
        for (int f = 0; f < features.num_frames; ++f) {
            features.at(f, c) = (features.at(f, c) - base) - mean;
        }
    }

    for (double v : features.values) {
        require(std::isfinite(v), ErrorCode::pipeline_failure,
                "non-finite value in extracted features");
    }
    return features;
}

}  // namespace kwsbias
