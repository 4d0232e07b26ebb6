// common.hpp -- error type and deterministic RNG shared by all modules.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kwsbias {

enum class ErrorCode {
    unsupported_rate,
    too_short_signal,
    invalid_length,
    invalid_signal,
    degenerate_filterbank,
    pipeline_failure,
    manifest_format,
    io_failure,
    insufficient_data,
    imbalance,
    invalid_argument,
    shape_mismatch,
    numerical_failure,
    training_failure,
    invalid_config,
    pruning_failure,
    label_out_of_range,
    undefined_metric,
    non_positive_performance,
    comparison_mismatch,
    group_coverage,
    selection_empty,
    grid_empty,
    summary_empty,
    config_error,
};

inline const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::unsupported_rate: return "unsupported-rate";
        case ErrorCode::too_short_signal: return "too-short-signal";
        case ErrorCode::invalid_length: return "invalid-length";
        case ErrorCode::invalid_signal: return "invalid-signal";
        case ErrorCode::degenerate_filterbank: return "degenerate-filterbank";
        case ErrorCode::pipeline_failure: return "pipeline-failure";
        case ErrorCode::manifest_format: return "manifest-format";
        case ErrorCode::io_failure: return "io-failure";
        case ErrorCode::insufficient_data: return "insufficient-data";
        case ErrorCode::imbalance: return "imbalance";
        case ErrorCode::invalid_argument: return "invalid-argument";
        case ErrorCode::shape_mismatch: return "shape-mismatch";
        case ErrorCode::numerical_failure: return "numerical-failure";
        case ErrorCode::training_failure: return "training-failure";
        case ErrorCode::invalid_config: return "invalid-config";
        case ErrorCode::pruning_failure: return "pruning-failure";
        case ErrorCode::label_out_of_range: return "label-out-of-range";
        case ErrorCode::undefined_metric: return "undefined-metric";
        case ErrorCode::non_positive_performance: return "non-positive-performance";
        case ErrorCode::comparison_mismatch: return "comparison-mismatch";
        case ErrorCode::group_coverage: return "group-coverage";
        case ErrorCode::selection_empty: return "selection-empty";
        case ErrorCode::grid_empty: return "grid-empty";
        case ErrorCode::summary_empty: return "summary-empty";
        case ErrorCode::config_error: return "config-error";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) {
        throw Error(code, message);
    }
}

// splitmix64: the output stream is fixed by the standard reference constants,
// so seeded results are reproducible across platforms and standard libraries
// (std::shuffle and the std distributions are not).
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derives a stream seed from a base seed and an index (experiment number,
// epoch number, tensor index, ...). Documented scheme: two splitmix64 rounds
// over (seed ^ golden-ratio-scrambled index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t state = seed ^ (index * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
    splitmix64(state);
    return splitmix64(state);
}

// Deterministic RNG used for every randomized operation in the toolkit.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // Warm up so that small seeds do not yield small first outputs.
        splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1) with 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n). Lemire multiply-shift; slight bias is
    // irrelevant here and the result is platform independent.
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    double normal(double mean, double stddev) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u = 0.0;
        double v = 0.0;
        double s = 0.0;
        do {
            u = uniform(-1.0, 1.0);
            v = uniform(-1.0, 1.0);
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double scale = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * scale;
        have_spare_ = true;
        return mean + stddev * u * scale;
    }

    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(values[i - 1], values[j]);
        }
    }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Linear-interpolation quantile on sorted values: position h = (n-1)*p,
// result x[floor(h)] + frac(h) * (x[floor(h)+1] - x[floor(h)]).
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    require(!sorted.empty(), ErrorCode::invalid_argument, "quantile of empty set");
    if (sorted.size() == 1) {
        return sorted.front();
    }
    const double h = static_cast<double>(sorted.size() - 1) * p;
    const auto lo = static_cast<std::size_t>(h);
    if (lo + 1 >= sorted.size()) {
        return sorted.back();
    }
    const double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace kwsbias
