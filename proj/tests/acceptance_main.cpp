// Acceptance suite for the toolkit. Each check prints exactly one line,
// "PASS <name> (<seconds>s)" or "FAIL <name>: <reason> (<seconds>s)", and the
// process exits nonzero when any check fails. Checks with a runtime budget
// fail when they exceed it. All tolerances are pinned below.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kwsbias/common.hpp"
#include "kwsbias/dataset.hpp"
#include "kwsbias/dsp.hpp"
#include "kwsbias/metrics.hpp"
#include "kwsbias/nn.hpp"
#include "kwsbias/pipeline.hpp"
#include "kwsbias/pruning.hpp"
#include "kwsbias/selection.hpp"
#include "kwsbias/sweep.hpp"
#include "toy_problem.hpp"

namespace fs = std::filesystem;
using namespace kwsbias;

namespace {

// Tolerances and budgets used by the checks.
constexpr double kBiasTol = 1e-12;            // reliability-bias oracle agreement
constexpr double kMccTol = 1e-12;             // MCC oracle agreement
constexpr double kGradientTol = 1e-4;         // max relative error vs central differences
constexpr double kDctTol = 1e-10;             // DCT-II orthonormality
constexpr double kParsevalRelTol = 1e-9;      // FFT energy conservation, relative
constexpr double kMinValMcc = 0.9;            // desk-scale training bar
constexpr double kSelectionTolerance = 0.015; // accuracy band for selection
constexpr double kAccuracyFactor = 0.985;     // 1 - kSelectionTolerance, as documented

// Collects the first failure inside one check body.
struct Check {
    std::string failure;

    void expect(bool ok, const std::string& detail) {
        if (!ok && failure.empty()) {
            failure = detail;
        }
    }
    bool ok() const { return failure.empty(); }
};

// Runs one named check under an optional runtime budget (0 = none) and
// prints its PASS/FAIL line. Returns true when the check passed.
bool run_check(const char* name, double budget_seconds,
               const std::function<std::string()>& body) {
    const auto start = std::chrono::steady_clock::now();
    std::string failure;
    try {
        failure = body();
    } catch (const std::exception& e) {
        failure = std::string("unexpected exception: ") + e.what();
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (failure.empty() && budget_seconds > 0.0 && elapsed >= budget_seconds) {
        std::ostringstream out;
        out << "runtime " << elapsed << "s exceeded " << budget_seconds << "s budget";
        failure = out.str();
    }
    if (failure.empty()) {
        std::printf("PASS %s (%.1fs)\n", name, elapsed);
    } else {
        std::printf("FAIL %s: %s (%.1fs)\n", name, failure.c_str(), elapsed);
    }
    std::fflush(stdout);
    return failure.empty();
}

std::string format_number(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

// State shared between the data-driven checks: the synthetic corpus, its
// default MFCC features, and every results table produced along the way.
struct SharedState {
    fs::path scratch;
    Dataset corpus;
    std::vector<FeatureMatrix> features;
    int frames = 0;
    int coeffs = 0;
    std::vector<std::pair<std::string, std::vector<ScoredModel>>> tables;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

// ---------------------------------------------------------------------------
// Check 1: log-ratio bias formulas.

std::string check_bias_oracle() {
    Check c;
    const double rb = reliability_bias({{"female", 0.8}, {"male", 0.4}}, 0.6);
    c.expect(std::abs(rb - std::log(2.0)) <= kBiasTol,
             "reliability_bias({0.8, 0.4}, 0.6) = " + format_number(rb) +
                 ", expected ln 2 = " + format_number(std::log(2.0)));

    Rng rng(0xb1a5);
    for (int i = 0; i < 1000 && c.ok(); ++i) {
        const double p = rng.uniform(0.05, 20.0);
        const double q = rng.uniform(0.05, 20.0);
        const double zero = group_bias(p, p);
        c.expect(std::abs(zero) <= kBiasTol,
                 "group_bias(p, p) = " + format_number(zero) + " for p = " + format_number(p));
        const double forward = group_bias(p, q);
        const double backward = group_bias(q, p);
        c.expect(std::abs(std::abs(forward) - std::abs(backward)) <= kBiasTol,
                 "|group_bias(p, q)| != |group_bias(q, p)| for p = " + format_number(p) +
                     ", q = " + format_number(q));
    }
    return c.failure;
}

// ---------------------------------------------------------------------------
// Check 2: multiclass MCC against an indicator-covariance oracle.

// Independent MCC route: per-class one-hot indicators, Pearson covariance
// accumulated sample by sample, one division at the end of each moment.
double mcc_indicator_oracle(const std::vector<int>& labels, const std::vector<int>& preds,
                            int num_classes) {
    const double n = static_cast<double>(labels.size());
    double sum_match = 0.0;
    double sum_tp = 0.0;
    double sum_t = 0.0;
    double sum_t2 = 0.0;
    double sum_p = 0.0;
    double sum_p2 = 0.0;
    for (int c = 0; c < num_classes; ++c) {
        double t = 0.0;
        double p = 0.0;
        double both = 0.0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const bool x = labels[i] == c;
            const bool y = preds[i] == c;
            t += x ? 1.0 : 0.0;
            p += y ? 1.0 : 0.0;
            both += (x && y) ? 1.0 : 0.0;
        }
        sum_match += both;
        sum_tp += t * p;
        sum_t += t;
        sum_t2 += t * t;
        sum_p += p;
        sum_p2 += p * p;
    }
    const double cov_xy = (n * sum_match - sum_tp) / (n * n);
    const double var_x = (n * sum_t - sum_t2) / (n * n);
    const double var_y = (n * sum_p - sum_p2) / (n * n);
    if (var_x <= 0.0 || var_y <= 0.0) {
        return 0.0;
    }
    return cov_xy / std::sqrt(var_x * var_y);
}

std::string check_mcc_oracle() {
    Check c;
    const std::vector<int> hand_labels = {0, 0, 1, 1, 2, 2};
    const std::vector<int> hand_preds = {0, 0, 1, 1, 1, 2};
    const double hand = mcc(confusion_matrix(hand_labels, hand_preds, 3));
    c.expect(std::abs(hand - 18.0 / std::sqrt(528.0)) <= kMccTol,
             "hand case: got " + format_number(hand) + ", expected 18/sqrt(528)");

    Rng rng(0x6cc);
    for (int draw = 0; draw < 1000 && c.ok(); ++draw) {
        const int k = 2 + static_cast<int>(rng.next_below(9));    // 2..10 classes
        const int n = 20 + static_cast<int>(rng.next_below(181)); // 20..200 samples
        std::vector<int> labels(static_cast<std::size_t>(n));
        std::vector<int> preds(static_cast<std::size_t>(n));
        for (auto& l : labels) {
            l = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(k)));
        }
        if (draw % 50 == 49) {
            // Constant labels: zero label variance, MCC 0 by convention.
            std::fill(labels.begin(), labels.end(), labels.front());
        }
        const int constant_pred =
            draw % 25 == 24 ? static_cast<int>(rng.next_below(static_cast<std::uint64_t>(k)))
                            : -1;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            if (constant_pred >= 0) {
                preds[i] = constant_pred;  // zero prediction variance
            } else if (rng.next_double() < 0.7) {
                preds[i] = labels[i];
            } else {
                preds[i] = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(k)));
            }
        }
        const double got = mcc(confusion_matrix(labels, preds, k));
        const double expected = mcc_indicator_oracle(labels, preds, k);
        c.expect(std::abs(got - expected) <= kMccTol,
                 "draw " + std::to_string(draw) + " (k=" + std::to_string(k) +
                     ", n=" + std::to_string(n) + "): got " + format_number(got) +
                     ", oracle " + format_number(expected));
    }
    return c.failure;
}

// ---------------------------------------------------------------------------
// Check 3: analytic gradients vs central finite differences.

// The two specs below cover every layer kind the library implements: plain
// and strided convolution, max pooling, ReLU, dense layers, and the softmax
// cross-entropy head.
ModelSpec gradient_cnn() {
    ModelSpec spec;
    spec.architecture = Architecture::cnn;
    spec.input_frames = 8;
    spec.input_coeffs = 6;
    spec.num_classes = 3;
    spec.conv_layers = {{2, 3, 2, 1, 1}, {2, 2, 2, 1, 1}};
    spec.pool_size = 2;
    spec.dense_widths = {4};
    return spec;
}

ModelSpec gradient_llcnn() {
    ModelSpec spec;
    spec.architecture = Architecture::llcnn;
    spec.input_frames = 9;
    spec.input_coeffs = 8;
    spec.num_classes = 3;
    spec.conv_layers = {{2, 3, 3, 2, 2}};
    spec.dense_widths = {5, 4};
    return spec;
}

std::string check_gradients() {
    Check c;
    const std::vector<int> labels = {0, 1, 2, 0};
    for (const ModelSpec& spec : {gradient_cnn(), gradient_llcnn()}) {
        ModelParams params = build_model(spec, 97);
        c.expect(param_count(params) <= 1000,
                 "model has " + std::to_string(param_count(params)) + " parameters (> 1000)");

        Tensor input = Tensor::zeros(
            {static_cast<int>(labels.size()), spec.input_frames, spec.input_coeffs, 1});
        Rng rng(31);
        for (auto& v : input.data) {
            v = rng.uniform(-1.0, 1.0);
        }
        const auto analytic = loss_and_grad(params, input, labels);

        const double h = 1e-6;
        double max_rel = 0.0;
        for (std::size_t ti = 0; ti < params.tensors.size(); ++ti) {
            for (std::size_t i = 0; i < params.tensors[ti].size(); ++i) {
                const double saved = params.tensors[ti].data[i];
                params.tensors[ti].data[i] = saved + h;
                const double loss_plus = loss_and_grad(params, input, labels).loss;
                params.tensors[ti].data[i] = saved - h;
                const double loss_minus = loss_and_grad(params, input, labels).loss;
                params.tensors[ti].data[i] = saved;
                const double numeric = (loss_plus - loss_minus) / (2.0 * h);
                const double value = analytic.grads[ti].data[i];
                const double denom = std::max(std::abs(numeric) + std::abs(value), 1e-6);
                max_rel = std::max(max_rel, std::abs(numeric - value) / denom);
            }
        }
        c.expect(max_rel < kGradientTol,
                 std::string(to_string(spec.architecture)) +
                     ": max relative gradient error " + format_number(max_rel));
    }
    return c.failure;
}

// ---------------------------------------------------------------------------
// Check 4: audio front-end numerics.

std::string check_dsp_front_end() {
    Check c;

    // Orthonormality of the DCT-II matrix: D * D^T = I.
    for (int size : {20, 40, 128}) {
        const auto d = dct_matrix(size);
        double worst = 0.0;
        for (int i = 0; i < size; ++i) {
            for (int j = 0; j < size; ++j) {
                double dot = 0.0;
                for (int n = 0; n < size; ++n) {
                    dot += d[static_cast<std::size_t>(i)][static_cast<std::size_t>(n)] *
                           d[static_cast<std::size_t>(j)][static_cast<std::size_t>(n)];
                }
                worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
            }
        }
        c.expect(worst <= kDctTol, "DCT size " + std::to_string(size) +
                                       ": max |D D^T - I| = " + format_number(worst));
    }

    // Parseval: time-domain energy equals spectral energy / fft size. The
    // half spectrum counts interior bins twice.
    Rng rng(0xd5b);
    for (int frame_len : {400, 512}) {
        std::vector<double> frame(static_cast<std::size_t>(frame_len));
        for (auto& v : frame) {
            v = rng.uniform(-1.0, 1.0);
        }
        double time_energy = 0.0;
        for (double v : frame) {
            time_energy += v * v;
        }
        const auto power = power_spectrum(frame);
        const auto fft_size = static_cast<double>(2 * (power.size() - 1));
        double spectral = power.front() + power.back();
        for (std::size_t k = 1; k + 1 < power.size(); ++k) {
            spectral += 2.0 * power[k];
        }
        spectral /= fft_size;
        const double rel = std::abs(spectral - time_energy) / time_energy;
        c.expect(rel <= kParsevalRelTol, "Parseval relative error " + format_number(rel) +
                                             " at frame length " + std::to_string(frame_len));
    }

    // Frame-count formula against naive enumeration of start positions.
    for (int trial = 0; trial < 200 && c.ok(); ++trial) {
        const auto len = rng.next_below(5001);
        const int frame = 1 + static_cast<int>(rng.next_below(600));
        const int step = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(frame)));
        int naive = 0;
        for (std::size_t start = 0; start + static_cast<std::size_t>(frame) <= len;
             start += static_cast<std::size_t>(step)) {
            ++naive;
        }
        const int got = frame_count(len, frame, step);
        c.expect(got == naive, "frame_count(" + std::to_string(len) + ", " +
                                   std::to_string(frame) + ", " + std::to_string(step) +
                                   ") = " + std::to_string(got) + ", naive " +
                                   std::to_string(naive));
    }

    // A pure tone at a filter's center frequency concentrates its energy in
    // that Mel bank.
    const int num_banks = 40;
    const int sample_rate = 16000;
    const int frame_len = frame_length_samples(25, sample_rate);  // 400 -> fft 512
    const auto window = window_coefficients(WindowFn::hamming, frame_len);
    const auto banks = mel_filterbank(num_banks, next_pow2(static_cast<std::size_t>(frame_len)),
                                      sample_rate, 0.0, sample_rate / 2.0);
    for (int bank : {5, 15, 25, 35}) {
        const double freq = mel_bank_center_hz(num_banks, 0.0, sample_rate / 2.0, bank);
        std::vector<double> signal(static_cast<std::size_t>(sample_rate));
        for (std::size_t i = 0; i < signal.size(); ++i) {
            signal[i] = 0.5 * std::sin(2.0 * kPi * freq * static_cast<double>(i) /
                                       static_cast<double>(sample_rate));
        }
        auto frames = frame_signal(signal, 25, 40, sample_rate);
        std::vector<double> energy(static_cast<std::size_t>(num_banks), 0.0);
        for (auto& frame : frames) {
            for (int n = 0; n < frame_len; ++n) {
                frame[static_cast<std::size_t>(n)] *= window[static_cast<std::size_t>(n)];
            }
            const auto power = power_spectrum(frame);
            for (int b = 0; b < num_banks; ++b) {
                for (std::size_t k = 0; k < power.size(); ++k) {
                    energy[static_cast<std::size_t>(b)] +=
                        banks[static_cast<std::size_t>(b)][k] * power[k];
                }
            }
        }
        const auto top = static_cast<int>(
            std::max_element(energy.begin(), energy.end()) - energy.begin());
        c.expect(top == bank, "tone at center of bank " + std::to_string(bank) +
                                  " (" + format_number(freq) + " Hz) peaked in bank " +
                                  std::to_string(top));
    }
    return c.failure;
}

// ---------------------------------------------------------------------------
// Check 5: pruning schedule and achieved sparsity.

std::string check_pruning_schedule() {
    Check c;
    const auto sparsities = ExperimentGrid::table_full("x", 0).axes.final_sparsities;
    c.expect(!sparsities.empty(), "empty sparsity axis");

    // Polynomial decay: exact endpoints, monotone in between.
    const long total = 1000;
    for (double target : sparsities) {
        PruneConfig config;
        config.final_sparsity = target;
        config.initial_sparsity = 0.0;
        config.schedule = PruneSchedule::polynomial_decay;
        c.expect(sparsity_at_step(config, 0, total) == config.initial_sparsity,
                 "s(0) != initial sparsity at target " + format_number(target));
        c.expect(sparsity_at_step(config, total, total) == target,
                 "s(total) != final sparsity at target " + format_number(target));
        double prev = sparsity_at_step(config, 0, total);
        for (long step = 1; step <= total; ++step) {
            const double cur = sparsity_at_step(config, step, total);
            if (cur < prev) {
                c.expect(false, "schedule not monotone at step " + std::to_string(step) +
                                    ", target " + format_number(target));
                break;
            }
            prev = cur;
        }
        PruneConfig constant = config;
        constant.schedule = PruneSchedule::constant;
        c.expect(sparsity_at_step(constant, 0, total) == target &&
                     sparsity_at_step(constant, total / 2, total) == target,
                 "constant schedule drifted at target " + format_number(target));
    }
    // Endpoints stay exact with a nonzero (dyadic) initial sparsity.
    PruneConfig dyadic;
    dyadic.initial_sparsity = 0.25;
    dyadic.final_sparsity = 0.75;
    dyadic.schedule = PruneSchedule::polynomial_decay;
    c.expect(sparsity_at_step(dyadic, 0, total) == 0.25 &&
                 sparsity_at_step(dyadic, total, total) == 0.75,
             "endpoints not exact for initial 0.25 / final 0.75");

    // Achieved per-tensor sparsity is exactly floor(target * n + 0.5) / n,
    // checked on the shared toy problem (two classes, both genders in every
    // split, an 85-parameter model).
    const testsupport::ToyProblem toy = testsupport::make_toy_problem(424242);
    TrainConfig baseline_config;
    baseline_config.epochs = 4;
    baseline_config.batch_size = 4;
    baseline_config.learning_rate_grid = {1e-2};
    baseline_config.seed = 3;
    const TrainResult baseline = train(toy.spec, toy.dataset, toy.features, baseline_config);
    for (double target : sparsities) {
        PruneConfig config;
        config.final_sparsity = target;
        config.schedule = PruneSchedule::polynomial_decay;
        config.frequency = 10;
        config.epochs = 2;
        config.batch_size = 4;
        config.seed = 3;
        const PruneResult pruned =
            prune_train(baseline.params, config, toy.dataset, toy.features);
        for (const auto& ts : achieved_sparsity(pruned.params)) {
            const auto expected = static_cast<std::size_t>(
                std::floor(target * static_cast<double>(ts.size) + 0.5));
            c.expect(ts.zeros == expected,
                     ts.name + " at target " + format_number(target) + ": " +
                         std::to_string(ts.zeros) + " zeros of " + std::to_string(ts.size) +
                         ", expected " + std::to_string(expected));
        }
    }

    // Masked weights stay exactly zero across 100 optimizer steps.
    PruneConfig long_run;
    long_run.final_sparsity = 0.8;
    long_run.schedule = PruneSchedule::polynomial_decay;
    long_run.frequency = 10;
    long_run.epochs = 25;  // 4 steps/epoch on the toy problem
    long_run.batch_size = 4;
    long_run.seed = 9;
    const PruneResult result = prune_train(baseline.params, long_run, toy.dataset, toy.features);
    c.expect(result.total_steps >= 100, "only " + std::to_string(result.total_steps) +
                                            " optimizer steps, wanted at least 100");
    for (std::size_t ti = 0; ti < result.params.tensors.size(); ++ti) {
        if (!is_prunable(result.params.names[ti])) {
            continue;
        }
        const auto& mask = result.masks[ti];
        c.expect(mask.size() == result.params.tensors[ti].size(),
                 "mask size mismatch on " + result.params.names[ti]);
        for (std::size_t i = 0; i < mask.size() && c.ok(); ++i) {
            if (mask[i] == 0) {
                c.expect(result.params.tensors[ti].data[i] == 0.0,
                         result.params.names[ti] + "[" + std::to_string(i) +
                             "] masked but nonzero after " +
                             std::to_string(result.total_steps) + " steps");
            }
        }
    }
    return c.failure;
}

// ---------------------------------------------------------------------------
// Check 6: experiment grid sizes.

std::string check_grid_counts() {
    Check c;
    const auto full = ExperimentGrid::table_full("corpus", 42);
    const auto train_experiments = expand_grid(full);
    c.expect(train_experiments.size() == 3456,
             "full training grid has " + std::to_string(train_experiments.size()) +
                 " experiments, expected 3456");
    const auto prune_experiments = expand_prune_grid(full);
    c.expect(prune_experiments.size() == 72,
             "pruning grid has " + std::to_string(prune_experiments.size()) +
                 " experiments, expected 72");

    const auto recommended = expand_grid(ExperimentGrid::table_recommended("corpus", 42));
    std::map<std::pair<int, Architecture>, int> cells;
    for (const auto& e : recommended) {
        ++cells[{e.features.sample_rate, e.architecture}];
    }
    c.expect(cells.size() == 4, "recommended grid covers " + std::to_string(cells.size()) +
                                    " (rate, architecture) cells, expected 4");
    for (const auto& [cell, count] : cells) {
        c.expect(count == 48, "recommended grid: " + std::to_string(cell.first) + " Hz " +
                                  to_string(cell.second) + " has " + std::to_string(count) +
                                  " experiments, expected 48");
    }
    return c.failure;
}

// ---------------------------------------------------------------------------
// Check 7: desk-scale training on the synthetic corpus.

// 4 classes x 2 genders x 4 speakers x 5 utterances = 160 clips. Speaker 00
// of each gender is held out for test, speaker 01 for validation, so every
// split contains both genders and all classes.
void build_corpus(SharedState& state) {
    SynthConfig synth;  // defaults: 4 classes, 4 speakers/gender, 5 utterances/speaker/class
    state.corpus = synth_dataset(synth, (state.scratch / "corpus").string());
    for (auto& u : state.corpus.utterances) {
        const std::string number = u.speaker_id.substr(1);
        u.split = number == "00"   ? Split::test
                  : number == "01" ? Split::validation
                                   : Split::train;
    }
    const FeatureConfig features;  // 16 kHz MFCC: 40 Mel banks, 13 coefficients
    state.features = build_feature_table(state.corpus, features);
    const auto [frames, coeffs] = feature_shape(features);
    state.frames = frames;
    state.coeffs = coeffs;
}

std::string check_desk_scale_training(SharedState& state) {
    Check c;
    build_corpus(state);
    c.expect(state.corpus.utterances.size() == 160,
             "expected 160 clips, got " + std::to_string(state.corpus.utterances.size()));

    const ModelSpec spec =
        ModelSpec::defaults(Architecture::cnn, state.frames, state.coeffs, 4);
    TrainConfig config;  // default 10 epochs and learning-rate grid
    config.batch_size = 8;
    config.seed = 7;
    const TrainResult result = train(spec, state.corpus, state.features, config);
    c.expect(result.val_mcc >= kMinValMcc,
             "validation MCC " + format_number(result.val_mcc) + " below " +
                 format_number(kMinValMcc));

    // Same seed, same outcome, bit for bit.
    const TrainResult rerun = train(spec, state.corpus, state.features, config);
    c.expect(rerun.val_mcc == result.val_mcc && rerun.learning_rate == result.learning_rate,
             "rerun chose lr " + format_number(rerun.learning_rate) + " / MCC " +
                 format_number(rerun.val_mcc) + ", first run lr " +
                 format_number(result.learning_rate) + " / MCC " +
                 format_number(result.val_mcc));
    for (std::size_t ti = 0; ti < result.params.tensors.size() && c.ok(); ++ti) {
        c.expect(result.params.tensors[ti].data == rerun.params.tensors[ti].data,
                 "rerun parameters differ in " + result.params.names[ti]);
    }

    const EvalReport report =
        evaluate(result.params, state.corpus, state.features, Split::test, "desk-cnn");
    state.tables.push_back({"desk-scale", {scored_from_report(report)}});
    return c.failure;
}

// ---------------------------------------------------------------------------
// Check 8: pruning trends across five seeds.

std::string check_pruning_trends(SharedState& state) {
    Check c;
    c.expect(!state.features.empty(), "synthetic corpus unavailable (earlier check failed)");
    if (!c.ok()) {
        return c.failure;
    }
    const ModelSpec spec =
        ModelSpec::defaults(Architecture::llcnn, state.frames, state.coeffs, 4);

    int hold_light_vs_heavy = 0;
    int hold_lr_order = 0;
    std::ostringstream detail;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        TrainConfig train_config;
        train_config.epochs = 10;
        train_config.batch_size = 8;
        train_config.learning_rate_grid = {1e-3};
        train_config.seed = seed;
        const TrainResult baseline = train(spec, state.corpus, state.features, train_config);
        const EvalReport base =
            evaluate(baseline.params, state.corpus, state.features, Split::test, "baseline");

        auto pruned_report = [&](double sparsity, double lr, const std::string& id) {
            PruneConfig config;
            config.final_sparsity = sparsity;
            config.schedule = PruneSchedule::polynomial_decay;
            config.frequency = 10;
            config.learning_rate = lr;
            config.epochs = 8;
            config.batch_size = 8;
            config.seed = seed;
            const PruneResult pruned =
                prune_train(baseline.params, config, state.corpus, state.features);
            return evaluate(pruned.params, state.corpus, state.features, Split::test, id);
        };
        const EvalReport light = pruned_report(0.2, 1e-3, "sparsity0.2-lr1e-3");
        const EvalReport heavy = pruned_report(0.9, 1e-3, "sparsity0.9-lr1e-3");
        const EvalReport heavy_small_lr = pruned_report(0.9, 1e-5, "sparsity0.9-lr1e-5");

        if (light.overall_mcc >= heavy.overall_mcc) {
            ++hold_light_vs_heavy;
        }
        // The baseline is shared, so comparing delta-MCC values reduces to
        // comparing the pruned models' MCC.
        if (heavy.overall_mcc >= heavy_small_lr.overall_mcc) {
            ++hold_lr_order;
        }
        detail << " seed " << seed << ": base " << base.overall_mcc << ", s0.2@1e-3 "
               << light.overall_mcc << ", s0.9@1e-3 " << heavy.overall_mcc << ", s0.9@1e-5 "
               << heavy_small_lr.overall_mcc << ";";

        state.tables.push_back({"trend-seed-" + std::to_string(seed),
                                {scored_from_report(base), scored_from_report(light),
                                 scored_from_report(heavy),
                                 scored_from_report(heavy_small_lr)}});
    }
    c.expect(hold_light_vs_heavy >= 4,
             "MCC at sparsity 0.2 >= MCC at 0.9 held in only " +
                 std::to_string(hold_light_vs_heavy) + "/5 seeds;" + detail.str());
    c.expect(hold_lr_order >= 4,
             "delta-MCC at lr 1e-3 >= delta-MCC at lr 1e-5 (sparsity 0.9) held in only " +
                 std::to_string(hold_lr_order) + "/5 seeds;" + detail.str());
    return c.failure;
}

// ---------------------------------------------------------------------------
// Check 9: selection soundness by exhaustive scan.

std::string check_selection_soundness(const SharedState& state) {
    Check c;
    auto tables = state.tables;

    // Add randomized tables so the scan also covers ties, undefined biases,
    // and empty accuracy bands.
    Rng rng(0x5e1ec7);
    for (int t = 0; t < 200; ++t) {
        std::vector<ScoredModel> table;
        const auto size = 2 + rng.next_below(11);
        for (std::uint64_t i = 0; i < size; ++i) {
            ScoredModel m;
            m.id = "m" + std::to_string(i);
            m.mcc = rng.uniform(-0.3, 1.0);
            if (rng.next_double() < 0.8) {
                m.reliability_bias = rng.uniform(0.0, 1.5);
            }
            table.push_back(std::move(m));
        }
        // Keep the best MCC positive so the accuracy band is well defined.
        if (std::max_element(table.begin(), table.end(), [](const auto& a, const auto& b) {
                return a.mcc < b.mcc;
            })->mcc < 0.1) {
            table.front().mcc = rng.uniform(0.1, 1.0);
        }
        tables.push_back({"random-" + std::to_string(t), std::move(table)});
    }

    for (const auto& [table_name, candidates] : tables) {
        if (!c.ok()) {
            break;
        }
        double best = candidates.front().mcc;
        for (const auto& m : candidates) {
            best = std::max(best, m.mcc);
        }
        const double threshold = (1.0 - kSelectionTolerance) * best;

        // Exhaustive scan: among defined-bias candidates inside the accuracy
        // band, lowest bias wins; ties break by MCC, then input order.
        const ScoredModel* expected = nullptr;
        for (const auto& m : candidates) {
            if (m.mcc < threshold || !m.reliability_bias.has_value()) {
                continue;
            }
            if (expected == nullptr || *m.reliability_bias < *expected->reliability_bias ||
                (*m.reliability_bias == *expected->reliability_bias &&
                 m.mcc > expected->mcc)) {
                expected = &m;
            }
        }

        SelectionCriterion criterion;
        criterion.kind = CriterionKind::low_bias_high_accuracy;
        criterion.accuracy_tolerance = kSelectionTolerance;
        if (expected == nullptr) {
            try {
                select(candidates, criterion);
                c.expect(false, table_name + ": selection succeeded although no qualifying "
                                             "candidate has a defined bias");
            } catch (const Error& e) {
                c.expect(e.code() == ErrorCode::selection_empty,
                         table_name + ": unexpected error " + e.what());
            }
        } else {
            const auto chosen = select(candidates, criterion);
            c.expect(chosen.size() == 1, table_name + ": expected a single winner");
            c.expect(chosen.front().id == expected->id,
                     table_name + ": selected " + chosen.front().id + ", scan found " +
                         expected->id);
            c.expect(chosen.front().mcc >= kAccuracyFactor * best,
                     table_name + ": winner MCC " + format_number(chosen.front().mcc) +
                         " below " + format_number(kAccuracyFactor) + " * " +
                         format_number(best));
            for (const auto& m : candidates) {
                if (m.mcc >= threshold && m.reliability_bias.has_value()) {
                    c.expect(*chosen.front().reliability_bias <= *m.reliability_bias,
                             table_name + ": " + m.id + " has lower bias than the winner");
                }
            }
        }

        // Tolerance 0 collapses to best accuracy with the bias tie-break.
        SelectionCriterion tight = criterion;
        tight.accuracy_tolerance = 0.0;
        SelectionCriterion accuracy;
        accuracy.kind = CriterionKind::high_accuracy;
        const auto by_accuracy = select(candidates, accuracy);
        try {
            const auto collapsed = select(candidates, tight);
            c.expect(collapsed.front().id == by_accuracy.front().id,
                     table_name + ": tolerance 0 picked " + collapsed.front().id +
                         ", high_accuracy picked " + by_accuracy.front().id);
        } catch (const Error&) {
            bool any_best_with_bias = false;
            for (const auto& m : candidates) {
                any_best_with_bias =
                    any_best_with_bias || (m.mcc == best && m.reliability_bias.has_value());
            }
            c.expect(!any_best_with_bias,
                     table_name + ": tolerance 0 found no candidate although a best-MCC "
                                  "candidate has a defined bias");
        }
    }
    return c.failure;
}

// ---------------------------------------------------------------------------
// Check 10: protocol invariants.

std::string check_protocol_invariants(const SharedState& state) {
    Check c;
    c.expect(!state.features.empty(), "synthetic corpus unavailable (earlier check failed)");
    if (!c.ok()) {
        return c.failure;
    }

    // Splitting assigns every (keyword, speaker) pair to exactly one split.
    Dataset unsplit = state.corpus;
    for (auto& u : unsplit.utterances) {
        u.split = Split::unassigned;
    }
    const Dataset resplit = split_dataset(unsplit, SplitRatios{}, 99);
    std::map<Split, std::set<std::pair<int, std::string>>> pairs;
    for (const auto& u : resplit.utterances) {
        c.expect(u.split != Split::unassigned, "utterance left unassigned after splitting");
        pairs[u.split].insert({u.class_index, u.speaker_id});
    }
    std::set<std::pair<int, std::string>> seen;
    std::size_t total_pairs = 0;
    for (const auto& [split, split_pairs] : pairs) {
        for (const auto& pair : split_pairs) {
            c.expect(seen.insert(pair).second,
                     "pair (" + std::to_string(pair.first) + ", " + pair.second +
                         ") appears in more than one split");
        }
        total_pairs += split_pairs.size();
    }
    c.expect(total_pairs == 32, "expected 32 distinct (keyword, speaker) pairs, saw " +
                                    std::to_string(total_pairs));

    // Gender balancing equalizes per-keyword counts exactly.
    Dataset imbalanced = state.corpus;
    int dropped_male0 = 0;
    int dropped_female2 = 0;
    std::erase_if(imbalanced.utterances, [&](const Utterance& u) {
        if (u.class_index == 0 && u.group == Group::male && dropped_male0 < 3) {
            ++dropped_male0;
            return true;
        }
        if (u.class_index == 2 && u.group == Group::female && dropped_female2 < 2) {
            ++dropped_female2;
            return true;
        }
        return false;
    });
    const Dataset balanced = gender_balance(imbalanced, 5);
    std::map<int, std::pair<int, int>> counts;  // class -> (male, female)
    for (const auto& u : balanced.utterances) {
        if (u.group == Group::male) {
            ++counts[u.class_index].first;
        } else {
            ++counts[u.class_index].second;
        }
    }
    for (const auto& [class_index, mf] : counts) {
        c.expect(mf.first == mf.second,
                 "class " + std::to_string(class_index) + " balanced to " +
                     std::to_string(mf.first) + " male vs " + std::to_string(mf.second) +
                     " female");
    }

    // Every training batch is half male, half female.
    for (int epoch : {0, 1}) {
        const auto batches = balanced_batches(state.corpus, Split::train, 8, 3, epoch);
        c.expect(!batches.empty(), "no balanced batches produced");
        for (const auto& batch : batches) {
            c.expect(batch.size() == 8, "batch size " + std::to_string(batch.size()));
            int males = 0;
            for (int idx : batch) {
                const auto& u = state.corpus.utterances[static_cast<std::size_t>(idx)];
                c.expect(u.split == Split::train, "batch contains a non-train utterance");
                males += u.group == Group::male ? 1 : 0;
            }
            c.expect(males == 4, "batch has " + std::to_string(males) + " male of 8");
        }
    }

    // A sweep writes byte-identical results regardless of parallelism.
    ExperimentGrid grid;
    grid.preset = GridPreset::custom;
    grid.dataset_id = state.corpus.name;
    grid.global_seed = 4242;
    grid.axes.sample_rates = {16000};
    grid.axes.architectures = {Architecture::llcnn};
    grid.axes.feature_types = {FeatureType::mfcc};
    grid.axes.mel_banks = {20};
    grid.axes.mfcc_counts = {10};
    grid.axes.frame_lengths_ms = {20, 25};
    grid.axes.frame_steps_pct = {50};
    grid.axes.windows = {WindowFn::hamming, WindowFn::hann};

    SweepOptions options;
    options.train.epochs = 2;
    options.train.batch_size = 8;
    options.train.learning_rate_grid = {1e-2};
    const fs::path serial_dir = state.scratch / "sweep_serial";
    const fs::path parallel_dir = state.scratch / "sweep_parallel";
    options.parallelism = 1;
    run_sweep(grid, state.corpus, SweepStage::train, serial_dir.string(), options);
    options.parallelism = 4;
    run_sweep(grid, state.corpus, SweepStage::train, parallel_dir.string(), options);

    const std::string serial_csv = read_file(serial_dir / "results.csv");
    const std::string parallel_csv = read_file(parallel_dir / "results.csv");
    c.expect(!serial_csv.empty(), "serial sweep produced no results.csv");
    c.expect(serial_csv == parallel_csv,
             "results.csv differs between parallelism 1 and 4");
    // Per-experiment records agree as well, apart from wall-clock timing.
    for (int i = 0; i < 4; ++i) {
        const std::string name = "experiment_" + std::to_string(i) + "_train.json";
        auto serial_record = nlohmann::json::parse(read_file(serial_dir / "records" / name),
                                                   nullptr, false);
        auto parallel_record = nlohmann::json::parse(read_file(parallel_dir / "records" / name),
                                                     nullptr, false);
        c.expect(!serial_record.is_discarded() && !parallel_record.is_discarded(),
                 name + " is missing or malformed");
        if (!c.ok()) {
            break;
        }
        serial_record.erase("wall_seconds");
        parallel_record.erase("wall_seconds");
        c.expect(serial_record == parallel_record,
                 name + " differs between parallelism 1 and 4");
    }
    return c.failure;
}

}  // namespace

int main() {
    SharedState state;
    state.scratch = fs::temp_directory_path() / "kwsbias_acceptance";
    std::error_code ec;
    fs::remove_all(state.scratch, ec);
    fs::create_directories(state.scratch);

    int failures = 0;
    failures += run_check("reliability-bias-oracle", 1.0, check_bias_oracle) ? 0 : 1;
    failures += run_check("mcc-oracle", 5.0, check_mcc_oracle) ? 0 : 1;
    failures += run_check("gradient-check", 30.0, check_gradients) ? 0 : 1;
    failures += run_check("dsp-front-end", 10.0, check_dsp_front_end) ? 0 : 1;
    failures += run_check("pruning-schedule", 60.0, check_pruning_schedule) ? 0 : 1;
    failures += run_check("grid-counts", 1.0, check_grid_counts) ? 0 : 1;
    failures += run_check("desk-scale-training", 180.0,
                          [&] { return check_desk_scale_training(state); })
                    ? 0
                    : 1;
    failures += run_check("pruning-trends", 900.0, [&] { return check_pruning_trends(state); })
                    ? 0
                    : 1;
    failures += run_check("selection-soundness", 0.0,
                          [&] { return check_selection_soundness(state); })
                    ? 0
                    : 1;
    failures += run_check("protocol-invariants", 0.0,
                          [&] { return check_protocol_invariants(state); })
                    ? 0
                    : 1;

    fs::remove_all(state.scratch, ec);
    if (failures != 0) {
        std::printf("%d of 10 checks failed\n", failures);
        return 1;
    }
    std::printf("all 10 checks passed\n");
    return 0;
}
