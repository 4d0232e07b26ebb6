// sweep.hpp -- experiment grids and the sweep harness: expansion, execution
// (optionally multi-threaded), a resumable results CSV and factor summaries.
//
// The results CSV is byte-identical for a given grid, dataset and seed no
// matter how many worker threads run the sweep: records are keyed by
// experiment index, every experiment derives its own RNG streams from
// (global_seed, index), and wall-clock times go only to the JSON sidecars.
#pragma once

#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kwsbias/checkpoint.hpp"
#include "kwsbias/common.hpp"
#include "kwsbias/dataset.hpp"
#include "kwsbias/dsp.hpp"
#include "kwsbias/metrics.hpp"
#include "kwsbias/nn.hpp"
#include "kwsbias/pipeline.hpp"
#include "kwsbias/pruning.hpp"
#include "kwsbias/selection.hpp"

namespace kwsbias {

enum class GridPreset { table_full, table_recommended, custom };
enum class SweepStage { train, prune };

inline const char* to_string(GridPreset p) {
    switch (p) {
        case GridPreset::table_full: return "full";
        case GridPreset::table_recommended: return "recommended";
        case GridPreset::custom: return "custom";
    }
    return "custom";
}

inline const char* to_string(SweepStage s) { return s == SweepStage::train ? "train" : "prune"; }

inline SweepStage sweep_stage_from_string(const std::string& s) {
    if (s == "train") return SweepStage::train;
    if (s == "prune") return SweepStage::prune;
    fail(ErrorCode::invalid_config, "unknown sweep stage '" + s + "'");
}

// Axis values for grid expansion. Training sweeps use the feature/architecture
// axes; pruning sweeps use the sparsity/schedule/frequency/learning-rate axes.
struct GridAxes {
    std::vector<int> sample_rates;
    std::vector<Architecture> architectures;
    std::vector<FeatureType> feature_types;
    std::vector<int> mel_banks;
    std::vector<int> mfcc_counts;
    std::vector<int> frame_lengths_ms;
    std::vector<int> frame_steps_pct;
    std::vector<WindowFn> windows;

    std::vector<double> final_sparsities;
    std::vector<PruneSchedule> schedules;
    std::vector<int> frequencies;
    std::vector<double> pruning_learning_rates;
};

struct ExperimentGrid {
    GridPreset preset = GridPreset::custom;
    GridAxes axes;
    std::string dataset_id;
    std::uint64_t global_seed = 0;

    // The full study grid: both rates and architectures, log-Mel and MFCC
    // front-ends over six filterbank sizes, four frame lengths, three steps
    // and two windows (3456 training combinations), plus the 72-point pruning
    // grid per baseline.
    static ExperimentGrid table_full(std::string dataset_id, std::uint64_t seed) {
        ExperimentGrid grid;
        grid.preset = GridPreset::table_full;
        grid.dataset_id = std::move(dataset_id);
        grid.global_seed = seed;
        grid.axes.sample_rates = {8000, 16000};
        grid.axes.architectures = {Architecture::cnn, Architecture::llcnn};
        grid.axes.feature_types = {FeatureType::log_mel, FeatureType::mfcc};
        grid.axes.mel_banks = {20, 32, 40, 60, 80, 128};
        grid.axes.mfcc_counts = {10, 11, 12, 13, 14};
        grid.axes.frame_lengths_ms = {20, 25, 30, 40};
        grid.axes.frame_steps_pct = {40, 50, 60};
        grid.axes.windows = {WindowFn::hamming, WindowFn::hann};
        grid.axes.final_sparsities = {0.2, 0.5, 0.75, 0.8, 0.85, 0.9};
        grid.axes.schedules = {PruneSchedule::constant, PruneSchedule::polynomial_decay};
        grid.axes.frequencies = {10, 100};
        grid.axes.pruning_learning_rates = {1e-3, 1e-4, 1e-5};
        return grid;
    }

    // The reduced screening grid: MFCC only, small filterbanks, Hamming
    // window -- 48 combinations per (sample rate, architecture).
    static ExperimentGrid table_recommended(std::string dataset_id, std::uint64_t seed) {
        ExperimentGrid grid = table_full(std::move(dataset_id), seed);
        grid.preset = GridPreset::table_recommended;
        grid.axes.feature_types = {FeatureType::mfcc};
        grid.axes.mel_banks = {20, 32};
        grid.axes.mfcc_counts = {10, 11};
        grid.axes.windows = {WindowFn::hamming};
        return grid;
    }
};

struct TrainExperiment {
    int index = 0;
    std::uint64_t seed = 0;
    Architecture architecture = Architecture::cnn;
    FeatureConfig features;
};

struct PruneExperiment {
    int index = 0;
    std::uint64_t seed = 0;
    double final_sparsity = 0.0;
    PruneSchedule schedule = PruneSchedule::polynomial_decay;
    int frequency = 100;
    double learning_rate = 1e-3;
};

// Expands the training grid in documented axis order: sample rate, then
// architecture, feature type, Mel banks, MFCC count (MFCC only), frame
// length, frame step, window. Every experiment's seed is derived from
// (global_seed, index).
inline std::vector<TrainExperiment> expand_grid(const ExperimentGrid& grid) {
    const auto& a = grid.axes;
    require(!a.sample_rates.empty() && !a.architectures.empty() && !a.feature_types.empty() &&
                !a.mel_banks.empty() && !a.frame_lengths_ms.empty() &&
                !a.frame_steps_pct.empty() && !a.windows.empty(),
            ErrorCode::grid_empty, "training grid has an empty axis");
    std::vector<TrainExperiment> experiments;
    int index = 0;
    for (int rate : a.sample_rates) {
        for (Architecture arch : a.architectures) {
            for (FeatureType type : a.feature_types) {
                for (int mel : a.mel_banks) {
                    const std::vector<std::optional<int>> mfccs =
                        type == FeatureType::mfcc
                            ? [&] {
                                  require(!a.mfcc_counts.empty(), ErrorCode::grid_empty,
                                          "mfcc axis is empty");
                                  std::vector<std::optional<int>> v;
                                  for (int m : a.mfcc_counts) {
                                      v.emplace_back(m);
                                  }
                                  return v;
                              }()
                            : std::vector<std::optional<int>>{std::nullopt};
                    for (const auto& mfcc : mfccs) {
                        for (int length : a.frame_lengths_ms) {
                            for (int step : a.frame_steps_pct) {
                                for (WindowFn window : a.windows) {
                                    TrainExperiment e;
                                    e.index = index;
                                    e.seed = mix_seed(grid.global_seed,
                                                      static_cast<std::uint64_t>(index));
                                    e.architecture = arch;
                                    e.features.sample_rate = rate;
                                    e.features.feature_type = type;
                                    e.features.num_mel_banks = mel;
                                    e.features.num_mfcc = mfcc;
                                    e.features.frame_length_ms = length;
                                    e.features.frame_step_pct = step;
                                    e.features.window_fn = window;
                                    e.features.validate();
                                    experiments.push_back(e);
                                    ++index;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return experiments;
}

// Expands the pruning grid in documented axis order: final sparsity, then
// schedule, mask-update frequency, pruning learning rate.
inline std::vector<PruneExperiment> expand_prune_grid(const ExperimentGrid& grid) {
    const auto& a = grid.axes;
    require(!a.final_sparsities.empty() && !a.schedules.empty() && !a.frequencies.empty() &&
                !a.pruning_learning_rates.empty(),
            ErrorCode::grid_empty, "pruning grid has an empty axis");
    std::vector<PruneExperiment> experiments;
    int index = 0;
    for (double sparsity : a.final_sparsities) {
        for (PruneSchedule schedule : a.schedules) {
            for (int frequency : a.frequencies) {
                for (double lr : a.pruning_learning_rates) {
                    PruneExperiment e;
                    e.index = index;
                    e.seed = mix_seed(grid.global_seed, static_cast<std::uint64_t>(index));
                    e.final_sparsity = sparsity;
                    e.schedule = schedule;
                    e.frequency = frequency;
                    e.learning_rate = lr;
                    experiments.push_back(e);
                    ++index;
                }
            }
        }
    }
    return experiments;
}

// One row of the results table. Optional fields stay empty in the CSV when
// they do not apply (MFCC count for log-Mel runs, pruning axes for training
// runs, metrics for failed runs). wall_seconds is sidecar-only so that
// repeated runs produce identical CSV bytes.
struct ExperimentRecord {
    int index = 0;
    std::string stage = "train";
    std::string status = "ok";  // ok | failed:<reason>
    std::uint64_t seed = 0;

    std::optional<Architecture> architecture;
    std::optional<FeatureConfig> features;
    std::optional<double> final_sparsity;
    std::optional<PruneSchedule> schedule;
    std::optional<int> frequency;
    std::optional<double> pruning_learning_rate;

    std::optional<double> chosen_learning_rate;
    std::optional<double> val_mcc;
    std::optional<double> test_mcc;
    std::optional<double> test_mcc_male;
    std::optional<double> test_mcc_female;
    std::optional<double> reliability_bias;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> weighted_f1;
    std::optional<double> cohen_kappa;
    std::optional<double> delta_mcc;
    std::optional<double> delta_reliability_bias;

    double wall_seconds = 0.0;  // not serialized to CSV
};

namespace detail {

// Shortest round-trip decimal representation (std::to_chars), so equal
// doubles always serialize to equal bytes.
inline std::string format_double(double value) {
    char buffer[32];
    const auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
    return std::string(buffer, result.ptr);
}

inline std::string format_optional(const std::optional<double>& value) {
    return value.has_value() ? format_double(*value) : std::string();
}

inline double parse_double(const std::string& text) {
    double value = 0.0;
    const auto result = std::from_chars(text.data(), text.data() + text.size(), value);
    require(result.ec == std::errc(), ErrorCode::io_failure,
            "cannot parse number '" + text + "'");
    return value;
}

inline std::optional<double> parse_optional(const std::string& text) {
    if (text.empty()) {
        return std::nullopt;
    }
    return parse_double(text);
}

}  // namespace detail

inline const std::vector<std::string>& results_csv_columns() {
    static const std::vector<std::string> columns = {
        "index", "stage", "status", "seed", "architecture", "sample_rate", "feature_type",
        "num_mel_banks", "num_mfcc", "frame_length_ms", "frame_step_pct", "window",
        "final_sparsity", "schedule", "frequency", "pruning_learning_rate",
        "chosen_learning_rate", "val_mcc", "test_mcc", "test_mcc_male", "test_mcc_female",
        "reliability_bias", "precision", "recall", "weighted_f1", "cohen_kappa", "delta_mcc",
        "delta_reliability_bias"};
    return columns;
}

inline std::string record_to_csv_row(const ExperimentRecord& r) {
    std::vector<std::string> cells;
    cells.push_back(std::to_string(r.index));
    cells.push_back(r.stage);
    cells.push_back(r.status);
    cells.push_back(std::to_string(r.seed));
    cells.push_back(r.architecture.has_value() ? to_string(*r.architecture) : "");
    if (r.features.has_value()) {
        const auto& f = *r.features;
        cells.push_back(std::to_string(f.sample_rate));
        cells.push_back(to_string(f.feature_type));
        cells.push_back(std::to_string(f.num_mel_banks));
        cells.push_back(f.num_mfcc.has_value() ? std::to_string(*f.num_mfcc) : "");
        cells.push_back(std::to_string(f.frame_length_ms));
        cells.push_back(std::to_string(f.frame_step_pct));
        cells.push_back(to_string(f.window_fn));
    } else {
        for (int i = 0; i < 7; ++i) {
            cells.emplace_back();
        }
    }
    cells.push_back(detail::format_optional(r.final_sparsity));
    cells.push_back(r.schedule.has_value() ? to_string(*r.schedule) : "");
    cells.push_back(r.frequency.has_value() ? std::to_string(*r.frequency) : "");
    cells.push_back(detail::format_optional(r.pruning_learning_rate));
    cells.push_back(detail::format_optional(r.chosen_learning_rate));
    cells.push_back(detail::format_optional(r.val_mcc));
    cells.push_back(detail::format_optional(r.test_mcc));
    cells.push_back(detail::format_optional(r.test_mcc_male));
    cells.push_back(detail::format_optional(r.test_mcc_female));
    cells.push_back(detail::format_optional(r.reliability_bias));
    cells.push_back(detail::format_optional(r.precision));
    cells.push_back(detail::format_optional(r.recall));
    cells.push_back(detail::format_optional(r.weighted_f1));
    cells.push_back(detail::format_optional(r.cohen_kappa));
    cells.push_back(detail::format_optional(r.delta_mcc));
    cells.push_back(detail::format_optional(r.delta_reliability_bias));
    std::string row;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i > 0) {
            row.push_back(',');
        }
        row += cells[i];
    }
    return row;
}

inline void write_results_csv(const std::string& path,
                              const std::vector<ExperimentRecord>& records) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    require(out.good(), ErrorCode::io_failure, "cannot write results '" + path + "'");
    const auto& columns = results_csv_columns();
    for (std::size_t i = 0; i < columns.size(); ++i) {
        if (i > 0) {
            out << ',';
        }
        out << columns[i];
    }
    out << '\n';
    for (const auto& record : records) {
        out << record_to_csv_row(record) << '\n';
    }
    require(out.good(), ErrorCode::io_failure, "failed writing results '" + path + "'");
}

inline std::vector<ExperimentRecord> read_results_csv(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::io_failure, "cannot open results '" + path + "'");
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::io_failure,
            "results file '" + path + "' is empty");
    std::vector<ExperimentRecord> records;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto cells = detail::split_csv_line(line);
        require(cells.size() == results_csv_columns().size(), ErrorCode::io_failure,
                "results row has " + std::to_string(cells.size()) + " cells, expected " +
                    std::to_string(results_csv_columns().size()));
        ExperimentRecord r;
        std::size_t i = 0;
        r.index = static_cast<int>(detail::parse_double(cells[i++]));
        r.stage = cells[i++];
        r.status = cells[i++];
        r.seed = static_cast<std::uint64_t>(std::stoull(cells[i++]));
        if (!cells[i].empty()) {
            r.architecture = architecture_from_string(cells[i]);
        }
        ++i;
        if (!cells[i].empty()) {
            FeatureConfig f;
            f.sample_rate = static_cast<int>(detail::parse_double(cells[i]));
            f.feature_type = feature_type_from_string(cells[i + 1]);
            f.num_mel_banks = static_cast<int>(detail::parse_double(cells[i + 2]));
            if (!cells[i + 3].empty()) {
                f.num_mfcc = static_cast<int>(detail::parse_double(cells[i + 3]));
            } else {
                f.num_mfcc.reset();
            }
            f.frame_length_ms = static_cast<int>(detail::parse_double(cells[i + 4]));
            f.frame_step_pct = static_cast<int>(detail::parse_double(cells[i + 5]));
            f.window_fn = window_fn_from_string(cells[i + 6]);
            r.features = f;
        }
        i += 7;
        r.final_sparsity = detail::parse_optional(cells[i++]);
        if (!cells[i].empty()) {
            r.schedule = prune_schedule_from_string(cells[i]);
        }
        ++i;
        if (!cells[i].empty()) {
            r.frequency = static_cast<int>(detail::parse_double(cells[i]));
        }
        ++i;
        r.pruning_learning_rate = detail::parse_optional(cells[i++]);
        r.chosen_learning_rate = detail::parse_optional(cells[i++]);
        r.val_mcc = detail::parse_optional(cells[i++]);
        r.test_mcc = detail::parse_optional(cells[i++]);
        r.test_mcc_male = detail::parse_optional(cells[i++]);
        r.test_mcc_female = detail::parse_optional(cells[i++]);
        r.reliability_bias = detail::parse_optional(cells[i++]);
        r.precision = detail::parse_optional(cells[i++]);
        r.recall = detail::parse_optional(cells[i++]);
        r.weighted_f1 = detail::parse_optional(cells[i++]);
        r.cohen_kappa = detail::parse_optional(cells[i++]);
        r.delta_mcc = detail::parse_optional(cells[i++]);
        r.delta_reliability_bias = detail::parse_optional(cells[i++]);
        records.push_back(std::move(r));
    }
    return records;
}

struct SweepOptions {
    TrainConfig train;           // template; the per-experiment seed overrides train.seed
    int prune_epochs = 10;       // fine-tuning epochs for the prune stage
    int parallelism = 1;
    bool resume = true;          // reuse ok rows from an existing results.csv
    bool save_checkpoints = false;
    std::string baseline_checkpoint;  // required for the prune stage
};

namespace detail {

inline void fill_metrics(ExperimentRecord& record, const EvalReport& report) {
    record.test_mcc = report.overall_mcc;
    record.test_mcc_male = report.mcc_by_group.at("male");
    record.test_mcc_female = report.mcc_by_group.at("female");
    record.reliability_bias = report.reliability_bias;
    record.precision = report.aux.precision;
    record.recall = report.aux.recall;
    record.weighted_f1 = report.aux.weighted_f1;
    record.cohen_kappa = report.aux.cohen_kappa;
}

inline std::string failure_status(const Error& e) {
    return std::string("failed:") + to_string(e.code());
}

inline void write_sidecar(const std::string& out_dir, const ExperimentRecord& record,
                          const nlohmann::json& extra) {
    nlohmann::json j;
    j["index"] = record.index;
    j["stage"] = record.stage;
    j["status"] = record.status;
    j["seed"] = record.seed;
    j["wall_seconds"] = record.wall_seconds;
    for (const auto& [key, value] : extra.items()) {
        j[key] = value;
    }
    const auto path = std::filesystem::path(out_dir) / "records" /
                      ("experiment_" + std::to_string(record.index) + "_" + record.stage + ".json");
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), ErrorCode::io_failure, "cannot write sidecar '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

}  // namespace detail

// Runs one training experiment: features, model, learning-rate grid, test
// evaluation. Failures are captured in the record status, not thrown, so a
// sweep survives individual bad configurations.
inline ExperimentRecord run_experiment(const TrainExperiment& experiment,
                                       const Dataset& dataset,
                                       const std::vector<AudioClip>& clips,
                                       const SweepOptions& options, const std::string& out_dir) {
    ExperimentRecord record;
    record.index = experiment.index;
    record.stage = "train";
    record.seed = experiment.seed;
    record.architecture = experiment.architecture;
    record.features = experiment.features;
    const auto start = std::chrono::steady_clock::now();
    nlohmann::json sidecar;
    sidecar["features"] = to_json(experiment.features);
    sidecar["architecture"] = to_string(experiment.architecture);
    try {
        const auto features = build_feature_table(clips, experiment.features);
        const auto [frames, coeffs] = feature_shape(experiment.features);
        const ModelSpec spec = ModelSpec::defaults(experiment.architecture, frames, coeffs,
                                                   dataset.num_classes());
        TrainConfig train_config = options.train;
        train_config.seed = experiment.seed;
        const TrainResult trained = train(spec, dataset, features, train_config);
        record.chosen_learning_rate = trained.learning_rate;
        record.val_mcc = trained.val_mcc;
        const std::string model_id = "experiment_" + std::to_string(experiment.index);
        const EvalReport report = evaluate(trained.params, dataset, features, Split::test,
                                           model_id);
        detail::fill_metrics(record, report);
        sidecar["report"] = to_json(report);
        sidecar["model_spec"] = to_json(spec);
        if (options.save_checkpoints) {
            const auto path = std::filesystem::path(out_dir) / "checkpoints" /
                              (model_id + ".ckpt");
            save_checkpoint(path.string(), trained.params, nullptr, &experiment.features);
        }
    } catch (const Error& e) {
        record.status = detail::failure_status(e);
        sidecar["error"] = e.what();
    }
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    detail::write_sidecar(out_dir, record, sidecar);
    return record;
}

// Runs one pruning experiment against a fixed baseline model.
inline ExperimentRecord run_experiment(const PruneExperiment& experiment,
                                       const Dataset& dataset,
                                       const ModelParams& baseline,
                                       const FeatureConfig& baseline_features,
                                       const std::vector<FeatureMatrix>& features,
                                       const EvalReport& baseline_report,
                                       const SweepOptions& options, const std::string& out_dir) {
    ExperimentRecord record;
    record.index = experiment.index;
    record.stage = "prune";
    record.seed = experiment.seed;
    record.architecture = baseline.spec.architecture;
    record.features = baseline_features;
    record.final_sparsity = experiment.final_sparsity;
    record.schedule = experiment.schedule;
    record.frequency = experiment.frequency;
    record.pruning_learning_rate = experiment.learning_rate;
    const auto start = std::chrono::steady_clock::now();
    nlohmann::json sidecar;
    try {
        PruneConfig config;
        config.final_sparsity = experiment.final_sparsity;
        config.schedule = experiment.schedule;
        config.frequency = experiment.frequency;
        config.learning_rate = experiment.learning_rate;
        config.epochs = options.prune_epochs;
        config.batch_size = options.train.batch_size;
        config.seed = experiment.seed;
        const PruneResult pruned = prune_train(baseline, config, dataset, features);
        const std::string model_id = "experiment_" + std::to_string(experiment.index) + "_pruned";
        const EvalReport report = evaluate(pruned.params, dataset, features, Split::test,
                                           model_id);
        detail::fill_metrics(record, report);
        const DeltaReport delta = delta_report(baseline_report, report);
        record.delta_mcc = delta.delta_mcc;
        record.delta_reliability_bias = delta.delta_reliability_bias;
        sidecar["report"] = to_json(report);
        sidecar["delta"] = to_json(delta);
        nlohmann::json sparsity = nlohmann::json::array();
        for (const auto& ts : achieved_sparsity(pruned.params)) {
            sparsity.push_back({{"tensor", ts.name},
                                {"zeros", ts.zeros},
                                {"size", ts.size}});
        }
        sidecar["achieved_sparsity"] = std::move(sparsity);
        if (options.save_checkpoints) {
            const auto path = std::filesystem::path(out_dir) / "checkpoints" /
                              (model_id + ".ckpt");
            save_checkpoint(path.string(), pruned.params, &pruned.masks, &baseline_features);
        }
    } catch (const Error& e) {
        record.status = detail::failure_status(e);
        sidecar["error"] = e.what();
    }
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    detail::write_sidecar(out_dir, record, sidecar);
    return record;
}

namespace detail {

// Generic index-keyed worker pool. Records land in a pre-sized vector, so
// scheduling order never affects the output.
template <typename RunOne>
inline void run_indexed(std::size_t count, int parallelism, const RunOne& run_one) {
    if (parallelism <= 1) {
        for (std::size_t i = 0; i < count; ++i) {
            run_one(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    const auto worker_count = static_cast<std::size_t>(
        std::min<std::size_t>(static_cast<std::size_t>(parallelism), count));
    workers.reserve(worker_count);
    for (std::size_t w = 0; w < worker_count; ++w) {
        workers.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
                run_one(i);
            }
        });
    }
    for (auto& t : workers) {
        t.join();
    }
}

}  // namespace detail

// Runs a full sweep and writes <out_dir>/results.csv plus one JSON sidecar
// per experiment. With resume enabled, rows already present with status ok
// are kept as-is and their experiments are skipped; failed rows are retried.
inline std::vector<ExperimentRecord> run_sweep(const ExperimentGrid& grid,
                                               const Dataset& dataset, SweepStage stage,
                                               const std::string& out_dir,
                                               const SweepOptions& options) {
    require(options.parallelism >= 1, ErrorCode::invalid_config, "parallelism must be >= 1");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "records", ec);
    require(!ec, ErrorCode::io_failure, "cannot create '" + out_dir + "'");
    if (options.save_checkpoints) {
        fs::create_directories(fs::path(out_dir) / "checkpoints", ec);
        require(!ec, ErrorCode::io_failure, "cannot create checkpoint directory");
    }

    const std::string results_path = (fs::path(out_dir) / "results.csv").string();
    std::map<int, ExperimentRecord> completed;
    if (options.resume && fs::exists(results_path)) {
        for (auto& record : read_results_csv(results_path)) {
            if (record.status == "ok" && record.stage == to_string(stage)) {
                completed.emplace(record.index, std::move(record));
            }
        }
    }

    std::vector<ExperimentRecord> records;
    if (stage == SweepStage::train) {
        const auto experiments = expand_grid(grid);
        const auto clips = load_clips(dataset);
        records.resize(experiments.size());
        detail::run_indexed(experiments.size(), options.parallelism, [&](std::size_t i) {
            const auto it = completed.find(experiments[i].index);
            if (it != completed.end()) {
                records[i] = it->second;
                return;
            }
            records[i] = run_experiment(experiments[i], dataset, clips, options, out_dir);
        });
    } else {
        const auto experiments = expand_prune_grid(grid);
        records.resize(experiments.size());
        if (options.baseline_checkpoint.empty() || !fs::exists(options.baseline_checkpoint)) {
            // A prune sweep without its baseline still produces a results
            // table; every row reports the missing dependency.
            for (std::size_t i = 0; i < experiments.size(); ++i) {
                ExperimentRecord record;
                record.index = experiments[i].index;
                record.stage = "prune";
                record.seed = experiments[i].seed;
                record.final_sparsity = experiments[i].final_sparsity;
                record.schedule = experiments[i].schedule;
                record.frequency = experiments[i].frequency;
                record.pruning_learning_rate = experiments[i].learning_rate;
                record.status = "failed:missing-baseline";
                detail::write_sidecar(out_dir, record,
                                      {{"error", "baseline checkpoint not found: '" +
                                                     options.baseline_checkpoint + "'"}});
                records[i] = std::move(record);
            }
        } else {
            const Checkpoint baseline = load_checkpoint(options.baseline_checkpoint);
            require(baseline.features.has_value(), ErrorCode::invalid_config,
                    "baseline checkpoint does not record its feature configuration");
            const auto features = build_feature_table(dataset, *baseline.features);
            const EvalReport baseline_report =
                evaluate(baseline.params, dataset, features, Split::test, "baseline");
            detail::run_indexed(experiments.size(), options.parallelism, [&](std::size_t i) {
                const auto it = completed.find(experiments[i].index);
                if (it != completed.end()) {
                    records[i] = it->second;
                    return;
                }
                records[i] = run_experiment(experiments[i], dataset, baseline.params,
                                            *baseline.features, features, baseline_report,
                                            options, out_dir);
            });
        }
    }
    write_results_csv(results_path, records);
    return records;
}

// --- summaries --------------------------------------------------------------

struct SummaryRow {
    std::string factor;
    std::string level;
    long long count = 0;  // ok records at this level
    std::optional<double> mcc_median, mcc_q1, mcc_q3;
    std::optional<double> bias_median, bias_q1, bias_q3;
};

namespace detail {

inline std::optional<std::string> factor_level(const ExperimentRecord& r,
                                               const std::string& factor) {
    if (factor == "architecture") {
        if (r.architecture.has_value()) return std::string(to_string(*r.architecture));
        return std::nullopt;
    }
    if (r.features.has_value()) {
        const auto& f = *r.features;
        if (factor == "sample_rate") return std::to_string(f.sample_rate);
        if (factor == "feature_type") return std::string(to_string(f.feature_type));
        if (factor == "num_mel_banks") return std::to_string(f.num_mel_banks);
        if (factor == "num_mfcc") {
            if (f.num_mfcc.has_value()) return std::to_string(*f.num_mfcc);
            return std::nullopt;
        }
        if (factor == "frame_length_ms") return std::to_string(f.frame_length_ms);
        if (factor == "frame_step_pct") return std::to_string(f.frame_step_pct);
        if (factor == "window") return std::string(to_string(f.window_fn));
    }
    if (factor == "final_sparsity") {
        if (r.final_sparsity.has_value()) return format_double(*r.final_sparsity);
        return std::nullopt;
    }
    if (factor == "schedule") {
        if (r.schedule.has_value()) return std::string(to_string(*r.schedule));
        return std::nullopt;
    }
    if (factor == "frequency") {
        if (r.frequency.has_value()) return std::to_string(*r.frequency);
        return std::nullopt;
    }
    if (factor == "pruning_learning_rate") {
        if (r.pruning_learning_rate.has_value()) return format_double(*r.pruning_learning_rate);
        return std::nullopt;
    }
    return std::nullopt;
}

}  // namespace detail

inline const std::vector<std::string>& known_factors() {
    static const std::vector<std::string> factors = {
        "architecture", "sample_rate", "feature_type", "num_mel_banks", "num_mfcc",
        "frame_length_ms", "frame_step_pct", "window", "final_sparsity", "schedule",
        "frequency", "pruning_learning_rate"};
    return factors;
}

// Per-factor-level quartile summary of test MCC and reliability bias over the
// ok records. Levels appear in first-appearance (grid) order.
inline std::vector<SummaryRow> summarize(const std::vector<ExperimentRecord>& records,
                                         const std::vector<std::string>& factors) {
    require(!factors.empty(), ErrorCode::invalid_argument, "no factors requested");
    for (const auto& factor : factors) {
        bool known = false;
        for (const auto& f : known_factors()) {
            known = known || f == factor;
        }
        require(known, ErrorCode::invalid_argument, "unknown factor '" + factor + "'");
    }
    std::vector<const ExperimentRecord*> ok;
    for (const auto& r : records) {
        if (r.status == "ok") {
            ok.push_back(&r);
        }
    }
    require(!ok.empty(), ErrorCode::summary_empty, "no successful records to summarize");

    std::vector<SummaryRow> rows;
    for (const auto& factor : factors) {
        std::vector<std::string> levels;
        std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_level;
        for (const auto* r : ok) {
            const auto level = detail::factor_level(*r, factor);
            if (!level.has_value()) {
                continue;
            }
            if (by_level.find(*level) == by_level.end()) {
                levels.push_back(*level);
            }
            auto& [mccs, biases] = by_level[*level];
            if (r->test_mcc.has_value()) {
                mccs.push_back(*r->test_mcc);
            }
            if (r->reliability_bias.has_value()) {
                biases.push_back(*r->reliability_bias);
            }
        }
        for (const auto& level : levels) {
            auto& [mccs, biases] = by_level[level];
            SummaryRow row;
            row.factor = factor;
            row.level = level;
            row.count = static_cast<long long>(mccs.size());
            std::sort(mccs.begin(), mccs.end());
            std::sort(biases.begin(), biases.end());
            if (!mccs.empty()) {
                row.mcc_q1 = quantile_sorted(mccs, 0.25);
                row.mcc_median = quantile_sorted(mccs, 0.5);
                row.mcc_q3 = quantile_sorted(mccs, 0.75);
            }
            if (!biases.empty()) {
                row.bias_q1 = quantile_sorted(biases, 0.25);
                row.bias_median = quantile_sorted(biases, 0.5);
                row.bias_q3 = quantile_sorted(biases, 0.75);
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

inline void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    require(out.good(), ErrorCode::io_failure, "cannot write summary '" + path + "'");
    out << "factor,level,count,mcc_median,mcc_q1,mcc_q3,bias_median,bias_q1,bias_q3\n";
    for (const auto& row : rows) {
        out << row.factor << ',' << row.level << ',' << row.count << ','
            << detail::format_optional(row.mcc_median) << ','
            << detail::format_optional(row.mcc_q1) << ','
            << detail::format_optional(row.mcc_q3) << ','
            << detail::format_optional(row.bias_median) << ','
            << detail::format_optional(row.bias_q1) << ','
            << detail::format_optional(row.bias_q3) << '\n';
    }
    require(out.good(), ErrorCode::io_failure, "failed writing summary '" + path + "'");
}

}  // namespace kwsbias
