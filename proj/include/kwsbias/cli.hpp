// cli.hpp -- the command-line front end: eight subcommands (synth, featurize,
// train, prune, evaluate, select, sweep, summarize) over one settings model.
//
// Settings resolve in a fixed precedence: built-in defaults, then a JSON
// config file (--config), then dotted --set key=value overrides, then
// explicit flags. Unknown keys are rejected. Every run writes its fully
// resolved settings to <out>/resolved_config.json before doing any work, so
// a run is reproducible from the snapshot alone. Exit codes: 0 success,
// 1 runtime failure, 2 configuration error; every failure prints a single
// machine-readable JSON line to stderr.
#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
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
#include "kwsbias/sweep.hpp"

namespace kwsbias {
namespace cli {

using nlohmann::json;

// Environment variable consulted when --out is not given; the output
// directory then defaults to $KWSBIAS_OUTPUT_ROOT/<subcommand>.
inline constexpr const char* kOutputRootEnv = "KWSBIAS_OUTPUT_ROOT";

namespace detail {

namespace fs = std::filesystem;

inline bool compatible_types(const json& base, const json& value) {
    if (base.is_null() || value.is_null()) {
        return true;
    }
    if (base.is_number() && value.is_number()) {
        return true;
    }
    return base.type() == value.type();
}

// Overlays a config object onto the defaults tree. Keys absent from the
// defaults are rejected, as are type changes, so typos surface immediately.
inline void merge_config(json& base, const json& overlay, const std::string& prefix) {
    for (const auto& [key, value] : overlay.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        const auto it = base.find(key);
        require(it != base.end(), ErrorCode::config_error, "unknown config key '" + path + "'");
        if (it->is_object() && value.is_object()) {
            merge_config(*it, value, path);
            continue;
        }
        require(compatible_types(*it, value), ErrorCode::config_error,
                "config key '" + path + "' expects " + std::string(it->type_name()) + ", got " +
                    std::string(value.type_name()));
        *it = value;
    }
}

// --set values are JSON when they parse as JSON (numbers, booleans, null,
// arrays, objects) and plain strings otherwise, so quoting stays optional.
inline json parse_value_text(const std::string& text) {
    json parsed = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (parsed.is_discarded()) {
        return json(text);
    }
    return parsed;
}

inline void apply_override(json& settings, const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos && eq > 0, ErrorCode::config_error,
            "--set expects key=value, got '" + assignment + "'");
    const std::string dotted = assignment.substr(0, eq);
    const json value = parse_value_text(assignment.substr(eq + 1));

    std::vector<std::string> segments;
    std::size_t start = 0;
    while (true) {
        const auto dot = dotted.find('.', start);
        if (dot == std::string::npos) {
            segments.push_back(dotted.substr(start));
            break;
        }
        segments.push_back(dotted.substr(start, dot - start));
        start = dot + 1;
    }

    json* node = &settings;
    std::string path;
    for (std::size_t i = 0; i + 1 < segments.size(); ++i) {
        path = path.empty() ? segments[i] : path + "." + segments[i];
        require(node->is_object() && node->contains(segments[i]), ErrorCode::config_error,
                "unknown config key '" + path + "'");
        node = &(*node)[segments[i]];
        require(node->is_object(), ErrorCode::config_error,
                "config key '" + path + "' is not a section");
    }
    const std::string& leaf = segments.back();
    path = path.empty() ? leaf : path + "." + leaf;
    require(node->is_object() && node->contains(leaf), ErrorCode::config_error,
            "unknown config key '" + path + "'");
    require(compatible_types((*node)[leaf], value), ErrorCode::config_error,
            "config key '" + path + "' expects " + std::string((*node)[leaf].type_name()) +
                ", got " + std::string(value.type_name()));
    (*node)[leaf] = value;
}

inline json load_config_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::config_error, "cannot open config file '" + path + "'");
    json parsed = json::parse(in, nullptr, /*allow_exceptions=*/false);
    require(!parsed.is_discarded(), ErrorCode::config_error,
            "config file '" + path + "' is not valid JSON");
    require(parsed.is_object(), ErrorCode::config_error,
            "config file '" + path + "' must hold a JSON object");
    return parsed;
}

// Reads a typed value out of the resolved settings, turning JSON type
// mishaps (e.g. a string inside a numeric array) into config errors.
template <typename T>
inline T setting(const json& settings, const json::json_pointer& ptr) {
    try {
        return settings.at(ptr).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorCode::config_error,
             "bad config value at '" + ptr.to_string() + "': " + e.what());
    }
}

inline std::string resolve_out_dir(const std::string& flag_value, const std::string& subcommand) {
    if (!flag_value.empty()) {
        return flag_value;
    }
    const char* root = std::getenv(kOutputRootEnv);
    const std::string base = (root != nullptr && root[0] != '\0') ? root : ".";
    return (fs::path(base) / subcommand).string();
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    require(out.good(), ErrorCode::io_failure, "cannot write '" + path.string() + "'");
    out << text;
    require(out.good(), ErrorCode::io_failure, "failed writing '" + path.string() + "'");
}

inline void write_json_file(const fs::path& path, const json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

inline void write_snapshot(const std::string& out_dir, const std::string& subcommand,
                           const json& settings) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    require(!ec, ErrorCode::io_failure, "cannot create output directory '" + out_dir + "'");
    json snapshot;
    snapshot["subcommand"] = subcommand;
    snapshot["output_dir"] = out_dir;
    snapshot["settings"] = settings;
    write_json_file(fs::path(out_dir) / "resolved_config.json", snapshot);
}

// Shared ingestion protocol: optional keyword selection (drop short words,
// deduplicate three-character prefixes, cap the class count), optional
// per-keyword gender balancing, and an automatic speaker-disjoint split when
// the manifest assigns no splits at all. Manifest-provided splits win.
inline Dataset prepare_dataset(const std::string& manifest_path, bool select_top_keywords,
                               bool balance_genders, std::uint64_t seed) {
    require(!manifest_path.empty(), ErrorCode::config_error,
            "a dataset manifest is required (--dataset)");
    Dataset dataset = load_manifest(manifest_path);
    if (select_top_keywords) {
        std::vector<std::pair<std::string, long long>> counts;
        counts.reserve(dataset.utterances.size());
        for (const auto& u : dataset.utterances) {
            counts.emplace_back(u.keyword, 1);
        }
        const auto selected = select_keywords(counts);
        const std::set<std::string> keep(selected.begin(), selected.end());
        Dataset filtered;
        filtered.name = dataset.name;
        filtered.dropped_rows = dataset.dropped_rows;
        filtered.dropped_keywords =
            dataset.dropped_keywords + static_cast<int>(dataset.keywords.size() - keep.size());
        for (const auto& u : dataset.utterances) {
            if (keep.count(u.keyword) > 0) {
                filtered.utterances.push_back(u);
            }
        }
        require(!filtered.utterances.empty(), ErrorCode::insufficient_data,
                "keyword selection removed every utterance");
        kwsbias::detail::reindex(filtered);
        dataset = std::move(filtered);
    }
    if (balance_genders) {
        dataset = gender_balance(dataset, seed);
    }
    bool any_assigned = false;
    for (const auto& u : dataset.utterances) {
        any_assigned = any_assigned || u.split != Split::unassigned;
    }
    if (!any_assigned) {
        dataset = split_dataset(dataset, SplitRatios{}, seed);
    }
    return dataset;
}

inline json default_features() {
    return to_json(FeatureConfig{});
}

// Resolves the features block into a validated FeatureConfig; log-Mel runs
// ignore the (defaulted) coefficient count, which is cleared in place so the
// snapshot shows what actually ran.
inline FeatureConfig features_from_settings(json& settings) {
    json& block = settings.at("features");
    if (setting<std::string>(settings, json::json_pointer("/features/feature_type")) ==
        "log_mel") {
        block["num_mfcc"] = nullptr;
    }
    FeatureConfig config;
    try {
        config = feature_config_from_json(block);
    } catch (const json::exception& e) {
        fail(ErrorCode::config_error, std::string("bad features config: ") + e.what());
    }
    config.validate();
    return config;
}

inline TrainConfig train_config_from_settings(const json& settings, std::uint64_t seed) {
    TrainConfig config;
    config.epochs = setting<int>(settings, json::json_pointer("/train/epochs"));
    config.batch_size = setting<int>(settings, json::json_pointer("/train/batch_size"));
    config.learning_rate_grid =
        setting<std::vector<double>>(settings, json::json_pointer("/train/learning_rate_grid"));
    config.seed = seed;
    config.validate();
    return config;
}

inline json record_to_json(const ExperimentRecord& r) {
    json j;
    j["index"] = r.index;
    j["stage"] = r.stage;
    j["status"] = r.status;
    j["test_mcc"] = r.test_mcc.has_value() ? json(*r.test_mcc) : json(nullptr);
    j["reliability_bias"] =
        r.reliability_bias.has_value() ? json(*r.reliability_bias) : json(nullptr);
    if (r.architecture.has_value()) {
        j["architecture"] = to_string(*r.architecture);
    }
    if (r.features.has_value()) {
        j["features"] = to_json(*r.features);
    }
    if (r.final_sparsity.has_value()) {
        j["final_sparsity"] = *r.final_sparsity;
    }
    if (r.schedule.has_value()) {
        j["schedule"] = to_string(*r.schedule);
    }
    if (r.frequency.has_value()) {
        j["frequency"] = *r.frequency;
    }
    if (r.pruning_learning_rate.has_value()) {
        j["pruning_learning_rate"] = *r.pruning_learning_rate;
    }
    if (r.delta_mcc.has_value()) {
        j["delta_mcc"] = *r.delta_mcc;
    }
    if (r.delta_reliability_bias.has_value()) {
        j["delta_reliability_bias"] = *r.delta_reliability_bias;
    }
    return j;
}

// --- subcommand runners -----------------------------------------------------

inline void run_synth(json& settings, const std::string& out_dir) {
    write_snapshot(out_dir, "synth", settings);
    SynthConfig config;
    config.num_classes = setting<int>(settings, json::json_pointer("/classes"));
    config.speakers_per_gender =
        setting<int>(settings, json::json_pointer("/speakers_per_gender"));
    config.utterances_per_speaker =
        setting<int>(settings, json::json_pointer("/utterances_per_speaker"));
    config.sample_rate = setting<int>(settings, json::json_pointer("/sample_rate"));
    config.clip_duration_ms = setting<int>(settings, json::json_pointer("/clip_duration_ms"));
    config.seed = setting<std::uint64_t>(settings, json::json_pointer("/seed"));
    Dataset dataset = synth_dataset(config, out_dir);

    // Optional held-out-speaker protocol: speaker 00 of each gender goes to
    // test, speaker 01 to validation, the rest to train, so every split sees
    // all keywords and both genders. Without it, splits stay unassigned and
    // downstream commands split by speaker pair.
    const bool speaker_splits = setting<bool>(settings, json::json_pointer("/speaker_splits"));
    if (speaker_splits) {
        require(config.speakers_per_gender >= 3, ErrorCode::config_error,
                "speaker splits need at least 3 speakers per gender");
        for (auto& u : dataset.utterances) {
            const std::string number = u.speaker_id.substr(1);
            u.split = number == "00"   ? Split::test
                      : number == "01" ? Split::validation
                                       : Split::train;
        }
        save_manifest(dataset, (fs::path(out_dir) / "manifest.csv").string());
    }

    json summary;
    summary["manifest"] = (fs::path(out_dir) / "manifest.csv").string();
    summary["utterances"] = dataset.utterances.size();
    summary["keywords"] = dataset.keywords;
    summary["splits"] = speaker_splits ? "speaker-held-out" : "unassigned";
    std::cout << summary.dump(2) << std::endl;
}

inline void run_featurize(json& settings, const std::string& out_dir) {
    const FeatureConfig config = features_from_settings(settings);
    write_snapshot(out_dir, "featurize", settings);
    const std::string manifest = setting<std::string>(settings, json::json_pointer("/dataset"));
    const Dataset dataset =
        prepare_dataset(manifest, false, false,
                        setting<std::uint64_t>(settings, json::json_pointer("/seed")));
    const auto features = build_feature_table(dataset, config);
    const auto [frames, coeffs] = feature_shape(config);

    json out;
    out["dataset"] = manifest;
    out["features"] = to_json(config);
    out["num_frames"] = frames;
    out["num_coeffs"] = coeffs;
    json rows = json::array();
    for (std::size_t i = 0; i < dataset.utterances.size(); ++i) {
        const auto& u = dataset.utterances[i];
        json row;
        row["path"] = u.audio_path;
        row["keyword"] = u.keyword;
        row["speaker_id"] = u.speaker_id;
        row["gender"] = to_string(u.group);
        row["split"] = to_string(u.split);
        row["values"] = features[i].values;
        rows.push_back(std::move(row));
    }
    out["utterances"] = std::move(rows);
    const auto path = fs::path(out_dir) / "features.json";
    write_json_file(path, out);

    json summary;
    summary["output"] = path.string();
    summary["utterances"] = dataset.utterances.size();
    summary["num_frames"] = frames;
    summary["num_coeffs"] = coeffs;
    std::cout << summary.dump(2) << std::endl;
}

inline void run_train(json& settings, const std::string& out_dir) {
    const FeatureConfig feature_config = features_from_settings(settings);
    write_snapshot(out_dir, "train", settings);
    const auto seed = setting<std::uint64_t>(settings, json::json_pointer("/seed"));
    const Dataset dataset = prepare_dataset(
        setting<std::string>(settings, json::json_pointer("/dataset")),
        setting<bool>(settings, json::json_pointer("/protocol/select_keywords")),
        setting<bool>(settings, json::json_pointer("/protocol/gender_balance")), seed);
    const auto features = build_feature_table(dataset, feature_config);
    const auto [frames, coeffs] = feature_shape(feature_config);
    const Architecture arch = architecture_from_string(
        setting<std::string>(settings, json::json_pointer("/architecture")));
    const ModelSpec spec = ModelSpec::defaults(arch, frames, coeffs, dataset.num_classes());
    const TrainConfig train_config = train_config_from_settings(settings, seed);

    const TrainResult result = train(spec, dataset, features, train_config);
    const EvalReport report = evaluate(result.params, dataset, features, Split::test, "model");

    const auto checkpoint_path = fs::path(out_dir) / "model.ckpt";
    save_checkpoint(checkpoint_path.string(), result.params, nullptr, &feature_config);
    write_json_file(fs::path(out_dir) / "report.json", to_json(report));

    json summary;
    summary["checkpoint"] = checkpoint_path.string();
    summary["report"] = (fs::path(out_dir) / "report.json").string();
    summary["chosen_learning_rate"] = result.learning_rate;
    summary["val_mcc"] = result.val_mcc;
    summary["test_mcc"] = report.overall_mcc;
    summary["reliability_bias"] =
        report.reliability_bias.has_value() ? json(*report.reliability_bias) : json(nullptr);
    std::cout << summary.dump(2) << std::endl;
}

inline void run_prune(json& settings, const std::string& out_dir) {
    write_snapshot(out_dir, "prune", settings);
    const auto seed = setting<std::uint64_t>(settings, json::json_pointer("/seed"));
    const std::string baseline_path =
        setting<std::string>(settings, json::json_pointer("/baseline"));
    require(!baseline_path.empty(), ErrorCode::config_error,
            "a baseline checkpoint is required (--baseline)");
    const Checkpoint baseline = load_checkpoint(baseline_path);
    require(baseline.features.has_value(), ErrorCode::invalid_config,
            "baseline checkpoint does not record its feature configuration");

    const Dataset dataset = prepare_dataset(
        setting<std::string>(settings, json::json_pointer("/dataset")), false, false, seed);
    const auto features = build_feature_table(dataset, *baseline.features);

    PruneConfig config;
    config.final_sparsity = setting<double>(settings, json::json_pointer("/prune/final_sparsity"));
    config.initial_sparsity =
        setting<double>(settings, json::json_pointer("/prune/initial_sparsity"));
    config.schedule = prune_schedule_from_string(
        setting<std::string>(settings, json::json_pointer("/prune/schedule")));
    config.frequency = setting<int>(settings, json::json_pointer("/prune/frequency"));
    config.learning_rate = setting<double>(settings, json::json_pointer("/prune/learning_rate"));
    config.epochs = setting<int>(settings, json::json_pointer("/prune/epochs"));
    config.batch_size = setting<int>(settings, json::json_pointer("/prune/batch_size"));
    config.seed = seed;

    const EvalReport baseline_report =
        evaluate(baseline.params, dataset, features, Split::test, "baseline");
    const PruneResult pruned = prune_train(baseline.params, config, dataset, features);
    const EvalReport report = evaluate(pruned.params, dataset, features, Split::test, "pruned");
    const DeltaReport delta = delta_report(baseline_report, report);

    const auto checkpoint_path = fs::path(out_dir) / "pruned.ckpt";
    save_checkpoint(checkpoint_path.string(), pruned.params, &pruned.masks, &*baseline.features);
    write_json_file(fs::path(out_dir) / "report.json", to_json(report));
    write_json_file(fs::path(out_dir) / "baseline_report.json", to_json(baseline_report));
    json delta_out;
    delta_out["delta"] = to_json(delta);
    json sparsity = json::array();
    for (const auto& ts : achieved_sparsity(pruned.params)) {
        sparsity.push_back({{"tensor", ts.name}, {"zeros", ts.zeros}, {"size", ts.size}});
    }
    delta_out["achieved_sparsity"] = std::move(sparsity);
    write_json_file(fs::path(out_dir) / "delta.json", delta_out);

    json summary;
    summary["checkpoint"] = checkpoint_path.string();
    summary["test_mcc"] = report.overall_mcc;
    summary["delta_mcc"] = delta.delta_mcc;
    summary["reliability_bias"] =
        report.reliability_bias.has_value() ? json(*report.reliability_bias) : json(nullptr);
    std::cout << summary.dump(2) << std::endl;
}

inline void run_evaluate(json& settings, const std::string& out_dir) {
    write_snapshot(out_dir, "evaluate", settings);
    const std::string checkpoint_path =
        setting<std::string>(settings, json::json_pointer("/checkpoint"));
    require(!checkpoint_path.empty(), ErrorCode::config_error,
            "a checkpoint is required (--checkpoint)");
    const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
    require(checkpoint.features.has_value(), ErrorCode::invalid_config,
            "checkpoint does not record its feature configuration");
    const Dataset dataset = prepare_dataset(
        setting<std::string>(settings, json::json_pointer("/dataset")), false, false,
        setting<std::uint64_t>(settings, json::json_pointer("/seed")));
    const auto features = build_feature_table(dataset, *checkpoint.features);
    const Split split =
        split_from_string(setting<std::string>(settings, json::json_pointer("/split")));
    const EvalReport report =
        evaluate(checkpoint.params, dataset, features, split,
                 setting<std::string>(settings, json::json_pointer("/model_id")));
    write_json_file(fs::path(out_dir) / "report.json", to_json(report));
    std::cout << to_json(report).dump(2) << std::endl;
}

inline void run_select(json& settings, const std::string& out_dir) {
    write_snapshot(out_dir, "select", settings);
    const std::string results_path =
        setting<std::string>(settings, json::json_pointer("/results"));
    require(!results_path.empty(), ErrorCode::config_error,
            "a results file is required (positional argument or --results)");
    const auto records = read_results_csv(results_path);

    std::vector<ScoredModel> candidates;
    std::map<int, const ExperimentRecord*> by_index;
    for (const auto& r : records) {
        if (r.status == "ok" && r.test_mcc.has_value()) {
            ScoredModel model;
            model.id = std::to_string(r.index);
            model.mcc = *r.test_mcc;
            model.reliability_bias = r.reliability_bias;
            candidates.push_back(std::move(model));
            by_index[r.index] = &r;
        }
    }

    SelectionCriterion criterion;
    criterion.kind = criterion_from_string(
        setting<std::string>(settings, json::json_pointer("/criterion")));
    criterion.accuracy_tolerance = setting<double>(settings, json::json_pointer("/tolerance"));
    criterion.top_m = setting<int>(settings, json::json_pointer("/top"));
    const auto chosen = select(candidates, criterion);

    json out = json::array();
    for (const auto& model : chosen) {
        out.push_back(record_to_json(*by_index.at(std::stoi(model.id))));
    }
    write_json_file(fs::path(out_dir) / "selection.json", out);
    std::cout << out.dump(2) << std::endl;
}

inline GridAxes axes_from_json(const json& overlay, const GridAxes& base) {
    GridAxes axes = base;
    const auto ints = [](const json& v) {
        std::vector<int> out;
        for (const auto& x : v) {
            require(x.is_number(), ErrorCode::config_error, "axis values must be numbers");
            out.push_back(x.get<int>());
        }
        return out;
    };
    const auto doubles = [](const json& v) {
        std::vector<double> out;
        for (const auto& x : v) {
            require(x.is_number(), ErrorCode::config_error, "axis values must be numbers");
            out.push_back(x.get<double>());
        }
        return out;
    };
    for (const auto& [key, value] : overlay.items()) {
        require(value.is_array(), ErrorCode::config_error,
                "axis 'axes." + key + "' must be an array");
        if (key == "sample_rates") {
            axes.sample_rates = ints(value);
        } else if (key == "architectures") {
            axes.architectures.clear();
            for (const auto& x : value) {
                axes.architectures.push_back(architecture_from_string(x.get<std::string>()));
            }
        } else if (key == "feature_types") {
            axes.feature_types.clear();
            for (const auto& x : value) {
                axes.feature_types.push_back(feature_type_from_string(x.get<std::string>()));
            }
        } else if (key == "mel_banks") {
            axes.mel_banks = ints(value);
        } else if (key == "mfcc_counts") {
            axes.mfcc_counts = ints(value);
        } else if (key == "frame_lengths_ms") {
            axes.frame_lengths_ms = ints(value);
        } else if (key == "frame_steps_pct") {
            axes.frame_steps_pct = ints(value);
        } else if (key == "windows") {
            axes.windows.clear();
            for (const auto& x : value) {
                axes.windows.push_back(window_fn_from_string(x.get<std::string>()));
            }
        } else if (key == "final_sparsities") {
            axes.final_sparsities = doubles(value);
        } else if (key == "schedules") {
            axes.schedules.clear();
            for (const auto& x : value) {
                axes.schedules.push_back(prune_schedule_from_string(x.get<std::string>()));
            }
        } else if (key == "frequencies") {
            axes.frequencies = ints(value);
        } else if (key == "pruning_learning_rates") {
            axes.pruning_learning_rates = doubles(value);
        } else {
            fail(ErrorCode::config_error, "unknown axis 'axes." + key + "'");
        }
    }
    return axes;
}

inline void run_sweep_command(json& settings, const std::string& out_dir) {
    write_snapshot(out_dir, "sweep", settings);
    const auto seed = setting<std::uint64_t>(settings, json::json_pointer("/seed"));
    const Dataset dataset = prepare_dataset(
        setting<std::string>(settings, json::json_pointer("/dataset")),
        setting<bool>(settings, json::json_pointer("/protocol/select_keywords")),
        setting<bool>(settings, json::json_pointer("/protocol/gender_balance")), seed);

    const std::string preset =
        setting<std::string>(settings, json::json_pointer("/preset"));
    ExperimentGrid grid;
    if (preset == "table1" || preset == "full") {
        grid = ExperimentGrid::table_full(dataset.name, seed);
    } else if (preset == "table9" || preset == "recommended") {
        grid = ExperimentGrid::table_recommended(dataset.name, seed);
    } else {
        fail(ErrorCode::config_error,
             "unknown preset '" + preset + "' (expected table1, full, table9 or recommended)");
    }
    const json& axes = settings.at("axes");
    if (!axes.is_null()) {
        require(axes.is_object(), ErrorCode::config_error, "'axes' must be a JSON object");
        grid.axes = axes_from_json(axes, grid.axes);
        grid.preset = GridPreset::custom;
    }

    const SweepStage stage = sweep_stage_from_string(
        setting<std::string>(settings, json::json_pointer("/stage")));
    SweepOptions options;
    options.train = train_config_from_settings(settings, seed);
    options.prune_epochs = setting<int>(settings, json::json_pointer("/prune_epochs"));
    options.parallelism = setting<int>(settings, json::json_pointer("/parallelism"));
    options.resume = setting<bool>(settings, json::json_pointer("/resume"));
    options.save_checkpoints =
        setting<bool>(settings, json::json_pointer("/save_checkpoints"));
    options.baseline_checkpoint =
        setting<std::string>(settings, json::json_pointer("/baseline"));

    const auto records = run_sweep(grid, dataset, stage, out_dir, options);
    std::size_t ok = 0;
    for (const auto& r : records) {
        ok += r.status == "ok" ? 1 : 0;
    }
    json summary;
    summary["results"] = (fs::path(out_dir) / "results.csv").string();
    summary["stage"] = to_string(stage);
    summary["preset"] = to_string(grid.preset);
    summary["total"] = records.size();
    summary["ok"] = ok;
    summary["failed"] = records.size() - ok;
    std::cout << summary.dump(2) << std::endl;
}

inline void run_summarize(json& settings, const std::string& out_dir) {
    write_snapshot(out_dir, "summarize", settings);
    const std::string results_path =
        setting<std::string>(settings, json::json_pointer("/results"));
    require(!results_path.empty(), ErrorCode::config_error,
            "a results file is required (positional argument or --results)");
    const auto records = read_results_csv(results_path);
    const auto factors =
        setting<std::vector<std::string>>(settings, json::json_pointer("/factors"));
    const auto rows = summarize(records, factors);
    const auto path = fs::path(out_dir) / "summary.csv";
    write_summary_csv(path.string(), rows);
    std::ifstream in(path, std::ios::binary);
    std::cout << std::string((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
}

inline void print_error_line(const std::string& code, std::string message) {
    // Error::what() repeats the code as a prefix; strip it for the JSON line.
    const std::string prefix = code + ": ";
    if (message.rfind(prefix, 0) == 0) {
        message = message.substr(prefix.size());
    }
    json line;
    line["error"] = code;
    line["message"] = message;
    std::cerr << line.dump() << std::endl;
}

}  // namespace detail

// Parses and runs one invocation; argv-style arguments without the program
// name. Returns the process exit status.
inline int run_cli(const std::vector<std::string>& args) {
    using detail::setting;
    namespace fs = std::filesystem;

    CLI::App app{"bias-aware keyword-spotting experiment toolkit", "kws-bias"};
    app.require_subcommand(1);

    struct CommonOpts {
        std::string config_path;
        std::vector<std::string> sets;
        std::string out;
    };
    // One resolver per subcommand: defaults <- config file <- --set <- flags.
    const auto add_common = [](CLI::App* sub, CommonOpts& opts) {
        sub->add_option("--config", opts.config_path, "JSON config file");
        sub->add_option("--set", opts.sets, "dotted key=value override (repeatable)")
            ->take_all();
        sub->add_option("--out", opts.out,
                        "output directory (default: $" + std::string(kOutputRootEnv) +
                            "/<subcommand>)");
    };
    using Applier = std::function<void(json&)>;
    const auto resolve = [](json defaults, const CommonOpts& opts,
                            const std::vector<Applier>& appliers) {
        if (!opts.config_path.empty()) {
            detail::merge_config(defaults, detail::load_config_file(opts.config_path), "");
        }
        for (const auto& assignment : opts.sets) {
            detail::apply_override(defaults, assignment);
        }
        for (const auto& apply : appliers) {
            apply(defaults);
        }
        return defaults;
    };

    // Feature-extraction flags shared by featurize and train.
    struct FeatureFlagSet {
        int rate = 16000;
        std::string type;
        int mel_banks = 40;
        int mfcc = 13;
        int frame_length = 25;
        int frame_step = 40;
        std::string window;
        void attach(CLI::App* sub, std::vector<Applier>& appliers) {
            const auto bind = [&appliers](CLI::Option* opt, const auto& var, const char* key) {
                appliers.push_back([opt, &var, key](json& s) {
                    if (opt->count() > 0) {
                        s["features"][key] = var;
                    }
                });
            };
            bind(sub->add_option("--rate", rate, "sample rate in Hz (8000 or 16000)"), rate,
                 "sample_rate");
            bind(sub->add_option("--feature-type", type, "log_mel or mfcc"), type,
                 "feature_type");
            bind(sub->add_option("--mel-banks", mel_banks, "number of Mel filterbanks"),
                 mel_banks, "num_mel_banks");
            bind(sub->add_option("--mfcc", mfcc, "number of MFCC coefficients (10-14)"), mfcc,
                 "num_mfcc");
            bind(sub->add_option("--frame-length", frame_length, "frame length in ms"),
                 frame_length, "frame_length_ms");
            bind(sub->add_option("--frame-step", frame_step, "frame step as % of frame length"),
                 frame_step, "frame_step_pct");
            bind(sub->add_option("--window", window, "analysis window: hamming or hann"), window,
                 "window");
        }
    };
    const auto bind_top = [](std::vector<Applier>& appliers, CLI::Option* opt, const auto& var,
                             const char* key) {
        appliers.push_back([opt, &var, key](json& s) {
            if (opt->count() > 0) {
                s[key] = var;
            }
        });
    };

    // --- synth --------------------------------------------------------------
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic two-group corpus");
    CommonOpts synth_common;
    add_common(synth, synth_common);
    std::vector<Applier> synth_appliers;
    struct {
        int classes = 4;
        int speakers = 4;
        int utterances = 5;
        int rate = 16000;
        int clip_ms = 1000;
        std::uint64_t seed = 0x5eedULL;
        bool speaker_splits = false;
    } sy;
    bind_top(synth_appliers, synth->add_option("--classes", sy.classes, "number of keywords"),
             sy.classes, "classes");
    bind_top(synth_appliers,
             synth->add_option("--speakers", sy.speakers, "speakers per gender"), sy.speakers,
             "speakers_per_gender");
    bind_top(synth_appliers,
             synth->add_option("--utterances", sy.utterances,
                               "utterances per speaker and keyword"),
             sy.utterances, "utterances_per_speaker");
    bind_top(synth_appliers, synth->add_option("--rate", sy.rate, "sample rate in Hz"), sy.rate,
             "sample_rate");
    bind_top(synth_appliers,
             synth->add_option("--clip-ms", sy.clip_ms, "clip duration in milliseconds"),
             sy.clip_ms, "clip_duration_ms");
    bind_top(synth_appliers, synth->add_option("--seed", sy.seed, "corpus seed"), sy.seed,
             "seed");
    auto* o_speaker_splits = synth->add_flag(
        "--speaker-splits", sy.speaker_splits,
        "hold out speaker 00 per gender for test and speaker 01 for validation");
    synth_appliers.push_back([o_speaker_splits, &sy](json& s) {
        if (o_speaker_splits->count() > 0) {
            s["speaker_splits"] = sy.speaker_splits;
        }
    });
    synth->callback([&] {
        json defaults = {{"classes", 4},        {"speakers_per_gender", 4},
                         {"utterances_per_speaker", 5}, {"sample_rate", 16000},
                         {"clip_duration_ms", 1000},    {"seed", 0x5eedULL},
                         {"speaker_splits", false}};
        json settings = resolve(std::move(defaults), synth_common, synth_appliers);
        detail::run_synth(settings, detail::resolve_out_dir(synth_common.out, "synth"));
    });

    // --- featurize ----------------------------------------------------------
    CLI::App* featurize =
        app.add_subcommand("featurize", "extract log-Mel or MFCC features for a manifest");
    CommonOpts feat_common;
    add_common(featurize, feat_common);
    std::vector<Applier> feat_appliers;
    std::string feat_dataset;
    std::uint64_t feat_seed = 0;
    bind_top(feat_appliers, featurize->add_option("--dataset", feat_dataset, "manifest CSV"),
             feat_dataset, "dataset");
    bind_top(feat_appliers, featurize->add_option("--seed", feat_seed, "split seed"), feat_seed,
             "seed");
    FeatureFlagSet feat_flags;
    feat_flags.attach(featurize, feat_appliers);
    featurize->callback([&] {
        json defaults = {{"dataset", ""}, {"seed", 0}, {"features", detail::default_features()}};
        json settings = resolve(std::move(defaults), feat_common, feat_appliers);
        detail::run_featurize(settings, detail::resolve_out_dir(feat_common.out, "featurize"));
    });

    // --- train --------------------------------------------------------------
    CLI::App* train_cmd =
        app.add_subcommand("train", "train a keyword-spotting model over a learning-rate grid");
    CommonOpts train_common;
    add_common(train_cmd, train_common);
    std::vector<Applier> train_appliers;
    struct {
        std::string dataset;
        std::string arch;
        int epochs = 10;
        int batch = 128;
        std::vector<double> lr_grid;
        std::uint64_t seed = 0;
        bool select_keywords = false;
        bool balance = false;
    } tr;
    bind_top(train_appliers, train_cmd->add_option("--dataset", tr.dataset, "manifest CSV"),
             tr.dataset, "dataset");
    bind_top(train_appliers, train_cmd->add_option("--arch", tr.arch, "cnn or llcnn"), tr.arch,
             "architecture");
    bind_top(train_appliers, train_cmd->add_option("--seed", tr.seed, "experiment seed"),
             tr.seed, "seed");
    {
        auto* o_epochs = train_cmd->add_option("--epochs", tr.epochs, "training epochs");
        auto* o_batch = train_cmd->add_option("--batch", tr.batch, "batch size (even)");
        auto* o_lr = train_cmd
                         ->add_option("--lr", tr.lr_grid,
                                      "learning-rate grid, comma separated")
                         ->delimiter(',');
        train_appliers.push_back([o_epochs, &tr](json& s) {
            if (o_epochs->count() > 0) {
                s["train"]["epochs"] = tr.epochs;
            }
        });
        train_appliers.push_back([o_batch, &tr](json& s) {
            if (o_batch->count() > 0) {
                s["train"]["batch_size"] = tr.batch;
            }
        });
        train_appliers.push_back([o_lr, &tr](json& s) {
            if (o_lr->count() > 0) {
                s["train"]["learning_rate_grid"] = tr.lr_grid;
            }
        });
        auto* o_sel = train_cmd->add_flag("--select-keywords", tr.select_keywords,
                                          "keep only the top keywords by count");
        auto* o_bal = train_cmd->add_flag("--balance", tr.balance,
                                          "balance gender counts per keyword");
        train_appliers.push_back([o_sel, &tr](json& s) {
            if (o_sel->count() > 0) {
                s["protocol"]["select_keywords"] = tr.select_keywords;
            }
        });
        train_appliers.push_back([o_bal, &tr](json& s) {
            if (o_bal->count() > 0) {
                s["protocol"]["gender_balance"] = tr.balance;
            }
        });
    }
    FeatureFlagSet train_feat_flags;
    train_feat_flags.attach(train_cmd, train_appliers);
    const auto train_defaults = [] {
        return json{{"dataset", ""},
                    {"architecture", "cnn"},
                    {"seed", 0},
                    {"features", detail::default_features()},
                    {"train",
                     {{"epochs", 10},
                      {"batch_size", 128},
                      {"learning_rate_grid", {1e-2, 1e-3, 1e-4}}}},
                    {"protocol", {{"select_keywords", false}, {"gender_balance", false}}}};
    };
    train_cmd->callback([&] {
        json settings = resolve(train_defaults(), train_common, train_appliers);
        detail::run_train(settings, detail::resolve_out_dir(train_common.out, "train"));
    });

    // --- prune --------------------------------------------------------------
    CLI::App* prune_cmd =
        app.add_subcommand("prune", "magnitude-prune a trained checkpoint with fine-tuning");
    CommonOpts prune_common;
    add_common(prune_cmd, prune_common);
    std::vector<Applier> prune_appliers;
    struct {
        std::string dataset;
        std::string baseline;
        double sparsity = 0.8;
        double initial_sparsity = 0.0;
        std::string schedule;
        int frequency = 100;
        double lr = 1e-3;
        int epochs = 10;
        int batch = 128;
        std::uint64_t seed = 0;
    } pr;
    bind_top(prune_appliers, prune_cmd->add_option("--dataset", pr.dataset, "manifest CSV"),
             pr.dataset, "dataset");
    bind_top(prune_appliers,
             prune_cmd->add_option("--baseline", pr.baseline, "baseline checkpoint"),
             pr.baseline, "baseline");
    bind_top(prune_appliers, prune_cmd->add_option("--seed", pr.seed, "experiment seed"),
             pr.seed, "seed");
    {
        const auto bind_prune = [&prune_appliers](CLI::Option* opt, const auto& var,
                                                  const char* key) {
            prune_appliers.push_back([opt, &var, key](json& s) {
                if (opt->count() > 0) {
                    s["prune"][key] = var;
                }
            });
        };
        bind_prune(prune_cmd->add_option("--sparsity", pr.sparsity, "final sparsity in [0, 1)"),
                   pr.sparsity, "final_sparsity");
        bind_prune(prune_cmd->add_option("--initial-sparsity", pr.initial_sparsity,
                                         "starting sparsity for polynomial decay"),
                   pr.initial_sparsity, "initial_sparsity");
        bind_prune(prune_cmd->add_option("--schedule", pr.schedule,
                                         "constant or polynomial_decay"),
                   pr.schedule, "schedule");
        bind_prune(prune_cmd->add_option("--frequency", pr.frequency,
                                         "optimizer steps between mask updates"),
                   pr.frequency, "frequency");
        bind_prune(prune_cmd->add_option("--lr", pr.lr, "fine-tuning learning rate"), pr.lr,
                   "learning_rate");
        bind_prune(prune_cmd->add_option("--epochs", pr.epochs, "fine-tuning epochs"), pr.epochs,
                   "epochs");
        bind_prune(prune_cmd->add_option("--batch", pr.batch, "batch size (even)"), pr.batch,
                   "batch_size");
    }
    prune_cmd->callback([&] {
        json defaults = {{"dataset", ""},
                         {"baseline", ""},
                         {"seed", 0},
                         {"prune",
                          {{"final_sparsity", 0.8},
                           {"initial_sparsity", 0.0},
                           {"schedule", "polynomial_decay"},
                           {"frequency", 100},
                           {"learning_rate", 1e-3},
                           {"epochs", 10},
                           {"batch_size", 128}}}};
        json settings = resolve(std::move(defaults), prune_common, prune_appliers);
        detail::run_prune(settings, detail::resolve_out_dir(prune_common.out, "prune"));
    });

    // --- evaluate -----------------------------------------------------------
    CLI::App* eval_cmd =
        app.add_subcommand("evaluate", "evaluate a checkpoint with per-group metrics");
    CommonOpts eval_common;
    add_common(eval_cmd, eval_common);
    std::vector<Applier> eval_appliers;
    struct {
        std::string dataset;
        std::string checkpoint;
        std::string split;
        std::string model_id;
        std::uint64_t seed = 0;
    } ev;
    bind_top(eval_appliers, eval_cmd->add_option("--dataset", ev.dataset, "manifest CSV"),
             ev.dataset, "dataset");
    bind_top(eval_appliers,
             eval_cmd->add_option("--checkpoint", ev.checkpoint, "model checkpoint"),
             ev.checkpoint, "checkpoint");
    bind_top(eval_appliers,
             eval_cmd->add_option("--split", ev.split, "train, validation or test"), ev.split,
             "split");
    bind_top(eval_appliers,
             eval_cmd->add_option("--model-id", ev.model_id, "identifier for the report"),
             ev.model_id, "model_id");
    bind_top(eval_appliers, eval_cmd->add_option("--seed", ev.seed, "split seed"), ev.seed,
             "seed");
    eval_cmd->callback([&] {
        json defaults = {{"dataset", ""},
                         {"checkpoint", ""},
                         {"split", "test"},
                         {"model_id", "model"},
                         {"seed", 0}};
        json settings = resolve(std::move(defaults), eval_common, eval_appliers);
        detail::run_evaluate(settings, detail::resolve_out_dir(eval_common.out, "evaluate"));
    });

    // --- select -------------------------------------------------------------
    CLI::App* select_cmd =
        app.add_subcommand("select", "pick models from a results table by accuracy and bias");
    CommonOpts select_common;
    add_common(select_cmd, select_common);
    std::vector<Applier> select_appliers;
    struct {
        std::string results;
        std::string criterion;
        double tolerance = 0.015;
        int top = 1;
    } se;
    bind_top(select_appliers,
             select_cmd->add_option("results", se.results, "results CSV from a sweep"),
             se.results, "results");
    bind_top(select_appliers,
             select_cmd->add_option("--criterion", se.criterion,
                                    "high_accuracy, low_bias or low_bias_high_accuracy"),
             se.criterion, "criterion");
    bind_top(select_appliers,
             select_cmd->add_option("--tolerance", se.tolerance,
                                    "accuracy tolerance for the banded criterion"),
             se.tolerance, "tolerance");
    bind_top(select_appliers,
             select_cmd->add_option("--top", se.top, "number of models to report"), se.top,
             "top");
    select_cmd->callback([&] {
        json defaults = {{"results", ""},
                         {"criterion", "low_bias_high_accuracy"},
                         {"tolerance", 0.015},
                         {"top", 1}};
        json settings = resolve(std::move(defaults), select_common, select_appliers);
        detail::run_select(settings, detail::resolve_out_dir(select_common.out, "select"));
    });

    // --- sweep --------------------------------------------------------------
    CLI::App* sweep_cmd =
        app.add_subcommand("sweep", "run a training or pruning experiment grid");
    CommonOpts sweep_common;
    add_common(sweep_cmd, sweep_common);
    std::vector<Applier> sweep_appliers;
    struct {
        std::string dataset;
        std::string stage;
        std::string preset;
        std::string baseline;
        std::uint64_t seed = 0;
        int parallelism = 1;
        bool resume = true;
        bool save_checkpoints = false;
    } sw;
    bind_top(sweep_appliers, sweep_cmd->add_option("--dataset", sw.dataset, "manifest CSV"),
             sw.dataset, "dataset");
    bind_top(sweep_appliers, sweep_cmd->add_option("--stage", sw.stage, "train or prune"),
             sw.stage, "stage");
    bind_top(sweep_appliers,
             sweep_cmd->add_option("--preset", sw.preset,
                                   "grid preset: table1 (full) or table9 (recommended)"),
             sw.preset, "preset");
    bind_top(sweep_appliers,
             sweep_cmd->add_option("--baseline", sw.baseline,
                                   "baseline checkpoint for the prune stage"),
             sw.baseline, "baseline");
    bind_top(sweep_appliers, sweep_cmd->add_option("--seed", sw.seed, "global sweep seed"),
             sw.seed, "seed");
    bind_top(sweep_appliers,
             sweep_cmd->add_option("--parallelism", sw.parallelism, "worker thread count"),
             sw.parallelism, "parallelism");
    bind_top(sweep_appliers,
             sweep_cmd->add_flag("--resume,!--no-resume", sw.resume,
                                 "reuse ok rows from an existing results.csv"),
             sw.resume, "resume");
    bind_top(sweep_appliers,
             sweep_cmd->add_flag("--save-checkpoints", sw.save_checkpoints,
                                 "write a checkpoint per experiment"),
             sw.save_checkpoints, "save_checkpoints");
    sweep_cmd->callback([&] {
        json defaults = {{"dataset", ""},
                         {"stage", "train"},
                         {"preset", "table9"},
                         {"baseline", ""},
                         {"seed", 0},
                         {"parallelism", 1},
                         {"resume", true},
                         {"save_checkpoints", false},
                         {"prune_epochs", 10},
                         {"train",
                          {{"epochs", 10},
                           {"batch_size", 128},
                           {"learning_rate_grid", {1e-2, 1e-3, 1e-4}}}},
                         {"protocol", {{"select_keywords", false}, {"gender_balance", false}}},
                         {"axes", nullptr}};
        json settings = resolve(std::move(defaults), sweep_common, sweep_appliers);
        detail::run_sweep_command(settings, detail::resolve_out_dir(sweep_common.out, "sweep"));
    });

    // --- summarize ----------------------------------------------------------
    CLI::App* summarize_cmd =
        app.add_subcommand("summarize", "per-factor quartile summary of a results table");
    CommonOpts summarize_common;
    add_common(summarize_cmd, summarize_common);
    std::vector<Applier> summarize_appliers;
    struct {
        std::string results;
        std::vector<std::string> factors;
    } su;
    bind_top(summarize_appliers,
             summarize_cmd->add_option("results", su.results, "results CSV from a sweep"),
             su.results, "results");
    bind_top(summarize_appliers,
             summarize_cmd
                 ->add_option("--factors", su.factors, "factors to summarize, comma separated")
                 ->delimiter(','),
             su.factors, "factors");
    summarize_cmd->callback([&] {
        json defaults = {{"results", ""}, {"factors", known_factors()}};
        json settings = resolve(std::move(defaults), summarize_common, summarize_appliers);
        detail::run_summarize(settings,
                              detail::resolve_out_dir(summarize_common.out, "summarize"));
    });

    // --- parse & dispatch ---------------------------------------------------
    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("kws-bias");
    for (const auto& arg : args) {
        argv.push_back(arg.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);  // --help and friends
        }
        detail::print_error_line("config-error", e.what());
        return 2;
    } catch (const Error& e) {
        detail::print_error_line(to_string(e.code()), e.what());
        const bool config_problem =
            e.code() == ErrorCode::config_error || e.code() == ErrorCode::invalid_config;
        return config_problem ? 2 : 1;
    } catch (const std::exception& e) {
        detail::print_error_line("internal-error", e.what());
        return 1;
    }
    return 0;
}

}  // namespace cli
}  // namespace kwsbias
