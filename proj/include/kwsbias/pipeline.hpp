// pipeline.hpp -- glue between audio, features, models and metrics: loading a
// corpus into memory, computing feature tables and evaluating checkpoints.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "kwsbias/common.hpp"
#include "kwsbias/dataset.hpp"
#include "kwsbias/dsp.hpp"
#include "kwsbias/metrics.hpp"
#include "kwsbias/nn.hpp"
#include "kwsbias/wav.hpp"

namespace kwsbias {

// Reads every utterance's audio into memory (source sample rate, unresampled).
inline std::vector<AudioClip> load_clips(const Dataset& dataset) {
    std::vector<AudioClip> clips;
    clips.reserve(dataset.utterances.size());
    for (const auto& u : dataset.utterances) {
        clips.push_back(read_wav(u.audio_path));
    }
    return clips;
}

// Feature matrix per utterance, resampling from the source rate when the
// configuration asks for a lower one.
inline std::vector<FeatureMatrix> build_feature_table(const std::vector<AudioClip>& clips,
                                                      const FeatureConfig& config) {
    std::vector<FeatureMatrix> features;
    features.reserve(clips.size());
    for (const auto& clip : clips) {
        if (clip.sample_rate != config.sample_rate) {
            features.push_back(extract_features(resample(clip, config.sample_rate), config));
        } else {
            features.push_back(extract_features(clip, config));
        }
    }
    return features;
}

inline std::vector<FeatureMatrix> build_feature_table(const Dataset& dataset,
                                                      const FeatureConfig& config) {
    return build_feature_table(load_clips(dataset), config);
}

// Expected model input shape for a feature configuration.
inline std::pair<int, int> feature_shape(const FeatureConfig& config) {
    config.validate();
    const int frame = frame_length_samples(config.frame_length_ms, config.sample_rate);
    const int step = frame_step_samples(config.frame_length_ms, config.frame_step_pct,
                                        config.sample_rate);
    const auto signal_len = static_cast<std::size_t>(
        std::lround(config.clip_duration_ms * config.sample_rate / 1000.0));
    return {frame_count(signal_len, frame, step), config.num_coeffs()};
}

// Runs the model over one split and fills in the full evaluation report.
inline EvalReport evaluate(const ModelParams& params, const Dataset& dataset,
                           const std::vector<FeatureMatrix>& features, Split split,
                           const std::string& model_id) {
    require(features.size() == dataset.utterances.size(), ErrorCode::invalid_argument,
            "need one feature matrix per utterance");
    const auto indices = dataset.split_indices(split);
    require(!indices.empty(), ErrorCode::insufficient_data,
            std::string(to_string(split)) + " split is empty");
    std::vector<int> labels;
    std::vector<Group> groups;
    labels.reserve(indices.size());
    groups.reserve(indices.size());
    for (int idx : indices) {
        const auto& u = dataset.utterances[static_cast<std::size_t>(idx)];
        labels.push_back(u.class_index);
        groups.push_back(u.group);
    }
    const auto predictions = predict(params, features, indices);
    EvalReport report = compute_report(labels, predictions, groups, params.spec.num_classes);
    report.model_id = model_id;
    report.dataset_id = dataset.name;
    report.split = to_string(split);
    return report;
}

}  // namespace kwsbias
