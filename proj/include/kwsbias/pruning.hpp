// pruning.hpp -- gradual magnitude pruning with constant or cubic
// polynomial-decay sparsity schedules, fine-tuning from a trained baseline.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "kwsbias/checkpoint.hpp"
#include "kwsbias/common.hpp"
#include "kwsbias/dataset.hpp"
#include "kwsbias/nn.hpp"

namespace kwsbias {

enum class PruneSchedule { constant, polynomial_decay };

inline const char* to_string(PruneSchedule s) {
    return s == PruneSchedule::constant ? "constant" : "polynomial_decay";
}

inline PruneSchedule prune_schedule_from_string(const std::string& s) {
    if (s == "constant") return PruneSchedule::constant;
    if (s == "polynomial_decay") return PruneSchedule::polynomial_decay;
    fail(ErrorCode::invalid_config, "unknown pruning schedule '" + s + "'");
}

struct PruneConfig {
    double final_sparsity = 0.8;
    double initial_sparsity = 0.0;
    PruneSchedule schedule = PruneSchedule::polynomial_decay;
    int frequency = 100;  // optimizer steps between mask updates
    double learning_rate = 1e-3;
    int epochs = 10;
    int batch_size = 128;
    std::uint64_t seed = 0;

    void validate() const {
        require(final_sparsity >= 0.0 && final_sparsity < 1.0, ErrorCode::invalid_config,
                "final_sparsity must be in [0, 1)");
        require(initial_sparsity >= 0.0 && initial_sparsity <= final_sparsity,
                ErrorCode::invalid_config, "need 0 <= initial_sparsity <= final_sparsity");
        require(frequency >= 1, ErrorCode::invalid_config, "frequency must be >= 1");
        require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorCode::invalid_config,
                "learning_rate must be positive");
        require(epochs >= 1, ErrorCode::invalid_config, "epochs must be >= 1");
        require(batch_size >= 2 && batch_size % 2 == 0, ErrorCode::invalid_config,
                "batch_size must be even and >= 2");
    }
};

// Target sparsity after `step` of `total_steps` optimizer steps. The constant
// schedule holds the final sparsity from the first mask update; the
// polynomial schedule follows s_f + (s_i - s_f) * (1 - t/T)^3, which starts
// at exactly s_i and ends at exactly s_f.
inline double sparsity_at_step(const PruneConfig& config, long step, long total_steps) {
    config.validate();
    require(total_steps >= 1, ErrorCode::invalid_config, "total_steps must be >= 1");
    require(step >= 0 && step <= total_steps, ErrorCode::invalid_argument,
            "step outside [0, total_steps]");
    if (config.schedule == PruneSchedule::constant) {
        return config.final_sparsity;
    }
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    const double u = 1.0 - t;
    return config.final_sparsity + (config.initial_sparsity - config.final_sparsity) * u * u * u;
}

// Keep-mask for one tensor: the floor(sparsity * n + 0.5) weights with the
// smallest magnitude get 0, ties resolved toward the lower flat index.
inline std::vector<std::uint8_t> magnitude_mask(const Tensor& tensor, double sparsity) {
    require(sparsity >= 0.0 && sparsity < 1.0, ErrorCode::invalid_argument,
            "sparsity must be in [0, 1)");
    const std::size_t n = tensor.size();
    const auto k = static_cast<std::size_t>(
        std::floor(sparsity * static_cast<double>(n) + 0.5));
    std::vector<std::uint8_t> mask(n, 1);
    if (k == 0) {
        return mask;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ma = std::abs(tensor.data[a]);
        const double mb = std::abs(tensor.data[b]);
        if (ma != mb) {
            return ma < mb;
        }
        return a < b;
    });
    for (std::size_t i = 0; i < k; ++i) {
        mask[order[i]] = 0;
    }
    return mask;
}

inline void apply_mask(Tensor& tensor, const std::vector<std::uint8_t>& mask) {
    require(mask.size() == tensor.size(), ErrorCode::shape_mismatch,
            "mask size does not match tensor");
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] == 0) {
            tensor.data[i] = 0.0;
        }
    }
}

// Only weight matrices are pruned; biases keep their dense form.
inline bool is_prunable(const std::string& tensor_name) {
    return tensor_name.size() >= 2 && tensor_name.compare(tensor_name.size() - 2, 2, "_w") == 0;
}

struct PruneEpochStats {
    double train_loss = 0.0;
    double val_mcc = 0.0;
    double sparsity = 0.0;  // schedule target at the end of the epoch
};

struct PruneResult {
    ModelParams params;
    MaskSet masks;
    std::vector<PruneEpochStats> history;
    long total_steps = 0;
};

struct TensorSparsity {
    std::string name;
    std::size_t zeros = 0;
    std::size_t size = 0;
};

// Fraction of exactly-zero weights, per prunable tensor and overall.
inline std::vector<TensorSparsity> achieved_sparsity(const ModelParams& params) {
    std::vector<TensorSparsity> out;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        if (!is_prunable(params.names[i])) {
            continue;
        }
        TensorSparsity ts;
        ts.name = params.names[i];
        ts.size = params.tensors[i].size();
        for (double v : params.tensors[i].data) {
            if (v == 0.0) {
                ++ts.zeros;
            }
        }
        out.push_back(std::move(ts));
    }
    return out;
}

// Fine-tunes a trained baseline while gradually masking low-magnitude
// weights. Mask updates happen every `frequency` optimizer steps (starting at
// step 0) and once more after the final step, so the final sparsity is hit
// exactly. Masks are re-applied after every optimizer step; the optimizer
// state is fresh, not inherited from the baseline run.
inline PruneResult prune_train(const ModelParams& baseline, const PruneConfig& config,
                               const Dataset& dataset,
                               const std::vector<FeatureMatrix>& features) {
    config.validate();
    require(features.size() == dataset.utterances.size(), ErrorCode::invalid_argument,
            "need one feature matrix per utterance");
    const auto val_indices = dataset.split_indices(Split::validation);
    require(!val_indices.empty(), ErrorCode::insufficient_data, "validation split is empty");
    std::vector<int> val_labels;
    for (int idx : val_indices) {
        val_labels.push_back(dataset.utterances[static_cast<std::size_t>(idx)].class_index);
    }

    PruneResult result;
    result.params = baseline;
    result.masks.assign(baseline.tensors.size(), {});
    AdamState adam = AdamState::init(result.params);

    const long steps_per_epoch = static_cast<long>(
        balanced_batches(dataset, Split::train, config.batch_size, config.seed, 0).size());
    result.total_steps = steps_per_epoch * config.epochs;

    auto remask = [&](long step) {
        const double sparsity = sparsity_at_step(config, step, result.total_steps);
        for (std::size_t ti = 0; ti < result.params.tensors.size(); ++ti) {
            if (!is_prunable(result.params.names[ti])) {
                continue;
            }
            result.masks[ti] = magnitude_mask(result.params.tensors[ti], sparsity);
            apply_mask(result.params.tensors[ti], result.masks[ti]);
        }
        return sparsity;
    };

    long step = 0;
    double current_sparsity = 0.0;
    try {
        for (int epoch = 0; epoch < config.epochs; ++epoch) {
            const auto batches =
                balanced_batches(dataset, Split::train, config.batch_size, config.seed, epoch);
            double loss_sum = 0.0;
            for (const auto& batch : batches) {
                if (step % config.frequency == 0) {
                    current_sparsity = remask(step);
                }
                std::vector<int> labels;
                labels.reserve(batch.size());
                for (int idx : batch) {
                    labels.push_back(dataset.utterances[static_cast<std::size_t>(idx)].class_index);
                }
                const Tensor input = batch_to_tensor(features, batch, result.params.spec);
                auto lg = loss_and_grad(result.params, input, labels);
                adam_step(adam, result.params, lg.grads, config.learning_rate);
                for (std::size_t ti = 0; ti < result.params.tensors.size(); ++ti) {
                    if (!result.masks[ti].empty()) {
                        apply_mask(result.params.tensors[ti], result.masks[ti]);
                    }
                }
                loss_sum += lg.loss;
                ++step;
            }
            require(all_finite(result.params), ErrorCode::numerical_failure,
                    "non-finite weights after epoch " + std::to_string(epoch));
            PruneEpochStats stats;
            stats.train_loss = loss_sum / static_cast<double>(batches.size());
            const auto val_preds = predict(result.params, features, val_indices);
            stats.val_mcc =
                mcc(confusion_matrix(val_labels, val_preds, result.params.spec.num_classes));
            stats.sparsity = current_sparsity;
            result.history.push_back(stats);
        }
    } catch (const Error& e) {
        if (e.code() != ErrorCode::numerical_failure) {
            throw;
        }
        fail(ErrorCode::pruning_failure,
             "pruning diverged after " + std::to_string(result.history.size()) +
                 " completed epochs (lr " + std::to_string(config.learning_rate) + ")");
    }
    // Final mask update at t = total_steps guarantees the exact final sparsity.
    current_sparsity = remask(result.total_steps);
    if (!result.history.empty()) {
        result.history.back().sparsity = current_sparsity;
    }
    return result;
}

}  // namespace kwsbias
