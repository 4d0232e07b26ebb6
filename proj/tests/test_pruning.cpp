#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "kwsbias/common.hpp"
#include "kwsbias/nn.hpp"
#include "kwsbias/pruning.hpp"
#include "toy_problem.hpp"

namespace kwsbias {
namespace {

using testsupport::make_toy_problem;

PruneConfig toy_prune_config() {
    PruneConfig config;
    config.final_sparsity = 0.5;
    config.schedule = PruneSchedule::polynomial_decay;
    config.frequency = 2;
    config.learning_rate = 1e-3;
    config.epochs = 3;
    config.batch_size = 4;
    config.seed = 99;
    return config;
}

TrainResult toy_baseline(const testsupport::ToyProblem& toy) {
    TrainConfig config;
    config.epochs = 3;
    config.batch_size = 4;
    config.learning_rate_grid = {1e-2};
    config.seed = 11;
    return train(toy.spec, toy.dataset, toy.features, config);
}

TEST(Schedule, ConstantHoldsFinalSparsityThroughout) {
    PruneConfig config;
    config.schedule = PruneSchedule::constant;
    config.final_sparsity = 0.8;
    config.initial_sparsity = 0.0;
    for (long step : {0L, 1L, 50L, 100L}) {
        EXPECT_EQ(sparsity_at_step(config, step, 100), 0.8);
    }
}

TEST(Schedule, PolynomialDecayEndpointsAndMidpoint) {
    PruneConfig config;
    config.schedule = PruneSchedule::polynomial_decay;
    config.final_sparsity = 0.8;
    config.initial_sparsity = 0.0;
    EXPECT_EQ(sparsity_at_step(config, 0, 100), 0.0);
    EXPECT_EQ(sparsity_at_step(config, 100, 100), 0.8);
    // s_f + (s_i - s_f) * (1 - 1/2)^3 = 0.8 * (1 - 0.125) = 0.7.
    EXPECT_NEAR(sparsity_at_step(config, 50, 100), 0.7, 1e-15);

    config.initial_sparsity = 0.2;
    EXPECT_NEAR(sparsity_at_step(config, 0, 100), 0.2, 1e-15);
    EXPECT_NEAR(sparsity_at_step(config, 100, 100), 0.8, 1e-15);

    double previous = -1.0;
    for (long step = 0; step <= 100; ++step) {
        const double s = sparsity_at_step(config, step, 100);
        EXPECT_GE(s, previous);
        previous = s;
    }
    EXPECT_THROW(sparsity_at_step(config, 101, 100), Error);
    EXPECT_THROW(sparsity_at_step(config, -1, 100), Error);
}

TEST(Schedule, ConfigValidation) {
    PruneConfig config;
    config.final_sparsity = 1.0;
    EXPECT_THROW(config.validate(), Error);
    config.final_sparsity = 0.5;
    config.initial_sparsity = 0.6;
    EXPECT_THROW(config.validate(), Error);
    config.initial_sparsity = 0.0;
    config.frequency = 0;
    EXPECT_THROW(config.validate(), Error);
    config.frequency = 10;
    config.batch_size = 7;
    EXPECT_THROW(config.validate(), Error);
}

TEST(MagnitudeMask, KnownCasesAndTieBreak) {
    Tensor t = Tensor::zeros({4});
    t.data = {0.1, -0.5, 0.2, 0.05};
    EXPECT_EQ(magnitude_mask(t, 0.5), (std::vector<std::uint8_t>{0, 1, 1, 0}));
    EXPECT_EQ(magnitude_mask(t, 0.0), (std::vector<std::uint8_t>{1, 1, 1, 1}));

    Tensor tie = Tensor::zeros({2});
    tie.data = {0.3, -0.3};
    // Equal magnitudes: the lower flat index is pruned first.
    EXPECT_EQ(magnitude_mask(tie, 0.5), (std::vector<std::uint8_t>{0, 1}));
}

TEST(MagnitudeMask, ZeroCountIsRoundedHalfUp) {
    Tensor t = Tensor::zeros({101});
    Rng rng(5);
    for (auto& v : t.data) {
        v = rng.uniform(-1.0, 1.0);
    }
    const auto mask = magnitude_mask(t, 0.75);
    std::size_t zeros = 0;
    for (auto m : mask) {
        zeros += m == 0 ? 1u : 0u;
    }
    // floor(0.75 * 101 + 0.5) = floor(76.25) = 76.
    EXPECT_EQ(zeros, 76u);
}

TEST(MagnitudeMask, ApplyZeroesMaskedEntries) {
    Tensor t = Tensor::zeros({3});
    t.data = {1.0, 2.0, 3.0};
    apply_mask(t, {1, 0, 1});
    EXPECT_EQ(t.data, (std::vector<double>{1.0, 0.0, 3.0}));
    EXPECT_THROW(apply_mask(t, {1, 0}), Error);
}

TEST(MagnitudeMask, OnlyWeightTensorsArePrunable) {
    EXPECT_TRUE(is_prunable("conv1_w"));
    EXPECT_TRUE(is_prunable("dense2_w"));
    EXPECT_FALSE(is_prunable("conv1_b"));
    EXPECT_FALSE(is_prunable("dense2_b"));
    EXPECT_FALSE(is_prunable("w"));
}

TEST(PruneTrain, HitsExactFinalSparsityPerWeightTensor) {
    const auto toy = make_toy_problem();
    const TrainResult baseline = toy_baseline(toy);
    const PruneConfig config = toy_prune_config();
    const PruneResult result = prune_train(baseline.params, config, toy.dataset, toy.features);

    EXPECT_EQ(result.total_steps, 12);  // 4 steps/epoch * 3 epochs
    ASSERT_EQ(result.history.size(), 3u);
    EXPECT_EQ(result.history.back().sparsity, 0.5);

    for (std::size_t ti = 0; ti < result.params.tensors.size(); ++ti) {
        const auto& name = result.params.names[ti];
        const auto& tensor = result.params.tensors[ti];
        if (!is_prunable(name)) {
            EXPECT_TRUE(result.masks[ti].empty()) << name;
            continue;
        }
        ASSERT_EQ(result.masks[ti].size(), tensor.size()) << name;
        const auto expected_zeros = static_cast<std::size_t>(
            std::floor(0.5 * static_cast<double>(tensor.size()) + 0.5));
        std::size_t zeros = 0;
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            if (result.masks[ti][i] == 0) {
                EXPECT_EQ(tensor.data[i], 0.0) << name << "[" << i << "]";
                ++zeros;
            }
        }
        EXPECT_EQ(zeros, expected_zeros) << name;
    }

    const auto sparsity = achieved_sparsity(result.params);
    ASSERT_EQ(sparsity.size(), 4u);  // conv1_w, dense1_w, dense2_w, dense3_w
    for (const auto& ts : sparsity) {
        const auto expected = static_cast<std::size_t>(
            std::floor(0.5 * static_cast<double>(ts.size) + 0.5));
        EXPECT_EQ(ts.zeros, expected) << ts.name;
    }
}

TEST(PruneTrain, IsDeterministic) {
    const auto toy = make_toy_problem();
    const TrainResult baseline = toy_baseline(toy);
    const PruneConfig config = toy_prune_config();
    const PruneResult a = prune_train(baseline.params, config, toy.dataset, toy.features);
    const PruneResult b = prune_train(baseline.params, config, toy.dataset, toy.features);
    for (std::size_t ti = 0; ti < a.params.tensors.size(); ++ti) {
        EXPECT_EQ(a.params.tensors[ti].data, b.params.tensors[ti].data);
        EXPECT_EQ(a.masks[ti], b.masks[ti]);
    }
}

TEST(PruneTrain, BaselineIsNotModified) {
    const auto toy = make_toy_problem();
    const TrainResult baseline = toy_baseline(toy);
    const auto before = baseline.params.tensors;
    prune_train(baseline.params, toy_prune_config(), toy.dataset, toy.features);
    for (std::size_t ti = 0; ti < before.size(); ++ti) {
        EXPECT_EQ(baseline.params.tensors[ti].data, before[ti].data);
    }
}

TEST(PruneTrain, KeepsUsableAccuracyOnToyProblem) {
    // Half the weights of a comfortably separable problem should not destroy
    // the model; this guards against masks being applied to the wrong entries.
    const auto toy = make_toy_problem();
    const TrainResult baseline = toy_baseline(toy);
    const PruneResult result =
        prune_train(baseline.params, toy_prune_config(), toy.dataset, toy.features);
    EXPECT_GT(result.history.back().val_mcc, 0.5);
}

TEST(PruneTrain, DivergenceRaisesPruningFailure) {
    const auto toy = make_toy_problem();
    const TrainResult baseline = toy_baseline(toy);
    PruneConfig config = toy_prune_config();
    config.learning_rate = 1e155;
    try {
        prune_train(baseline.params, config, toy.dataset, toy.features);
        FAIL() << "expected pruning-failure";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::pruning_failure);
    }
}

}  // namespace
}  // namespace kwsbias
