#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "kwsbias/common.hpp"
#include "kwsbias/metrics.hpp"

namespace kwsbias {
namespace {

// Independent MCC oracle: Pearson correlation of per-class indicator
// variables summed over classes, computed sample by sample. No confusion
// matrix involved, so it cannot share a bug with the production code path.
double covariance_mcc(const std::vector<int>& labels, const std::vector<int>& preds,
                      int num_classes) {
    const auto n = static_cast<double>(labels.size());
    std::vector<double> t(static_cast<std::size_t>(num_classes), 0.0);
    std::vector<double> p(static_cast<std::size_t>(num_classes), 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        t[static_cast<std::size_t>(labels[i])] += 1.0;
        p[static_cast<std::size_t>(preds[i])] += 1.0;
    }
    double cov_xy = 0.0;
    double cov_xx = 0.0;
    double cov_yy = 0.0;
    for (int k = 0; k < num_classes; ++k) {
        const double t_mean = t[static_cast<std::size_t>(k)] / n;
        const double p_mean = p[static_cast<std::size_t>(k)] / n;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const double x = (preds[i] == k ? 1.0 : 0.0) - p_mean;
            const double y = (labels[i] == k ? 1.0 : 0.0) - t_mean;
            cov_xy += x * y;
            cov_xx += x * x;
            cov_yy += y * y;
        }
    }
    if (cov_xx <= 0.0 || cov_yy <= 0.0) {
        return 0.0;
    }
    return cov_xy / std::sqrt(cov_xx * cov_yy);
}

TEST(Mcc, HandComputedThreeClassCase) {
    const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
    const std::vector<int> preds = {0, 0, 1, 1, 1, 2};
    const auto cm = confusion_matrix(labels, preds, 3);
    EXPECT_EQ(cm.at(0, 0), 2);
    EXPECT_EQ(cm.at(1, 1), 2);
    EXPECT_EQ(cm.at(2, 1), 1);
    EXPECT_EQ(cm.at(2, 2), 1);
    // c*s - sum(p t) = 5*6 - 12 = 18; denominators 22 and 24.
    EXPECT_NEAR(mcc(cm), 18.0 / std::sqrt(528.0), 1e-15);
}

TEST(Mcc, PerfectAndFullyInverted) {
    auto perfect = ConfusionMatrix::zeros(4);
    for (int k = 0; k < 4; ++k) {
        perfect.at(k, k) = 5 + k;
    }
    EXPECT_NEAR(mcc(perfect), 1.0, 1e-15);

    auto swapped = ConfusionMatrix::zeros(2);
    swapped.at(0, 1) = 2;
    swapped.at(1, 0) = 2;
    EXPECT_NEAR(mcc(swapped), -1.0, 1e-15);
}

TEST(Mcc, ZeroVarianceGivesExactZero) {
    // All predictions land in one class.
    auto one_column = ConfusionMatrix::zeros(3);
    one_column.at(0, 0) = 4;
    one_column.at(1, 0) = 3;
    one_column.at(2, 0) = 2;
    EXPECT_EQ(mcc(one_column), 0.0);

    // All labels are one class.
    auto one_row = ConfusionMatrix::zeros(3);
    one_row.at(1, 0) = 2;
    one_row.at(1, 1) = 2;
    one_row.at(1, 2) = 1;
    EXPECT_EQ(mcc(one_row), 0.0);
}

TEST(Mcc, EmptyMatrixIsUndefined) {
    const auto cm = ConfusionMatrix::zeros(2);
    try {
        mcc(cm);
        FAIL() << "expected undefined-metric";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::undefined_metric);
    }
}

TEST(Mcc, MatchesCovarianceOracleOnRandomDraws) {
    Rng rng(303);
    for (int trial = 0; trial < 300; ++trial) {
        const int num_classes = static_cast<int>(2 + rng.next_below(5));
        const auto n = static_cast<std::size_t>(4 + rng.next_below(57));
        std::vector<int> labels(n);
        std::vector<int> preds(n);
        for (std::size_t i = 0; i < n; ++i) {
            labels[i] = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(num_classes)));
            preds[i] = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(num_classes)));
        }
        const double closed_form = mcc(confusion_matrix(labels, preds, num_classes));
        const double oracle = covariance_mcc(labels, preds, num_classes);
        EXPECT_NEAR(closed_form, oracle, 1e-12)
            << "trial " << trial << " classes " << num_classes << " n " << n;
    }
}

TEST(ConfusionMatrixBuild, RejectsBadInput) {
    try {
        confusion_matrix({0, 1}, {0}, 2);
        FAIL() << "expected invalid-argument";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::invalid_argument);
    }
    try {
        confusion_matrix({0, 2}, {0, 1}, 2);
        FAIL() << "expected label-out-of-range";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::label_out_of_range);
    }
    try {
        confusion_matrix({0, 1}, {0, -1}, 2);
        FAIL() << "expected label-out-of-range";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::label_out_of_range);
    }
}

TEST(AuxMetrics, ChanceLevelKappaIsZero) {
    auto cm = ConfusionMatrix::zeros(2);
    cm.at(0, 0) = 25;
    cm.at(0, 1) = 25;
    cm.at(1, 0) = 25;
    cm.at(1, 1) = 25;
    EXPECT_NEAR(aux_metrics(cm).cohen_kappa, 0.0, 1e-15);
}

TEST(AuxMetrics, CollapsedPredictorOnBalancedLabels) {
    // Everything predicted as class 0 on a 10/10 split.
    auto cm = ConfusionMatrix::zeros(2);
    cm.at(0, 0) = 10;
    cm.at(1, 0) = 10;
    const auto aux = aux_metrics(cm);
    EXPECT_NEAR(aux.recall, 0.5, 1e-15);      // 1.0 and 0.0 averaged
    EXPECT_NEAR(aux.precision, 0.25, 1e-15);  // 0.5 and 0.0 averaged
    EXPECT_NEAR(aux.weighted_f1, 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(aux.cohen_kappa, 0.0, 1e-15);
}

TEST(AuxMetrics, PerfectPredictor) {
    auto cm = ConfusionMatrix::zeros(3);
    cm.at(0, 0) = 3;
    cm.at(1, 1) = 5;
    cm.at(2, 2) = 2;
    const auto aux = aux_metrics(cm);
    EXPECT_NEAR(aux.precision, 1.0, 1e-15);
    EXPECT_NEAR(aux.recall, 1.0, 1e-15);
    EXPECT_NEAR(aux.weighted_f1, 1.0, 1e-15);
    EXPECT_NEAR(aux.cohen_kappa, 1.0, 1e-15);
}

TEST(Bias, LogRatioValuesAndErrors) {
    EXPECT_EQ(group_bias(0.6, 0.6), 0.0);
    EXPECT_NEAR(group_bias(0.8, 0.4), std::log(2.0), 1e-15);
    EXPECT_LT(group_bias(0.4, 0.8), 0.0);
    for (double bad : {0.0, -0.1}) {
        try {
            group_bias(bad, 0.5);
            FAIL() << "expected non-positive-performance";
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::non_positive_performance);
        }
        try {
            group_bias(0.5, bad);
            FAIL() << "expected non-positive-performance";
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::non_positive_performance);
        }
    }
}

TEST(Bias, ReliabilityBiasSumsAbsoluteLogRatios) {
    const std::map<std::string, double> by_group = {{"male", 0.8}, {"female", 0.4}};
    // |ln(0.8/0.6)| + |ln(0.4/0.6)| = ln(4/3) + ln(3/2) = ln 2.
    EXPECT_NEAR(reliability_bias(by_group, 0.6), std::log(2.0), 1e-12);
    EXPECT_EQ(reliability_bias({{"male", 0.7}, {"female", 0.7}}, 0.7), 0.0);
    EXPECT_THROW(reliability_bias({}, 0.5), Error);
}

TEST(Report, ComputesGroupMetricsAndBias) {
    // Male half perfect; female half confuses class 2 with class 0.
    const std::vector<int> labels = {0, 1, 2, 0, 1, 2};
    const std::vector<int> preds = {0, 1, 2, 0, 1, 0};
    const std::vector<Group> groups = {Group::male, Group::male, Group::male,
                                       Group::female, Group::female, Group::female};
    const EvalReport report = compute_report(labels, preds, groups, 3);

    const double overall = 18.0 / std::sqrt(528.0);
    const double female = 3.0 / std::sqrt(24.0);
    EXPECT_NEAR(report.overall_mcc, overall, 1e-12);
    EXPECT_NEAR(report.mcc_by_group.at("male"), 1.0, 1e-12);
    EXPECT_NEAR(report.mcc_by_group.at("female"), female, 1e-12);
    ASSERT_TRUE(report.reliability_bias.has_value());
    const double expected_bias =
        std::abs(std::log(1.0 / overall)) + std::abs(std::log(female / overall));
    EXPECT_NEAR(*report.reliability_bias, expected_bias, 1e-12);
    EXPECT_NEAR(report.bias_by_group.at("male"), std::log(1.0 / overall), 1e-12);
    EXPECT_TRUE(report.bias_errors.empty());
    EXPECT_EQ(report.confusion_by_group.at("male").total(), 3);
    EXPECT_EQ(report.confusion_by_group.at("female").total(), 3);
}

TEST(Report, RequiresBothGenders) {
    const std::vector<int> labels = {0, 1};
    const std::vector<int> preds = {0, 1};
    const std::vector<Group> groups = {Group::male, Group::male};
    try {
        compute_report(labels, preds, groups, 2);
        FAIL() << "expected group-coverage";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::group_coverage);
        EXPECT_NE(std::string(e.what()).find("female"), std::string::npos);
    }
}

TEST(Report, BiasUndefinedWhenMccNotPositive) {
    // Fully inverted predictions in both groups: every MCC is -1.
    const std::vector<int> labels = {0, 1, 0, 1};
    const std::vector<int> preds = {1, 0, 1, 0};
    const std::vector<Group> groups = {Group::male, Group::male, Group::female, Group::female};
    const EvalReport report = compute_report(labels, preds, groups, 2);
    EXPECT_NEAR(report.overall_mcc, -1.0, 1e-15);
    EXPECT_FALSE(report.reliability_bias.has_value());
    EXPECT_TRUE(report.bias_by_group.empty());
    EXPECT_EQ(report.bias_errors.size(), 3u);  // overall + male + female
    EXPECT_EQ(report.mcc_by_group.size(), 2u);
}

TEST(Report, DeltaAgainstBaseline) {
    const std::vector<Group> groups = {Group::male, Group::male, Group::male,
                                       Group::female, Group::female, Group::female};
    const std::vector<int> labels = {0, 1, 2, 0, 1, 2};
    EvalReport baseline = compute_report(labels, {0, 1, 2, 0, 1, 0}, groups, 3);
    baseline.model_id = "baseline";
    EvalReport candidate = compute_report(labels, {0, 1, 2, 0, 1, 2}, groups, 3);
    candidate.model_id = "pruned";

    const DeltaReport delta = delta_report(baseline, candidate);
    EXPECT_EQ(delta.baseline_id, "baseline");
    EXPECT_EQ(delta.candidate_id, "pruned");
    EXPECT_NEAR(delta.delta_mcc, 1.0 - baseline.overall_mcc, 1e-12);
    EXPECT_NEAR(delta.delta_mcc_by_group.at("male"), 0.0, 1e-12);
    EXPECT_GT(delta.delta_mcc_by_group.at("female"), 0.0);
    ASSERT_TRUE(delta.delta_reliability_bias.has_value());
    EXPECT_NEAR(*delta.delta_reliability_bias, -*baseline.reliability_bias, 1e-12);
}

TEST(Report, DeltaRejectsMismatchedGroupSets) {
    EvalReport baseline;
    baseline.mcc_by_group["male"] = 0.5;
    EvalReport candidate;
    candidate.mcc_by_group["male"] = 0.5;
    candidate.mcc_by_group["female"] = 0.5;
    try {
        delta_report(baseline, candidate);
        FAIL() << "expected comparison-mismatch";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::comparison_mismatch);
    }
    EvalReport other;
    other.mcc_by_group["female"] = 0.5;
    try {
        delta_report(baseline, other);  // same size, different names
        FAIL() << "expected comparison-mismatch";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::comparison_mismatch);
    }
}

TEST(Report, JsonRoundTrip) {
    const std::vector<Group> groups = {Group::male, Group::male, Group::male,
                                       Group::female, Group::female, Group::female};
    EvalReport report = compute_report({0, 1, 2, 0, 1, 2}, {0, 1, 2, 0, 1, 0}, groups, 3);
    report.model_id = "model-7";
    report.dataset_id = "synth";
    report.split = "test";

    const EvalReport back = report_from_json(to_json(report));
    EXPECT_EQ(back.model_id, report.model_id);
    EXPECT_EQ(back.dataset_id, report.dataset_id);
    EXPECT_EQ(back.split, report.split);
    EXPECT_EQ(back.overall_mcc, report.overall_mcc);
    EXPECT_EQ(back.aux.precision, report.aux.precision);
    EXPECT_EQ(back.aux.weighted_f1, report.aux.weighted_f1);
    EXPECT_EQ(back.mcc_by_group, report.mcc_by_group);
    EXPECT_EQ(back.bias_by_group, report.bias_by_group);
    ASSERT_TRUE(back.reliability_bias.has_value());
    EXPECT_EQ(*back.reliability_bias, *report.reliability_bias);
    EXPECT_EQ(back.confusion.counts, report.confusion.counts);
    EXPECT_EQ(back.confusion_by_group.at("male").counts,
              report.confusion_by_group.at("male").counts);

    // A report with undefined bias keeps the null through the round trip.
    const EvalReport undefined =
        compute_report({0, 1, 0, 1}, {1, 0, 1, 0},
                       {Group::male, Group::male, Group::female, Group::female}, 2);
    const EvalReport undefined_back = report_from_json(to_json(undefined));
    EXPECT_FALSE(undefined_back.reliability_bias.has_value());
    EXPECT_EQ(undefined_back.bias_errors, undefined.bias_errors);
}

}  // namespace
}  // namespace kwsbias
