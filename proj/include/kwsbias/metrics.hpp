// metrics.hpp -- confusion matrices, multiclass MCC, auxiliary metrics and
// the log-ratio reliability bias measure, plus the evaluation report schema.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kwsbias/common.hpp"
#include "kwsbias/dataset.hpp"

namespace kwsbias {

struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<long long> counts;  // row = true class, column = predicted class

    static ConfusionMatrix zeros(int num_classes) {
        require(num_classes >= 2, ErrorCode::invalid_argument, "need at least 2 classes");
        ConfusionMatrix cm;
        cm.num_classes = num_classes;
        cm.counts.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
        return cm;
    }

    long long& at(int truth, int predicted) {
        return counts[static_cast<std::size_t>(truth) * num_classes + predicted];
    }
    long long at(int truth, int predicted) const {
        return counts[static_cast<std::size_t>(truth) * num_classes + predicted];
    }

    long long total() const {
        long long s = 0;
        for (long long c : counts) {
            s += c;
        }
        return s;
    }

    long long row_sum(int truth) const {
        long long s = 0;
        for (int p = 0; p < num_classes; ++p) {
            s += at(truth, p);
        }
        return s;
    }

    long long col_sum(int predicted) const {
        long long s = 0;
        for (int t = 0; t < num_classes; ++t) {
            s += at(t, predicted);
        }
        return s;
    }
};

inline ConfusionMatrix confusion_matrix(const std::vector<int>& labels,
                                        const std::vector<int>& predictions, int num_classes) {
    require(labels.size() == predictions.size(), ErrorCode::invalid_argument,
            "labels and predictions differ in length");
    auto cm = ConfusionMatrix::zeros(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] >= 0 && labels[i] < num_classes, ErrorCode::label_out_of_range,
                "label " + std::to_string(labels[i]) + " outside [0, " +
                    std::to_string(num_classes) + ")");
        require(predictions[i] >= 0 && predictions[i] < num_classes,
                ErrorCode::label_out_of_range,
                "prediction " + std::to_string(predictions[i]) + " outside [0, " +
                    std::to_string(num_classes) + ")");
        ++cm.at(labels[i], predictions[i]);
    }
    return cm;
}

// Multiclass Matthews correlation coefficient:
//   (c*s - sum_k p_k t_k) / sqrt((s^2 - sum p_k^2)(s^2 - sum t_k^2))
// where c = correct count, s = total, t_k/p_k = true/predicted counts per
// class. Defined as 0 when either variance factor vanishes (all-one-class
// labels or predictions).
inline double mcc(const ConfusionMatrix& cm) {
    const double s = static_cast<double>(cm.total());
    require(s > 0.0, ErrorCode::undefined_metric, "confusion matrix is empty");
    double c = 0.0;
    double sum_pt = 0.0;
    double sum_pp = 0.0;
    double sum_tt = 0.0;
    for (int k = 0; k < cm.num_classes; ++k) {
        c += static_cast<double>(cm.at(k, k));
        const double t = static_cast<double>(cm.row_sum(k));
        const double p = static_cast<double>(cm.col_sum(k));
        sum_pt += p * t;
        sum_pp += p * p;
        sum_tt += t * t;
    }
    const double cov_xx = s * s - sum_pp;
    const double cov_yy = s * s - sum_tt;
    if (cov_xx <= 0.0 || cov_yy <= 0.0) {
        return 0.0;
    }
    return (c * s - sum_pt) / std::sqrt(cov_xx * cov_yy);
}

struct AuxMetrics {
    double precision = 0.0;  // macro average
    double recall = 0.0;     // macro average
    double weighted_f1 = 0.0;
    double cohen_kappa = 0.0;
};

// Macro precision/recall (classes with no predictions or no instances
// contribute 0 to their average), support-weighted F1, and Cohen's kappa.
inline AuxMetrics aux_metrics(const ConfusionMatrix& cm) {
    const double s = static_cast<double>(cm.total());
    require(s > 0.0, ErrorCode::undefined_metric, "confusion matrix is empty");
    AuxMetrics out;
    double sum_pt = 0.0;
    double correct = 0.0;
    for (int k = 0; k < cm.num_classes; ++k) {
        const double tp = static_cast<double>(cm.at(k, k));
        const double t = static_cast<double>(cm.row_sum(k));
        const double p = static_cast<double>(cm.col_sum(k));
        const double precision = p > 0.0 ? tp / p : 0.0;
        const double recall = t > 0.0 ? tp / t : 0.0;
        out.precision += precision;
        out.recall += recall;
        const double f1 =
            precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        out.weighted_f1 += (t / s) * f1;
        sum_pt += p * t;
        correct += tp;
    }
    out.precision /= static_cast<double>(cm.num_classes);
    out.recall /= static_cast<double>(cm.num_classes);
    const double po = correct / s;
    const double pe = sum_pt / (s * s);
    out.cohen_kappa = 1.0 - pe > 0.0 ? (po - pe) / (1.0 - pe) : 0.0;
    return out;
}

// Log-ratio bias of one group's performance against overall performance.
// Positive means the group does better than the model overall.
inline double group_bias(double group_performance, double overall_performance) {
    require(group_performance > 0.0 && std::isfinite(group_performance),
            ErrorCode::non_positive_performance,
            "group performance must be positive to take its log ratio");
    require(overall_performance > 0.0 && std::isfinite(overall_performance),
            ErrorCode::non_positive_performance,
            "overall performance must be positive to take its log ratio");
    return std::log(group_performance / overall_performance);
}

// Sum of absolute log-ratio biases across groups.
inline double reliability_bias(const std::map<std::string, double>& performance_by_group,
                               double overall_performance) {
    require(!performance_by_group.empty(), ErrorCode::invalid_argument,
            "need at least one group");
    double total = 0.0;
    for (const auto& [group, performance] : performance_by_group) {
        total += std::abs(group_bias(performance, overall_performance));
    }
    return total;
}

// Full evaluation of one model on one split.
struct EvalReport {
    std::string model_id;
    std::string dataset_id;
    std::string split;
    double overall_mcc = 0.0;
    AuxMetrics aux;
    std::map<std::string, double> mcc_by_group;
    std::map<std::string, double> bias_by_group;  // only groups where defined
    std::optional<double> reliability_bias;       // absent when any group bias is undefined
    std::vector<std::string> bias_errors;
    ConfusionMatrix confusion;
    std::map<std::string, ConfusionMatrix> confusion_by_group;
};

// Builds an EvalReport from per-utterance labels, predictions and groups.
// Both genders must appear in the evaluated set; per-group metrics use the
// group's own confusion matrix. Bias terms are reported only when every
// involved MCC is positive, since the log ratio is undefined otherwise; the
// reasons land in bias_errors.
inline EvalReport compute_report(const std::vector<int>& labels,
                                 const std::vector<int>& predictions,
                                 const std::vector<Group>& groups, int num_classes) {
    require(labels.size() == groups.size(), ErrorCode::invalid_argument,
            "labels and groups differ in length");
    EvalReport report;
    report.confusion = confusion_matrix(labels, predictions, num_classes);
    report.overall_mcc = mcc(report.confusion);
    report.aux = aux_metrics(report.confusion);

    for (Group g : {Group::male, Group::female}) {
        std::vector<int> group_labels;
        std::vector<int> group_preds;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (groups[i] == g) {
                group_labels.push_back(labels[i]);
                group_preds.push_back(predictions[i]);
            }
        }
        require(!group_labels.empty(), ErrorCode::group_coverage,
                std::string("no ") + to_string(g) + " utterances in evaluated split");
        const std::string name = to_string(g);
        report.confusion_by_group[name] =
            confusion_matrix(group_labels, group_preds, num_classes);
        report.mcc_by_group[name] = mcc(report.confusion_by_group[name]);
    }

    bool all_defined = report.overall_mcc > 0.0;
    if (!all_defined) {
        report.bias_errors.push_back("overall MCC is not positive; bias undefined");
    }
    for (const auto& [name, group_mcc] : report.mcc_by_group) {
        if (group_mcc <= 0.0) {
            all_defined = false;
            report.bias_errors.push_back(name + " MCC is not positive; bias undefined");
        }
    }
    if (all_defined) {
        double total = 0.0;
        for (const auto& [name, group_mcc] : report.mcc_by_group) {
            const double bias = group_bias(group_mcc, report.overall_mcc);
            report.bias_by_group[name] = bias;
            total += std::abs(bias);
        }
        report.reliability_bias = total;
    }
    return report;
}

// Difference between a pruned (or otherwise modified) model's report and its
// baseline. Group sets must match.
struct DeltaReport {
    std::string baseline_id;
    std::string candidate_id;
    double delta_mcc = 0.0;
    std::optional<double> delta_reliability_bias;
    std::map<std::string, double> delta_mcc_by_group;
};

inline DeltaReport delta_report(const EvalReport& baseline, const EvalReport& candidate) {
    DeltaReport delta;
    delta.baseline_id = baseline.model_id;
    delta.candidate_id = candidate.model_id;
    delta.delta_mcc = candidate.overall_mcc - baseline.overall_mcc;
    require(baseline.mcc_by_group.size() == candidate.mcc_by_group.size(),
            ErrorCode::comparison_mismatch, "reports cover different group sets");
    for (const auto& [name, value] : candidate.mcc_by_group) {
        const auto it = baseline.mcc_by_group.find(name);
        require(it != baseline.mcc_by_group.end(), ErrorCode::comparison_mismatch,
                "group '" + name + "' missing from baseline report");
        delta.delta_mcc_by_group[name] = value - it->second;
    }
    if (baseline.reliability_bias.has_value() && candidate.reliability_bias.has_value()) {
        delta.delta_reliability_bias = *candidate.reliability_bias - *baseline.reliability_bias;
    }
    return delta;
}

// --- JSON serialization -----------------------------------------------------

inline nlohmann::json to_json(const ConfusionMatrix& cm) {
    nlohmann::json rows = nlohmann::json::array();
    for (int t = 0; t < cm.num_classes; ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (int p = 0; p < cm.num_classes; ++p) {
            row.push_back(cm.at(t, p));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline ConfusionMatrix confusion_from_json(const nlohmann::json& rows) {
    auto cm = ConfusionMatrix::zeros(static_cast<int>(rows.size()));
    for (int t = 0; t < cm.num_classes; ++t) {
        const auto& row = rows.at(static_cast<std::size_t>(t));
        require(static_cast<int>(row.size()) == cm.num_classes, ErrorCode::invalid_argument,
                "confusion matrix is not square");
        for (int p = 0; p < cm.num_classes; ++p) {
            cm.at(t, p) = row.at(static_cast<std::size_t>(p)).get<long long>();
        }
    }
    return cm;
}

inline nlohmann::json to_json(const EvalReport& report) {
    nlohmann::json j;
    j["model_id"] = report.model_id;
    j["dataset_id"] = report.dataset_id;
    j["split"] = report.split;
    j["overall_mcc"] = report.overall_mcc;
    j["aux"] = {{"precision", report.aux.precision},
                {"recall", report.aux.recall},
                {"weighted_f1", report.aux.weighted_f1},
                {"cohen_kappa", report.aux.cohen_kappa}};
    j["mcc_by_group"] = report.mcc_by_group;
    j["bias_by_group"] = report.bias_by_group;
    if (report.reliability_bias.has_value()) {
        j["reliability_bias"] = *report.reliability_bias;
    } else {
        j["reliability_bias"] = nullptr;
    }
    j["bias_errors"] = report.bias_errors;
    j["confusion"] = to_json(report.confusion);
    nlohmann::json by_group = nlohmann::json::object();
    for (const auto& [name, cm] : report.confusion_by_group) {
        by_group[name] = to_json(cm);
    }
    j["confusion_by_group"] = std::move(by_group);
    return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport report;
    report.model_id = j.at("model_id").get<std::string>();
    report.dataset_id = j.at("dataset_id").get<std::string>();
    report.split = j.at("split").get<std::string>();
    report.overall_mcc = j.at("overall_mcc").get<double>();
    report.aux.precision = j.at("aux").at("precision").get<double>();
    report.aux.recall = j.at("aux").at("recall").get<double>();
    report.aux.weighted_f1 = j.at("aux").at("weighted_f1").get<double>();
    report.aux.cohen_kappa = j.at("aux").at("cohen_kappa").get<double>();
    report.mcc_by_group = j.at("mcc_by_group").get<std::map<std::string, double>>();
    report.bias_by_group = j.at("bias_by_group").get<std::map<std::string, double>>();
    if (!j.at("reliability_bias").is_null()) {
        report.reliability_bias = j.at("reliability_bias").get<double>();
    }
    report.bias_errors = j.at("bias_errors").get<std::vector<std::string>>();
    report.confusion = confusion_from_json(j.at("confusion"));
    for (const auto& [name, rows] : j.at("confusion_by_group").items()) {
        report.confusion_by_group[name] = confusion_from_json(rows);
    }
    return report;
}

inline nlohmann::json to_json(const DeltaReport& delta) {
    nlohmann::json j;
    j["baseline_id"] = delta.baseline_id;
    j["candidate_id"] = delta.candidate_id;
    j["delta_mcc"] = delta.delta_mcc;
    if (delta.delta_reliability_bias.has_value()) {
        j["delta_reliability_bias"] = *delta.delta_reliability_bias;
    } else {
        j["delta_reliability_bias"] = nullptr;
    }
    j["delta_mcc_by_group"] = delta.delta_mcc_by_group;
    return j;
}

}  // namespace kwsbias
