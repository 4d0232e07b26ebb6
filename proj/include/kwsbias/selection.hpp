// selection.hpp -- model selection over evaluation results: best accuracy,
// lowest bias, or lowest bias within an accuracy tolerance band.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "kwsbias/common.hpp"
#include "kwsbias/metrics.hpp"

namespace kwsbias {

enum class CriterionKind { high_accuracy, low_bias, low_bias_high_accuracy };

inline const char* to_string(CriterionKind k) {
    switch (k) {
        case CriterionKind::high_accuracy: return "high_accuracy";
        case CriterionKind::low_bias: return "low_bias";
        case CriterionKind::low_bias_high_accuracy: return "low_bias_high_accuracy";
    }
    return "high_accuracy";
}

inline CriterionKind criterion_from_string(const std::string& s) {
    if (s == "high_accuracy") return CriterionKind::high_accuracy;
    if (s == "low_bias") return CriterionKind::low_bias;
    if (s == "low_bias_high_accuracy") return CriterionKind::low_bias_high_accuracy;
    fail(ErrorCode::invalid_config, "unknown selection criterion '" + s + "'");
}

struct SelectionCriterion {
    CriterionKind kind = CriterionKind::low_bias_high_accuracy;
    double accuracy_tolerance = 0.015;  // MCC must reach (1 - tol) * best MCC
    int top_m = 1;

    void validate() const {
        require(accuracy_tolerance >= 0.0 && accuracy_tolerance < 1.0, ErrorCode::invalid_config,
                "accuracy_tolerance must be in [0, 1)");
        require(top_m >= 1, ErrorCode::invalid_config, "top_m must be >= 1");
    }
};

struct ScoredModel {
    std::string id;
    double mcc = 0.0;
    std::optional<double> reliability_bias;
};

inline ScoredModel scored_from_report(const EvalReport& report) {
    ScoredModel model;
    model.id = report.model_id;
    model.mcc = report.overall_mcc;
    model.reliability_bias = report.reliability_bias;
    return model;
}

// Ranks candidates under the criterion and returns up to top_m of them.
// high_accuracy orders by MCC (ties: lower bias, then input order).
// low_bias orders by reliability bias (ties: higher MCC, then input order)
// and considers only candidates whose bias is defined.
// low_bias_high_accuracy keeps candidates whose MCC is at least
// (1 - tolerance) * best MCC and picks the lowest bias among them. With
// tolerance 0 the band collapses to the accuracy-optimal set, so the result
// matches high_accuracy with its bias tie-break.
inline std::vector<ScoredModel> select(const std::vector<ScoredModel>& candidates,
                                       const SelectionCriterion& criterion) {
    criterion.validate();
    require(!candidates.empty(), ErrorCode::selection_empty, "no candidates to select from");
    for (const auto& c : candidates) {
        require(std::isfinite(c.mcc), ErrorCode::invalid_argument,
                "candidate '" + c.id + "' has non-finite MCC");
        require(!c.reliability_bias.has_value() || std::isfinite(*c.reliability_bias),
                ErrorCode::invalid_argument,
                "candidate '" + c.id + "' has non-finite reliability bias");
    }

    struct Entry {
        ScoredModel model;
        std::size_t order;
    };
    std::vector<Entry> pool;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        pool.push_back({candidates[i], i});
    }

    const auto bias_or_inf = [](const ScoredModel& m) {
        return m.reliability_bias.value_or(std::numeric_limits<double>::infinity());
    };

    if (criterion.kind == CriterionKind::high_accuracy) {
        std::sort(pool.begin(), pool.end(), [&](const Entry& a, const Entry& b) {
            if (a.model.mcc != b.model.mcc) {
                return a.model.mcc > b.model.mcc;
            }
            if (bias_or_inf(a.model) != bias_or_inf(b.model)) {
                return bias_or_inf(a.model) < bias_or_inf(b.model);
            }
            return a.order < b.order;
        });
    } else {
        if (criterion.kind == CriterionKind::low_bias_high_accuracy) {
            double best_mcc = pool.front().model.mcc;
            for (const auto& e : pool) {
                best_mcc = std::max(best_mcc, e.model.mcc);
            }
            // min() keeps the band non-empty when the best MCC is negative
            // ((1 - tol) * best would then exceed best).
            const double threshold =
                std::min((1.0 - criterion.accuracy_tolerance) * best_mcc, best_mcc);
            std::erase_if(pool, [&](const Entry& e) { return e.model.mcc < threshold; });
        }
        std::erase_if(pool, [](const Entry& e) { return !e.model.reliability_bias.has_value(); });
        require(!pool.empty(), ErrorCode::selection_empty,
                "no qualifying candidate has a defined reliability bias");
        std::sort(pool.begin(), pool.end(), [&](const Entry& a, const Entry& b) {
            if (*a.model.reliability_bias != *b.model.reliability_bias) {
                return *a.model.reliability_bias < *b.model.reliability_bias;
            }
            if (a.model.mcc != b.model.mcc) {
                return a.model.mcc > b.model.mcc;
            }
            return a.order < b.order;
        });
    }

    std::vector<ScoredModel> selected;
    const auto count = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(criterion.top_m));
    for (std::size_t i = 0; i < count; ++i) {
        selected.push_back(pool[i].model);
    }
    return selected;
}

}  // namespace kwsbias
