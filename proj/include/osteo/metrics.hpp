#pragma once

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace osteo::metrics {

struct EvalRecord {
    std::string tile_id;
    int true_label = 0;
    std::array<double, 3> dist3{};
    int predicted = 0;
};

/// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie).
/// labels are 0/1; throws UndefinedMetric unless both are present.
double auc_binary(std::span<const double> scores, std::span<const int> labels);

/// Mean of the three one-vs-rest AUCs, class c scored by dist3[c].
double ovr_macro_auc(std::span<const EvalRecord> records);

/// Max sensitivity over thresholds t (score > t is positive) subject to
/// specificity >= spe_floor. Candidates: -inf and every observed score.
double sen_at_spe(std::span<const double> scores, std::span<const int> labels, double spe_floor = 0.90);
/// Max specificity subject to sensitivity >= sen_floor.
double spe_at_sen(std::span<const double> scores, std::span<const int> labels, double sen_floor = 0.90);

struct F1Scores {
    double macro = 0.0;
    double weighted = 0.0;
    std::array<double, 3> per_class{};
};

F1Scores f1_scores(std::span<const EvalRecord> records);
double accuracy(std::span<const EvalRecord> records);

struct ClassMetrics {
    double sen_at_spe90 = 0.0;
    double spe_at_sen90 = 0.0;
    double f1 = 0.0;
    double auc = 0.0;

    bool operator==(const ClassMetrics&) const = default;
};

struct MetricTable {
    double accuracy = 0.0;
    double f1_macro = 0.0;
    double f1_weighted = 0.0;
    double auc_ovr = 0.0;
    std::array<ClassMetrics, 3> per_class{};

    /// Ordered (name, value) pairs, overall metrics first.
    std::vector<std::pair<std::string, double>> flatten() const;
    nlohmann::json to_json(int runs, const std::string& config_hash) const;
    static MetricTable from_json(const nlohmann::json& j);
    bool operator==(const MetricTable&) const = default;
};

MetricTable evaluate_records(std::span<const EvalRecord> records);

struct Stat {
    double mean = 0.0;
    double std = 0.0;
};

/// "0.86±0.01"
std::string format_pm(const Stat& s, int decimals = 2);

struct RunAggregate {
    std::vector<std::pair<std::string, Stat>> stats;  // same order as MetricTable::flatten
    int n_runs = 0;

    const Stat& at(const std::string& name) const;
    nlohmann::json to_json() const;
};

/// Mean and sample standard deviation (n - 1) per metric. Needs >= 2 runs.
RunAggregate aggregate_runs(std::span<const MetricTable> tables);

/// Two-sided Welch t-test p-value over run-level values.
double significance(std::span<const double> runs_a, std::span<const double> runs_b);

struct RocPoint {
    double threshold;
    double fpr;
    double tpr;
};

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);

}  // namespace osteo::metrics
