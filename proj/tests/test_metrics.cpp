#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "metric_oracles.hpp"
#include "osteo/errors.hpp"
#include "osteo/metrics.hpp"

using namespace osteo;
using namespace osteo::metrics;

namespace {

EvalRecord rec(int y, int pred, std::array<double, 3> d = {1.0 / 3, 1.0 / 3, 1.0 / 3}) {
    EvalRecord r;
    r.true_label = y;
    r.predicted = pred;
    r.dist3 = d;
    return r;
}

MetricTable table_with(double acc) {
    MetricTable t;
    t.accuracy = acc;
    return t;
}

}  // namespace

TEST(Auc, Examples) {
    const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
    const std::vector<int> y = {0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(auc_binary(s, y), 0.75);
    const std::vector<double> sep = {0.1, 0.2, 0.8, 0.9};
    EXPECT_DOUBLE_EQ(auc_binary(sep, y), 1.0);
    const std::vector<double> flat(4, 0.3);
    EXPECT_DOUBLE_EQ(auc_binary(flat, y), 0.5);
}

TEST(Auc, SingleClassIsUndefined) {
    const std::vector<double> s = {0.1, 0.2};
    const std::vector<int> y = {1, 1};
    EXPECT_THROW(auc_binary(s, y), UndefinedMetric);
    EXPECT_THROW(sen_at_spe(s, y), UndefinedMetric);
    EXPECT_THROW(spe_at_sen(s, y), UndefinedMetric);
}

TEST(Auc, InvariantUnderMonotoneTransforms) {
    std::mt19937_64 rng(2);
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 100; ++i) {
        test::random_binary(rng, s, y);
        std::vector<double> t1(s.size()), t2(s.size());
        for (std::size_t k = 0; k < s.size(); ++k) {
            t1[k] = std::exp(3.0 * s[k]) - 7.0;
            t2[k] = std::atan(s[k] * 10.0 - 4.0);
        }
        EXPECT_EQ(auc_binary(s, y), auc_binary(t1, y));
        EXPECT_EQ(auc_binary(s, y), auc_binary(t2, y));
    }
}

TEST(OvrAuc, IdenticalPerClassAucs) {
    // Each class is scored by a rotated copy of the same separable layout.
    std::vector<EvalRecord> r = {rec(0, 0, {0.8, 0.1, 0.1}), rec(1, 1, {0.1, 0.8, 0.1}), rec(2, 2, {0.1, 0.1, 0.8})};
    EXPECT_DOUBLE_EQ(ovr_macro_auc(r), 1.0);
}

TEST(OvrAuc, MissingClassIsUndefined) {
    std::vector<EvalRecord> r = {rec(0, 0), rec(1, 1)};
    EXPECT_THROW(ovr_macro_auc(r), UndefinedMetric);
}

TEST(OvrAuc, RandomScoresNearHalf) {
    std::mt19937_64 rng(12345);
    const auto r = test::random_records(rng, 10000);
    EXPECT_NEAR(ovr_macro_auc(r), 0.5, 0.02);
}

TEST(OvrAuc, MatchesPairwiseOracle) {
    std::mt19937_64 rng(6);
    const auto r = test::random_records(rng, 300);
    double sum = 0.0;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> s;
        std::vector<int> y;
        for (const auto& x : r) {
            s.push_back(x.dist3[static_cast<std::size_t>(c)]);
            y.push_back(x.true_label == c);
        }
        sum += test::brute_auc(s, y);
    }
    EXPECT_NEAR(ovr_macro_auc(r), sum / 3.0, 1e-9);
}

TEST(ThresholdMetrics, Examples) {
    const std::vector<int> y = {0, 0, 0, 1, 1, 1};
    const std::vector<double> sep = {0.1, 0.2, 0.3, 0.7, 0.8, 0.9};
    EXPECT_DOUBLE_EQ(sen_at_spe(sep, y), 1.0);
    EXPECT_DOUBLE_EQ(spe_at_sen(sep, y), 1.0);
    const std::vector<double> inverted = {0.7, 0.8, 0.9, 0.1, 0.2, 0.3};
    EXPECT_DOUBLE_EQ(sen_at_spe(inverted, y), 0.0);
    EXPECT_DOUBLE_EQ(spe_at_sen(inverted, y), 0.0);
}

TEST(ThresholdMetrics, MatchBruteForceExactly) {
    std::mt19937_64 rng(21);
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 500; ++i) {
        test::random_binary(rng, s, y);
        EXPECT_EQ(sen_at_spe(s, y, 0.9), test::brute_constrained<true>(s, y, 0.9));
        EXPECT_EQ(spe_at_sen(s, y, 0.9), test::brute_constrained<false>(s, y, 0.9));
        EXPECT_EQ(auc_binary(s, y), test::brute_auc(s, y));
    }
}

TEST(ThresholdMetrics, MonotoneInFloor) {
    std::mt19937_64 rng(33);
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 100; ++i) {
        test::random_binary(rng, s, y);
        double prev_sen = 2.0, prev_spe = 2.0;
        for (double f = 0.0; f <= 1.0; f += 0.05) {
            const double a = sen_at_spe(s, y, f), b = spe_at_sen(s, y, f);
            EXPECT_LE(a, prev_sen);
            EXPECT_LE(b, prev_spe);
            EXPECT_GE(a, 0.0);
            EXPECT_LE(a, 1.0);
            prev_sen = a;
            prev_spe = b;
        }
    }
}

TEST(F1, AllCorrect) {
    std::vector<EvalRecord> r = {rec(0, 0), rec(1, 1), rec(2, 2), rec(2, 2)};
    const auto f = f1_scores(r);
    EXPECT_DOUBLE_EQ(f.macro, 1.0);
    EXPECT_DOUBLE_EQ(f.weighted, 1.0);
    EXPECT_DOUBLE_EQ(accuracy(r), 1.0);
}

TEST(F1, HandConfusionCounts) {
    // Class 0: TP=2, FP=1, FN=1.
    std::vector<EvalRecord> r = {rec(0, 0), rec(0, 0), rec(1, 0), rec(0, 2)};
    EXPECT_NEAR(f1_scores(r).per_class[0], 2.0 / 3.0, 1e-15);
}

TEST(F1, WeightedEqualsMacroForEqualSupport) {
    std::mt19937_64 rng(4);
    auto r = test::random_records(rng, 30);
    for (std::size_t i = 0; i < r.size(); ++i) r[i].true_label = static_cast<int>(i % 3);
    const auto f = f1_scores(r);
    EXPECT_NEAR(f.weighted, f.macro, 1e-12);
}

TEST(F1, MatchesBruteForceAndAccuracyIsWeightedRecall) {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> n(1, 50);
    for (int i = 0; i < 200; ++i) {
        const auto r = test::random_records(rng, n(rng));
        EXPECT_EQ(f1_scores(r).per_class, test::brute_f1(r));
        std::array<double, 3> hit{}, support{};
        for (const auto& x : r) {
            support[static_cast<std::size_t>(x.true_label)] += 1;
            hit[static_cast<std::size_t>(x.true_label)] += x.predicted == x.true_label;
        }
        double weighted_recall = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            if (support[c] > 0) weighted_recall += (hit[c] / support[c]) * support[c] / static_cast<double>(r.size());
        }
        EXPECT_NEAR(accuracy(r), weighted_recall, 1e-12);
    }
}

TEST(Aggregate, ConstantAndPairRuns) {
    std::vector<MetricTable> five(5, table_with(0.8));
    const auto a = aggregate_runs(five);
    EXPECT_EQ(format_pm(a.at("accuracy")), "0.80±0.00");
    const std::vector<MetricTable> two = {table_with(0.7), table_with(0.9)};
    const auto b = aggregate_runs(two);
    EXPECT_NEAR(b.at("accuracy").mean, 0.8, 1e-12);
    EXPECT_NEAR(b.at("accuracy").std, 0.1414, 1e-4);
    EXPECT_EQ(format_pm({0.8612, 0.0134}), "0.86±0.01");
}

TEST(Significance, DegenerateAndSymmetric) {
    const std::vector<double> a = {0.9, 0.9, 0.9, 0.9, 0.9};
    const std::vector<double> b = {0.5, 0.5, 0.5, 0.5, 0.5};
    EXPECT_DOUBLE_EQ(significance(a, a), 1.0);
    const double p = significance(a, b);
    EXPECT_LT(p, 1e-6);
    EXPECT_GT(p, 0.0);
    const std::vector<double> c = {0.81, 0.84, 0.86, 0.85, 0.83};
    const std::vector<double> d = {0.78, 0.80, 0.79, 0.82, 0.77};
    EXPECT_EQ(significance(c, d), significance(d, c));
}

TEST(Significance, MatchesReferenceWelchValues) {
    // Two-sided Welch p-values from an independent statistics package.
    const std::vector<double> a1 = {0.81, 0.84, 0.86, 0.85, 0.83}, b1 = {0.78, 0.80, 0.79, 0.82, 0.77};
    EXPECT_NEAR(significance(a1, b1), 0.005379107766972947, 1e-10);
    const std::vector<double> a2 = {0.7, 0.9}, b2 = {0.6, 0.65, 0.7};
    EXPECT_NEAR(significance(a2, b2), 0.3603582451534124, 1e-10);
    const std::vector<double> a3 = {1, 2, 3, 4, 5}, b3 = {2, 3, 4, 5, 6, 7, 8};
    EXPECT_NEAR(significance(a3, b3), 0.09389377010090473, 1e-10);
}

TEST(MetricTable, JsonRoundTripAndRanges) {
    std::mt19937_64 rng(1);
    auto r = test::random_records(rng, 60);
    for (auto& x : r) {
        x.predicted = static_cast<int>(std::max_element(x.dist3.begin(), x.dist3.end()) - x.dist3.begin());
    }
    const auto t = evaluate_records(r);
    EXPECT_EQ(MetricTable::from_json(nlohmann::json::parse(t.to_json(1, "h").dump())), t);
    for (const auto& [k, v] : t.flatten()) {
        EXPECT_GE(v, 0.0) << k;
        EXPECT_LE(v, 1.0) << k;
    }
}

TEST(Roc, EndpointsAndMonotone) {
    const std::vector<double> s = {0.1, 0.4, 0.35, 0.8, 0.4};
    const std::vector<int> y = {0, 0, 1, 1, 1};
    const auto roc = roc_curve(s, y);
    EXPECT_EQ(roc.front().fpr, 0.0);
    EXPECT_EQ(roc.front().tpr, 0.0);
    EXPECT_EQ(roc.back().fpr, 1.0);
    EXPECT_EQ(roc.back().tpr, 1.0);
    for (std::size_t i = 1; i < roc.size(); ++i) {
        EXPECT_GE(roc[i].fpr, roc[i - 1].fpr);
        EXPECT_GE(roc[i].tpr, roc[i - 1].tpr);
    }
}
