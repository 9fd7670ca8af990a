#include "osteo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>

#include "osteo/errors.hpp"

namespace osteo::metrics {

namespace {

constexpr std::array<const char*, 3> kShort = {"NT", "NVT", "VT"};

struct Counts {
    std::size_t pos = 0;
    std::size_t neg = 0;
};

Counts count_labels(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
    Counts c;
    for (int y : labels) {
        if (y != 0 && y != 1) throw InvalidInput("binary labels must be 0 or 1");
        (y ? c.pos : c.neg) += 1;
    }
    if (c.pos == 0 || c.neg == 0) throw UndefinedMetric("metric needs both positive and negative samples");
    return c;
}

// Indices sorted by descending score.
std::vector<std::size_t> order_desc(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

// Calls fn(tp, fp) for the empty prediction set and after each group of
// tied scores enters the positive side, from the highest score down.
template <typename Fn>
void sweep(std::span<const double> scores, std::span<const int> labels, Fn&& fn) {
    const auto idx = order_desc(scores);
    std::size_t tp = 0, fp = 0;
    fn(tp, fp);
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? tp : fp) += 1;
            ++j;
        }
        fn(tp, fp);
        i = j;
    }
}

}  // namespace

double auc_binary(std::span<const double> scores, std::span<const int> labels) {
    const Counts c = count_labels(scores, labels);
    // Walk ascending; each positive beats every negative seen in lower
    // groups and ties half of the negatives in its own group.
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double wins = 0.0;
    std::size_t neg_below = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i, pos_g = 0, neg_g = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? pos_g : neg_g) += 1;
            ++j;
        }
        wins += static_cast<double>(pos_g * neg_below) + 0.5 * static_cast<double>(pos_g * neg_g);
        neg_below += neg_g;
        i = j;
    }
    return wins / (static_cast<double>(c.pos) * static_cast<double>(c.neg));
}

double ovr_macro_auc(std::span<const EvalRecord> records) {
    double sum = 0.0;
    std::vector<double> scores(records.size());
    std::vector<int> labels(records.size());
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < records.size(); ++i) {
            scores[i] = records[i].dist3[static_cast<std::size_t>(c)];
            labels[i] = records[i].true_label == c ? 1 : 0;
        }
        sum += auc_binary(scores, labels);
    }
    return sum / 3.0;
}

double sen_at_spe(std::span<const double> scores, std::span<const int> labels, double spe_floor) {
    const Counts c = count_labels(scores, labels);
    double best = 0.0;
    sweep(scores, labels, [&](std::size_t tp, std::size_t fp) {
        const double spe = static_cast<double>(c.neg - fp) / static_cast<double>(c.neg);
        if (spe >= spe_floor) best = std::max(best, static_cast<double>(tp) / static_cast<double>(c.pos));
    });
    return best;
}

double spe_at_sen(std::span<const double> scores, std::span<const int> labels, double sen_floor) {
    const Counts c = count_labels(scores, labels);
    double best = 0.0;
    sweep(scores, labels, [&](std::size_t tp, std::size_t fp) {
        const double sen = static_cast<double>(tp) / static_cast<double>(c.pos);
        if (sen >= sen_floor) {
            best = std::max(best, static_cast<double>(c.neg - fp) / static_cast<double>(c.neg));
        }
    });
    return best;
}

F1Scores f1_scores(std::span<const EvalRecord> records) {
    if (records.empty()) throw InvalidInput("no records to score");
    std::array<std::size_t, 3> tp{}, fp{}, fn{}, support{};
    for (const auto& r : records) {
        const auto y = static_cast<std::size_t>(r.true_label);
        const auto p = static_cast<std::size_t>(r.predicted);
        ++support[y];
        if (y == p) {
            ++tp[y];
        } else {
            ++fp[p];
            ++fn[y];
        }
    }
    F1Scores out;
    double weighted = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
        out.per_class[c] = denom == 0 ? 0.0 : static_cast<double>(2 * tp[c]) / static_cast<double>(denom);
        weighted += out.per_class[c] * static_cast<double>(support[c]);
    }
    out.macro = (out.per_class[0] + out.per_class[1] + out.per_class[2]) / 3.0;
    out.weighted = weighted / static_cast<double>(records.size());
    return out;
}

double accuracy(std::span<const EvalRecord> records) {
    if (records.empty()) throw InvalidInput("no records to score");
    const auto correct = std::count_if(records.begin(), records.end(),
                                       [](const EvalRecord& r) { return r.true_label == r.predicted; });
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

MetricTable evaluate_records(std::span<const EvalRecord> records) {
    MetricTable t;
    t.accuracy = accuracy(records);
    const F1Scores f1 = f1_scores(records);
    t.f1_macro = f1.macro;
    t.f1_weighted = f1.weighted;
    t.auc_ovr = ovr_macro_auc(records);
    std::vector<double> scores(records.size());
    std::vector<int> labels(records.size());
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < records.size(); ++i) {
            scores[i] = records[i].dist3[static_cast<std::size_t>(c)];
            labels[i] = records[i].true_label == c ? 1 : 0;
        }
        auto& m = t.per_class[static_cast<std::size_t>(c)];
        m.sen_at_spe90 = sen_at_spe(scores, labels, 0.90);
        m.spe_at_sen90 = spe_at_sen(scores, labels, 0.90);
        m.f1 = f1.per_class[static_cast<std::size_t>(c)];
        m.auc = auc_binary(scores, labels);
    }
    return t;
}

std::vector<std::pair<std::string, double>> MetricTable::flatten() const {
    std::vector<std::pair<std::string, double>> out = {
        {"accuracy", accuracy}, {"f1_macro", f1_macro}, {"f1_weighted", f1_weighted}, {"auc_ovr", auc_ovr}};
    for (std::size_t c = 0; c < 3; ++c) {
        const std::string p = kShort[c];
        out.emplace_back(p + ".sen_at_spe90", per_class[c].sen_at_spe90);
        out.emplace_back(p + ".spe_at_sen90", per_class[c].spe_at_sen90);
        out.emplace_back(p + ".f1", per_class[c].f1);
        out.emplace_back(p + ".auc", per_class[c].auc);
    }
    return out;
}

nlohmann::json MetricTable::to_json(int runs, const std::string& config_hash) const {
    nlohmann::json pc = nlohmann::json::array();
    for (std::size_t c = 0; c < 3; ++c) {
        pc.push_back({{"class", kShort[c]},
                      {"sen_at_spe90", per_class[c].sen_at_spe90},
                      {"spe_at_sen90", per_class[c].spe_at_sen90},
                      {"f1", per_class[c].f1},
                      {"auc", per_class[c].auc}});
    }
    return {{"overall",
             {{"accuracy", accuracy}, {"f1_macro", f1_macro}, {"f1_weighted", f1_weighted}, {"auc_ovr", auc_ovr}}},
            {"per_class", pc},
            {"runs", runs},
            {"config_hash", config_hash}};
}

MetricTable MetricTable::from_json(const nlohmann::json& j) {
    MetricTable t;
    const auto& o = j.at("overall");
    t.accuracy = o.at("accuracy").get<double>();
    t.f1_macro = o.at("f1_macro").get<double>();
    t.f1_weighted = o.at("f1_weighted").get<double>();
    t.auc_ovr = o.at("auc_ovr").get<double>();
    const auto& pc = j.at("per_class");
    if (pc.size() != 3) throw IoError("metrics JSON must list 3 classes");
    for (std::size_t c = 0; c < 3; ++c) {
        t.per_class[c].sen_at_spe90 = pc[c].at("sen_at_spe90").get<double>();
        t.per_class[c].spe_at_sen90 = pc[c].at("spe_at_sen90").get<double>();
        t.per_class[c].f1 = pc[c].at("f1").get<double>();
        t.per_class[c].auc = pc[c].at("auc").get<double>();
    }
    return t;
}

std::string format_pm(const Stat& s, int decimals) {
    return fmt::format("{:.{}f}±{:.{}f}", s.mean, decimals, s.std, decimals);
}

const Stat& RunAggregate::at(const std::string& name) const {
    for (const auto& [k, v] : stats) {
        if (k == name) return v;
    }
    throw InvalidInput("no aggregated metric named " + name);
}

nlohmann::json RunAggregate::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : stats) j[k] = {{"mean", v.mean}, {"std", v.std}};
    return {{"n_runs", n_runs}, {"metrics", j}};
}

RunAggregate aggregate_runs(std::span<const MetricTable> tables) {
    if (tables.size() < 2) throw InvalidInput("aggregation needs at least 2 runs");
    RunAggregate agg;
    agg.n_runs = static_cast<int>(tables.size());
    const auto names = tables.front().flatten();
    const auto n = static_cast<double>(tables.size());
    for (std::size_t k = 0; k < names.size(); ++k) {
        double mean = 0.0;
        for (const auto& t : tables) mean += t.flatten()[k].second;
        mean /= n;
        double ss = 0.0;
        for (const auto& t : tables) {
            const double d = t.flatten()[k].second - mean;
            ss += d * d;
        }
        agg.stats.emplace_back(names[k].first, Stat{mean, std::sqrt(ss / (n - 1.0))});
    }
    return agg;
}

double significance(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw InvalidInput("significance test needs >= 2 runs per arm");
    auto moments = [](std::span<const double> x) {
        const double n = static_cast<double>(x.size());
        const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
        double ss = 0.0;
        for (double v : x) ss += (v - mean) * (v - mean);
        return std::pair{mean, ss / (n - 1.0)};
    };
    const auto [ma, va] = moments(a);
    const auto [mb, vb] = moments(b);
    const double sa = va / static_cast<double>(a.size());
    const double sb = vb / static_cast<double>(b.size());
    const double se2 = sa + sb;
    if (se2 <= 0.0) {
        // Both arms constant: identical arms are indistinguishable, distinct
        // ones are separated with certainty (smallest representable p).
        return ma == mb ? 1.0 : std::numeric_limits<double>::min();
    }
    const double t = (ma - mb) / std::sqrt(se2);
    const double df = se2 * se2 /
                      (sa * sa / static_cast<double>(a.size() - 1) + sb * sb / static_cast<double>(b.size() - 1));
    const boost::math::students_t dist(df);
    const double p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    return std::clamp(p, std::numeric_limits<double>::min(), 1.0);
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
    const Counts c = count_labels(scores, labels);
    std::vector<RocPoint> out;
    const auto idx = order_desc(scores);
    out.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? tp : fp) += 1;
            ++j;
        }
        out.push_back({scores[idx[i]], static_cast<double>(fp) / static_cast<double>(c.neg),
                       static_cast<double>(tp) / static_cast<double>(c.pos)});
        i = j;
    }
    return out;
}

}  // namespace osteo::metrics
