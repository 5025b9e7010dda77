#include "mmcl/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace mmcl {

double accuracy_percent(std::size_t correct, std::size_t total) {
    if (total == 0) throw MetricError("accuracy over zero examples");
    return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

double micro_f1_percent(std::size_t tp, std::size_t fp, std::size_t fn) {
    const std::size_t denom = 2 * tp + fp + fn;
    if (denom == 0) throw MetricError("micro-F1 undefined: no positives anywhere");
    return 100.0 * 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

double relative_gain(double s_a, double s_b, double s_r) {
    const double denom = s_b - s_r;
    if (std::fabs(denom) < 1e-9)
        throw DegenerateBaseline("baseline score equals the random baseline");
    return 100.0 * (s_a - s_b) / denom;
}

double knowledge_transfer(double s_cl, double s_direct, double s_random) {
    return relative_gain(s_cl, s_direct, s_random);
}

double forgetting(double s_just_after, double s_after_later, double s_random) {
    const double denom = s_just_after - s_random;
    if (std::fabs(denom) < 1e-9)
        throw DegenerateBaseline("just-after-training score equals the random baseline");
    return 100.0 * (s_just_after - s_after_later) / denom;
}

double low_shot_transfer(double s_cl_ls, double s_direct_ls, double s_random) {
    return relative_gain(s_cl_ls, s_direct_ls, s_random);
}

namespace {

struct SeedScores {
    std::vector<std::uint64_t> seeds;
    std::vector<double> scores;

    void add(std::uint64_t seed, double score, const std::string& what) {
        if (std::find(seeds.begin(), seeds.end(), seed) != seeds.end())
            throw MetricError("duplicate record for seed " + std::to_string(seed) + ": " +
                              what);
        seeds.push_back(seed);
        scores.push_back(score);
    }
    double mean() const {
        double m = 0;
        for (double s : scores) m += s;
        return m / static_cast<double>(scores.size());
    }
    double stddev() const {
        if (scores.size() < 2) return 0.0;
        const double m = mean();
        double acc = 0;
        for (double s : scores) acc += (s - m) * (s - m);
        return std::sqrt(acc / static_cast<double>(scores.size() - 1));
    }
};

std::string key_of(const ScoreRecord& r) {
    return r.algorithm + "|" + r.evaluated_task + "|" + r.checkpoint_after_task + "|" +
           r.regime;
}

}  // namespace

MetricReport build_report(const std::vector<ScoreRecord>& records,
                          const std::map<std::string, double>& random_baselines) {
    MetricReport report;
    report.random_baselines = random_baselines;

    std::map<std::string, SeedScores> grouped;
    std::vector<const ScoreRecord*> order;  // first appearance per key
    std::vector<std::uint64_t> seeds;
    for (const auto& r : records) {
        const std::string key = key_of(r);
        auto [it, inserted] = grouped.try_emplace(key);
        if (inserted) order.push_back(&r);
        it->second.add(r.seed, r.score, key);
        if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end())
            seeds.push_back(r.seed);
    }
    report.num_seeds = seeds.size();
    for (const auto& [key, group] : grouped)
        if (group.scores.size() != seeds.size())
            throw MetricError("incomplete seed coverage for " + key);

    auto baseline_of = [&](const std::string& task) {
        auto it = random_baselines.find(task);
        if (it == random_baselines.end())
            throw MetricError("no random baseline for task " + task);
        return it->second;
    };

    // upstream task order and per-(task) baselines first
    for (const auto* r : order) {
        if (r->regime == "upstream" && r->evaluated_task == r->checkpoint_after_task &&
            std::find(report.task_order.begin(), report.task_order.end(),
                      r->evaluated_task) == report.task_order.end())
            report.task_order.push_back(r->evaluated_task);
        if (r->regime == "direct") {
            const auto& g = grouped.at(key_of(*r));
            report.direct_scores[r->evaluated_task] = g.mean();
            report.direct_std[r->evaluated_task] = g.stddev();
        }
        if (r->regime == "lowshot_direct") {
            const auto& g = grouped.at(key_of(*r));
            report.lowshot_direct_scores[r->evaluated_task] = g.mean();
            report.lowshot_direct_std[r->evaluated_task] = g.stddev();
        }
    }

    for (const auto* r : order) {
        const auto& g = grouped.at(key_of(*r));
        const double mean = g.mean();
        auto& alg = report.algorithms[r->algorithm];
        if (r->regime == "upstream") {
            if (r->evaluated_task == r->checkpoint_after_task) {
                auto it = report.direct_scores.find(r->evaluated_task);
                if (it == report.direct_scores.end())
                    throw MetricError("missing direct baseline for " + r->evaluated_task);
                alg.knowledge_transfer[r->evaluated_task] = {
                    knowledge_transfer(mean, it->second, baseline_of(r->evaluated_task)),
                    mean};
                alg.raw_std[r->evaluated_task] = g.stddev();
            }
        } else if (r->regime == "lowshot") {
            auto it = report.lowshot_direct_scores.find(r->evaluated_task);
            if (it == report.lowshot_direct_scores.end())
                throw MetricError("missing low-shot direct baseline for " +
                                  r->evaluated_task);
            alg.low_shot[r->evaluated_task][r->checkpoint_after_task] = {
                low_shot_transfer(mean, it->second, baseline_of(r->evaluated_task)), mean};
        }
    }

    // forgetting needs the just-after-training scores collected above
    for (const auto* r : order) {
        if (r->regime != "upstream" || r->evaluated_task == r->checkpoint_after_task)
            continue;
        auto& alg = report.algorithms[r->algorithm];
        auto it = alg.knowledge_transfer.find(r->evaluated_task);
        if (it == alg.knowledge_transfer.end())
            throw MetricError("no just-after-training score for " + r->evaluated_task +
                              " (" + r->algorithm + ")");
        const double mean = grouped.at(key_of(*r)).mean();
        alg.forgetting[r->evaluated_task][r->checkpoint_after_task] = {
            forgetting(it->second.raw, mean, baseline_of(r->evaluated_task)), mean};
    }

    return report;
}

}  // namespace mmcl
