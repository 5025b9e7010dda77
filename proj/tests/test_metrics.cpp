#include <string>
#include <vector>

#include "doctest.h"
#include "mmcl/metrics.hpp"
#include "oracle_fixtures.hpp"

using namespace mmcl;

namespace {

const std::string kTaskIds[4] = {"task1", "task2", "task3", "task4"};

std::map<std::string, double> baselines() {
    std::map<std::string, double> out;
    for (int i = 0; i < 4; ++i) out[kTaskIds[i]] = oracles::kRandom[i];
    return out;
}

ScoreRecord rec(const std::string& alg, const std::string& task, const std::string& ckpt,
                const std::string& regime, std::uint64_t seed, double score) {
    ScoreRecord r;
    r.experiment_id = "x";
    r.algorithm = alg;
    r.evaluated_task = task;
    r.checkpoint_after_task = ckpt;
    r.regime = regime;
    r.seed = seed;
    r.score_metric = "accuracy";
    r.score = score;
    return r;
}

}  // namespace

TEST_CASE("scalar metric primitives") {
    CHECK(accuracy_percent(3, 4) == doctest::Approx(75.0));
    CHECK_THROWS_AS(accuracy_percent(0, 0), MetricError);
    CHECK(micro_f1_percent(4, 2, 2) == doctest::Approx(200.0 * 4 / 12));
    CHECK_THROWS_AS(micro_f1_percent(0, 0, 0), MetricError);
    CHECK(relative_gain(60.0, 50.0, 25.0) == doctest::Approx(40.0));
    CHECK_THROWS_AS(relative_gain(60.0, 25.0, 25.0), DegenerateBaseline);
    CHECK(forgetting(80.0, 60.0, 50.0) == doctest::Approx(200.0 / 3));
    CHECK(forgetting(80.0, 80.0, 50.0) == doctest::Approx(0.0));
    CHECK_THROWS_AS(forgetting(50.0, 40.0, 50.0), DegenerateBaseline);
    // forgetting is signed: improvement on an old task is negative
    CHECK(forgetting(70.0, 75.0, 50.0) < 0.0);
}

TEST_CASE("knowledge transfer fixture table") {
    for (const auto& row : oracles::kKnowledgeTransfer) {
        const double v = knowledge_transfer(row.raw, oracles::kDirect[row.task],
                                            oracles::kRandom[row.task]);
        INFO(row.algorithm << " task " << row.task);
        CHECK(std::abs(oracles::round2(v) - row.expected) <= row.tol + 1e-9);
    }
}

TEST_CASE("forgetting fixture table") {
    for (const auto& row : oracles::kForgetting) {
        const double v = forgetting(row.just_after, row.raw, oracles::kRandom[row.task]);
        INFO(row.algorithm << " task " << row.task << " after " << row.checkpoint);
        CHECK(std::abs(oracles::round2(v) - row.expected) <= row.tol + 1e-9);
    }
}

TEST_CASE("low-shot transfer fixture table") {
    for (const auto& row : oracles::kLowShot) {
        const double v = low_shot_transfer(row.raw, oracles::kDirectLowShot[row.task],
                                           oracles::kRandom[row.task]);
        INFO(row.algorithm << " task " << row.task << " after " << row.checkpoint);
        CHECK(std::abs(oracles::round2(v) - row.expected) <= row.tol + 1e-9);
    }
}

TEST_CASE("build_report averages seeds before computing metrics") {
    std::vector<ScoreRecord> rs;
    // direct baseline for task1: mean 60
    rs.push_back(rec("direct", "task1", "task1", "direct", 1, 58.0));
    rs.push_back(rec("direct", "task1", "task1", "direct", 2, 62.0));
    // seq_ft just-after task1: mean 66
    rs.push_back(rec("seq_ft", "task1", "task1", "upstream", 1, 63.0));
    rs.push_back(rec("seq_ft", "task1", "task1", "upstream", 2, 69.0));
    // seq_ft task1 after task2: mean 48
    rs.push_back(rec("seq_ft", "task1", "task2", "upstream", 1, 50.0));
    rs.push_back(rec("seq_ft", "task1", "task2", "upstream", 2, 46.0));

    auto report = build_report(rs, {{"task1", 30.0}, {"task2", 50.0}});
    CHECK(report.num_seeds == 2);
    CHECK(report.task_order == std::vector<std::string>{"task1"});
    CHECK(report.direct_scores.at("task1") == doctest::Approx(60.0));
    // metric of the means, not the mean of per-seed metrics
    const auto& alg = report.algorithms.at("seq_ft");
    CHECK(alg.knowledge_transfer.at("task1").value ==
          doctest::Approx(100.0 * (66.0 - 60.0) / (60.0 - 30.0)));
    CHECK(alg.knowledge_transfer.at("task1").raw == doctest::Approx(66.0));
    CHECK(alg.forgetting.at("task1").at("task2").value ==
          doctest::Approx(100.0 * (66.0 - 48.0) / (66.0 - 30.0)));
    // sample standard deviation (n - 1)
    CHECK(alg.raw_std.at("task1") == doctest::Approx(std::sqrt(18.0)));
    CHECK(report.direct_std.at("task1") == doctest::Approx(std::sqrt(8.0)));
}

TEST_CASE("build_report low-shot path") {
    std::vector<ScoreRecord> rs;
    rs.push_back(rec("direct", "task2", "task2", "lowshot_direct", 1, 62.0));
    rs.push_back(rec("seq_ft", "task2", "task1", "lowshot", 1, 59.0));
    auto report = build_report(rs, baselines());
    CHECK(report.lowshot_direct_scores.at("task2") == doctest::Approx(62.0));
    CHECK(report.algorithms.at("seq_ft").low_shot.at("task2").at("task1").value ==
          doctest::Approx(100.0 * (59.0 - 62.0) / (62.0 - 50.0)));
}

TEST_CASE("build_report error paths") {
    // duplicate seed in one group
    std::vector<ScoreRecord> dup;
    dup.push_back(rec("direct", "task1", "task1", "direct", 1, 58.0));
    dup.push_back(rec("direct", "task1", "task1", "direct", 1, 59.0));
    CHECK_THROWS_AS(build_report(dup, baselines()), MetricError);

    // incomplete seed coverage across groups
    std::vector<ScoreRecord> sparse;
    sparse.push_back(rec("direct", "task1", "task1", "direct", 1, 58.0));
    sparse.push_back(rec("direct", "task1", "task1", "direct", 2, 59.0));
    sparse.push_back(rec("seq_ft", "task1", "task1", "upstream", 1, 60.0));
    CHECK_THROWS_AS(build_report(sparse, baselines()), MetricError);

    // upstream metric without its direct baseline
    std::vector<ScoreRecord> nobase;
    nobase.push_back(rec("seq_ft", "task1", "task1", "upstream", 1, 60.0));
    CHECK_THROWS_AS(build_report(nobase, baselines()), MetricError);

    // forgetting cell without the just-after score
    std::vector<ScoreRecord> nojust;
    nojust.push_back(rec("direct", "task1", "task1", "direct", 1, 58.0));
    nojust.push_back(rec("seq_ft", "task1", "task2", "upstream", 1, 40.0));
    CHECK_THROWS_AS(build_report(nojust, baselines()), MetricError);

    // missing random baseline for an evaluated task
    std::vector<ScoreRecord> nor;
    nor.push_back(rec("direct", "zzz", "zzz", "direct", 1, 58.0));
    nor.push_back(rec("seq_ft", "zzz", "zzz", "upstream", 1, 60.0));
    CHECK_THROWS_AS(build_report(nor, {{"task1", 0.0}}), MetricError);

    // degenerate baseline bubbles up
    std::vector<ScoreRecord> degen;
    degen.push_back(rec("direct", "task2", "task2", "direct", 1, 50.0));
    degen.push_back(rec("seq_ft", "task2", "task2", "upstream", 1, 60.0));
    CHECK_THROWS_AS(build_report(degen, baselines()), DegenerateBaseline);
}
