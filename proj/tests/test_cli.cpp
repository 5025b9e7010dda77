#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mmcl/ledger.hpp"
#include "mmcl/tasks.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kBin = MMCL_BIN;

fs::path work_root() {
    static fs::path root = [] {
        auto dir = fs::temp_directory_path() / "mmcl_cli_tests";
        fs::remove_all(dir);
        fs::create_directories(dir);
        return dir;
    }();
    return root;
}

int run(const std::string& args, const fs::path& log = {}) {
    std::string cmd = kBin + " " + args;
    if (!log.empty()) cmd += " > " + log.string() + " 2>&1";
    else cmd += " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Shared small stream; generated once, reused by the heavier cases below.
fs::path tasks_dir() {
    static fs::path dir = [] {
        fs::path d = work_root() / "tasks";
        REQUIRE(run("gen-tasks --out " + d.string() + " --seed 3 --size-scale 0.1") == 0);
        return d;
    }();
    return dir;
}

}  // namespace

TEST_CASE("gen-tasks writes the full stream") {
    fs::path log = work_root() / "gen.log";
    fs::path dir = work_root() / "gen_out";
    REQUIRE(run("gen-tasks --out " + dir.string() + " --seed 5 --size-scale 0.1",
                log) == 0);
    CHECK(slurp(log).find("wrote 8 tasks") != std::string::npos);
    for (const char* id : {"t1", "t2", "t3", "t4", "v1", "v2", "l1", "l2"})
        CHECK(fs::exists(dir / (std::string(id) + ".meta")));
    auto stream = mmcl::load_stream(dir.string());
    CHECK(stream.vl_tasks.size() == 4);
    CHECK(stream.v_tasks.size() == 2);
    CHECK(stream.l_tasks.size() == 2);
}

TEST_CASE("usage errors exit with code 2") {
    CHECK(run("upstream --out " + (work_root() / "nope").string()) == 2);
    CHECK(run("direct-ft --tasks " + tasks_dir().string()) == 2);
    CHECK(run("no-such-command") == 2);
    CHECK(run("downstream --tasks " + tasks_dir().string() + " --out " +
              (work_root() / "d0").string() + " --lowshot-mode bogus") == 2);
}

TEST_CASE("corrupt artifacts exit with code 3, missing data with 4") {
    fs::path dir = work_root() / "corrupt";
    fs::create_directories(dir);
    std::ofstream(dir / "ckpt_after_t1.bin", std::ios::binary) << "not a checkpoint";
    CHECK(run("upstream --tasks " + tasks_dir().string() + " --out " + dir.string() +
              " --epochs 1") == 3);
    CHECK(run("report --scores " + (dir / "missing.csv").string() + " --tasks " +
              tasks_dir().string() + " --out " + (dir / "rep").string()) == 4);
}

TEST_CASE("upstream run, determinism and resume") {
    const std::string common = " --tasks " + tasks_dir().string() +
                               " --epochs 1 --seed 1 --learning-rate 0.001";
    fs::path a = work_root() / "run_a";
    fs::path b = work_root() / "run_b";
    REQUIRE(run("upstream --out " + a.string() + common) == 0);
    REQUIRE(run("upstream --out " + b.string() + common) == 0);

    // same configuration, separate processes: identical logs and checkpoints
    CHECK(slurp(a / "scores.csv") == slurp(b / "scores.csv"));
    CHECK(slurp(a / "ckpt_after_t4.bin") == slurp(b / "ckpt_after_t4.bin"));

    auto rows = mmcl::read_score_log((a / "scores.csv").string());
    CHECK(rows.size() == 10);  // 1 + 2 + 3 + 4 revisit evaluations
    CHECK(rows.front().evaluated_task == "t1");
    CHECK(rows.front().checkpoint_after_task == "t1");
    CHECK(rows.back().evaluated_task == "t4");
    CHECK(rows.back().checkpoint_after_task == "t4");
    for (const auto& r : rows) CHECK(r.regime == "upstream");
    CHECK(fs::exists(a / "manifest.meta"));

    // a completed run is a no-op to rerun
    REQUIRE(run("upstream --out " + a.string() + common) == 0);
    CHECK(mmcl::read_score_log((a / "scores.csv").string()).size() == 10);

    // resuming from the first checkpoint reproduces the same final weights
    fs::path c = work_root() / "run_c";
    fs::create_directories(c);
    fs::copy_file(a / "ckpt_after_t1.bin", c / "ckpt_after_t1.bin");
    REQUIRE(run("upstream --out " + c.string() + common) == 0);
    CHECK(slurp(c / "ckpt_after_t4.bin") == slurp(a / "ckpt_after_t4.bin"));
    CHECK(mmcl::read_score_log((c / "scores.csv").string()).size() == 9);
}

TEST_CASE("direct baselines, downstream low-shot and report") {
    const std::string common =
        " --tasks " + tasks_dir().string() + " --epochs 1 --seed 1 --learning-rate 0.001";
    fs::path a = work_root() / "run_a";  // reused from the previous case when present
    if (!fs::exists(a / "scores.csv"))
        REQUIRE(run("upstream --out " + a.string() + common) == 0);

    fs::path d = work_root() / "direct";
    REQUIRE(run("direct-ft --out " + d.string() + common) == 0);
    auto direct_rows = mmcl::read_score_log((d / "scores.csv").string());
    CHECK(direct_rows.size() == 4);
    for (const auto& r : direct_rows) {
        CHECK(r.regime == "direct");
        CHECK(r.algorithm == "direct");
    }

    fs::path ls = work_root() / "lowshot";
    REQUIRE(run("downstream --out " + ls.string() + common +
                " --per-class 2") == 0);
    auto ls_rows = mmcl::read_score_log((ls / "scores.csv").string());
    CHECK(ls_rows.size() == 4);  // two vision-only plus two language-only tasks
    for (const auto& r : ls_rows) CHECK(r.regime == "lowshot_direct");

    fs::path ck = work_root() / "lowshot_ck";
    REQUIRE(run("downstream --out " + ck.string() + common + " --per-class 2" +
                " --checkpoint " + (a / "ckpt_after_t2.bin").string()) == 0);
    auto ck_rows = mmcl::read_score_log((ck / "scores.csv").string());
    CHECK(ck_rows.size() == 4);
    for (const auto& r : ck_rows) {
        CHECK(r.regime == "lowshot");
        CHECK(r.algorithm == "seq_ft");
        CHECK(r.checkpoint_after_task == "t2");
    }

    // Report over controlled score logs: short toy runs can land exactly on a
    // random baseline, which the report stage rejects by design, so feed it
    // logs with known, well-separated values instead.
    fs::path logs = work_root() / "report_logs";
    fs::create_directories(logs);
    auto mk = [](const std::string& alg, const std::string& task, const std::string& ck,
                 const std::string& regime, double score) {
        mmcl::ScoreRecord r;
        r.experiment_id = "rep";
        r.algorithm = alg;
        r.evaluated_task = task;
        r.checkpoint_after_task = ck;
        r.regime = regime;
        r.seed = 1;
        r.score_metric = "accuracy";
        r.score = score;
        return r;
    };
    const char* order[4] = {"t1", "t2", "t3", "t4"};
    std::vector<mmcl::ScoreRecord> direct_log, upstream_log;
    for (int i = 0; i < 4; ++i) {
        direct_log.push_back(mk("direct", order[i], order[i], "direct", 60.0 + i));
        for (int j = i; j < 4; ++j)
            upstream_log.push_back(
                mk("seq_ft", order[i], order[j], "upstream", 58.0 + i - j));
    }
    mmcl::append_scores((logs / "direct.csv").string(), direct_log);
    mmcl::append_scores((logs / "upstream.csv").string(), upstream_log);

    fs::path rep = work_root() / "report";
    REQUIRE(run("report --scores " + (logs / "upstream.csv").string() + " " +
                (logs / "direct.csv").string() + " --tasks " + tasks_dir().string() +
                " --out " + rep.string()) == 0);
    for (const char* f : {"knowledge_transfer.csv", "forgetting.csv", "summary.txt"})
        CHECK(fs::exists(rep / f));
    auto kt = mmcl::read_csv((rep / "knowledge_transfer.csv").string());
    CHECK(kt.size() == 5);  // header + one row per upstream task
}
