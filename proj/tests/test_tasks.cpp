#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "mmcl/tasks.hpp"

using namespace mmcl;

namespace {

SyntheticTaskParams base_params(std::size_t classes, std::uint64_t seed,
                                double noise = 0.1) {
    SyntheticTaskParams p;
    p.num_classes = classes;
    p.noise_sigma = noise;
    Rng rng(seed);
    make_prototypes(p, rng);
    return p;
}

bool examples_equal(const Example& a, const Example& b) {
    return a.a == b.a && a.b == b.b && a.label == b.label && a.label_set == b.label_set &&
           a.candidates == b.candidates;
}

double min_a_distance(const SyntheticTaskParams& p) {
    double best = 1e300;
    for (std::size_t i = 0; i < p.proto_a.size(); ++i)
        for (std::size_t j = i + 1; j < p.proto_a.size(); ++j) {
            double acc = 0;
            for (std::size_t d = 0; d < p.feat_dim; ++d) {
                double x = static_cast<double>(p.proto_a[i][d]) - p.proto_a[j][d];
                acc += x * x;
            }
            best = std::min(best, std::sqrt(acc));
        }
    return best;
}

std::filesystem::path temp_dir(const char* tag) {
    auto dir = std::filesystem::temp_directory_path() / (std::string("mmcl_tasks_") + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("prototypes are well separated") {
    auto p = base_params(8, 11, 0.2);
    CHECK(min_a_distance(p) >= std::max(4.0 * 0.2, 0.8));
    for (std::size_t i = 0; i < p.proto_b.size(); ++i)
        for (std::size_t j = i + 1; j < p.proto_b.size(); ++j) {
            std::size_t ham = 0;
            for (std::size_t t = 0; t < p.n_b_tokens; ++t)
                ham += p.proto_b[i][t] != p.proto_b[j][t];
            CHECK(ham >= (p.n_b_tokens + 1) / 2);
        }
}

TEST_CASE("generate_task: sizes, labels, determinism") {
    auto p = base_params(4, 12);
    p.fusion = FusionRule::SingleModalityA;
    p.examples_per_class = 10;
    p.val_per_class = 3;
    TaskSpec skel;
    skel.task_id = "g";
    Rng r1(5), r2(5);
    auto t1 = generate_task(p, skel, r1);
    auto t2 = generate_task(p, skel, r2);
    CHECK(t1.train.size() == 40);
    CHECK(t1.val.size() == 12);
    CHECK(t1.num_classes == 4);
    CHECK(t1.random_baseline == doctest::Approx(25.0));
    REQUIRE(t1.train.size() == t2.train.size());
    for (std::size_t i = 0; i < t1.train.size(); ++i)
        CHECK(examples_equal(t1.train.examples[i], t2.train.examples[i]));
}

TEST_CASE("generate_task: guard rails") {
    TaskSpec skel;
    Rng rng(6);
    auto p = base_params(4, 13);
    p.noise_sigma = -0.1;
    CHECK_THROWS_AS(generate_task(p, skel, rng), GenerationError);

    p = base_params(4, 13);
    p.num_classes = 5;  // prototype count no longer matches
    CHECK_THROWS_AS(generate_task(p, skel, rng), GenerationError);

    p = base_params(4, 13);
    p.noise_sigma = 10.0;  // pairwise distance < 4 sigma
    CHECK_THROWS_AS(generate_task(p, skel, rng), GenerationError);

    p = base_params(4, 13);
    p.fusion = FusionRule::Xor;  // binary rule needs exactly 2 classes
    CHECK_THROWS_AS(generate_task(p, skel, rng), GenerationError);
}

TEST_CASE("xor task: unsolvable from one modality, solvable from both") {
    auto p = base_params(2, 14);
    p.fusion = FusionRule::Xor;
    p.examples_per_class = 96;
    p.val_per_class = 32;
    TaskSpec skel;
    skel.task_id = "xor";
    Rng rng(7);
    auto task = generate_task(p, skel, rng);  // generation gate already probes
    CHECK(linear_probe_accuracy(task, true, false) <= 65.0);
    CHECK(linear_probe_accuracy(task, false, true) <= 65.0);
    CHECK(mlp_probe_accuracy(task, true, true) >= 80.0);
}

TEST_CASE("nearest-prototype oracle solves a single-modality-A task") {
    auto p = base_params(4, 15, 0.15);
    p.fusion = FusionRule::SingleModalityA;
    p.examples_per_class = 8;
    p.val_per_class = 16;
    TaskSpec skel;
    skel.task_id = "a";
    Rng rng(8);
    auto task = generate_task(p, skel, rng);
    CHECK(nearest_prototype_accuracy(task, p) >= 95.0);
}

TEST_CASE("apply_shift: isometry on A, role permutation on B") {
    auto p = base_params(4, 16);
    const double before = min_a_distance(p);
    Rng rng(9);
    auto s = apply_shift(p, 0.8, rng);
    CHECK(min_a_distance(s) == doctest::Approx(before).epsilon(1e-4));
    bool a_moved = false;
    for (std::size_t d = 0; d < p.feat_dim; ++d)
        if (s.proto_a[0][d] != p.proto_a[0][d]) a_moved = true;
    CHECK(a_moved);

    // Same support token set, but some roles reassigned.
    auto support = [](const SyntheticTaskParams& q) {
        std::set<std::size_t> out;
        for (const auto* g : {&q.proto_b, &q.candidate_b})
            for (const auto& pat : *g)
                for (auto t : pat) out.insert(t);
        return out;
    };
    CHECK(support(p) == support(s));
    std::size_t moved = 0, total = 0;
    for (std::size_t c = 0; c < p.num_classes; ++c)
        for (std::size_t t = 0; t < p.n_b_tokens; ++t, ++total)
            moved += p.proto_b[c][t] != s.proto_b[c][t];
    CHECK(moved > total / 2);

    Rng rng0(9);
    auto id = apply_shift(p, 0.0, rng0);
    CHECK(id.proto_a == p.proto_a);
    CHECK(id.proto_b == p.proto_b);
}

TEST_CASE("multi-choice: one candidate per class, label marks the context class") {
    auto p = base_params(4, 17);
    p.b_subst_prob = 0.0;  // candidates stay exact copies of their patterns
    p.examples_per_class = 6;
    p.val_per_class = 2;
    TaskSpec skel;
    skel.task_id = "mc";
    Rng rng(10);
    auto task = make_multichoice_task(p, 4, skel, rng);
    CHECK(task.kind == TaskKind::MultiChoice);
    CHECK(task.random_baseline == doctest::Approx(25.0));
    std::size_t idx = 0;
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 6; ++i, ++idx) {
            const Example& ex = task.train.examples[idx];
            REQUIRE(ex.candidates.size() == 4);
            std::set<std::vector<std::size_t>> got(ex.candidates.begin(),
                                                   ex.candidates.end());
            std::set<std::vector<std::size_t>> want;
            for (const auto& cand : p.candidate_b) want.insert(cand);
            CHECK(got == want);  // every class appears exactly once
            CHECK(ex.candidates[ex.label] == p.candidate_b[c]);
        }
    CHECK_THROWS_AS(make_multichoice_task(p, 3, skel, rng), GenerationError);

    // Candidate frequencies are balanced, so the context-free oracle is near
    // chance.
    CHECK(candidate_frequency_accuracy(task) <= 45.0);
}

TEST_CASE("multi-label: label sets and empirical baseline") {
    auto p = base_params(8, 18);
    p.examples_per_class = 8;
    p.val_per_class = 4;
    TaskSpec skel;
    skel.task_id = "ml";
    Rng rng(11);
    auto task = make_multilabel_task(p, 8, skel, rng);
    CHECK(task.kind == TaskKind::MultiLabel);
    CHECK(task.score_metric == ScoreMetricKind::MicroF1);
    for (const auto& ex : task.train.examples) {
        CHECK(ex.label_set.size() >= 1);
        CHECK(ex.label_set.size() <= 4);
        CHECK(std::is_sorted(ex.label_set.begin(), ex.label_set.end()));
        for (auto c : ex.label_set) CHECK(c < 8);
    }
    CHECK(task.random_baseline > 0.0);
    CHECK(task.random_baseline < 60.0);
    CHECK(multilabel_prototype_micro_f1(task, p) > task.random_baseline + 20.0);
}

TEST_CASE("unimodal variants") {
    auto p = base_params(3, 19);
    p.fusion = FusionRule::SingleModalityB;
    p.examples_per_class = 4;
    p.val_per_class = 2;
    TaskSpec skel;
    skel.task_id = "b";
    Rng rng(12);
    auto task = generate_task(p, skel, rng);

    std::vector<float> mean(p.feat_dim, 0.25f);
    auto lv = make_unimodal_variant(task, 'B', &mean);
    CHECK(lv.modality == Modality::L);
    for (const auto& ex : lv.train.examples) {
        CHECK(ex.a.size() == task.n_a * p.feat_dim);
        for (float v : ex.a) CHECK(v == 0.25f);
    }
    CHECK_THROWS_AS(make_unimodal_variant(task, 'B', nullptr), StateError);
    CHECK_THROWS_AS(make_unimodal_variant(task, 'A'), VariantError);

    auto pa = base_params(3, 20);
    pa.fusion = FusionRule::SingleModalityA;
    pa.examples_per_class = 4;
    pa.val_per_class = 2;
    Rng rng2(13);
    auto ta = generate_task(pa, skel, rng2);
    auto vv = make_unimodal_variant(ta, 'A');
    CHECK(vv.modality == Modality::V);
    CHECK(vv.n_b == 3);
    for (const auto& ex : vv.val.examples)
        CHECK(ex.b == std::vector<std::size_t>{1, 2, 3});

    auto px = base_params(2, 21);
    px.fusion = FusionRule::Xor;
    px.examples_per_class = 64;
    px.val_per_class = 16;
    Rng rng3(14);
    auto tx = generate_task(px, skel, rng3);
    CHECK_THROWS_AS(make_unimodal_variant(tx, 'A'), VariantError);
    CHECK_THROWS_AS(make_unimodal_variant(tx, 'B', &mean), VariantError);
}

TEST_CASE("low-shot sampling: exact counts, seed-distinct subsets") {
    auto p = base_params(4, 22);
    p.fusion = FusionRule::SingleModalityA;
    p.examples_per_class = 25;
    p.val_per_class = 2;
    TaskSpec skel;
    skel.task_id = "ls";
    Rng rng(15);
    auto task = generate_task(p, skel, rng);
    REQUIRE(task.train.size() == 100);

    LowShotConfig cfg;
    cfg.mode = LowShotConfig::Mode::PerClass;
    cfg.per_class = 5;
    auto shot = sample_low_shot(task, cfg);
    CHECK(shot.train.size() == 20);
    std::vector<std::size_t> counts(4, 0);
    for (const auto& ex : shot.train.examples) counts[ex.label]++;
    for (auto c : counts) CHECK(c == 5);
    CHECK(shot.val.size() == task.val.size());

    cfg.per_class = 26;
    CHECK_THROWS_AS(sample_low_shot(task, cfg), SampleError);

    LowShotConfig fr;
    fr.mode = LowShotConfig::Mode::Fraction;
    fr.fraction = 0.05;
    CHECK(sample_low_shot(task, fr).train.size() == 5);  // round(0.05 * 100)
    fr.fraction = 0.026;
    CHECK(sample_low_shot(task, fr).train.size() == 3);  // round-half-up of 2.6
    fr.fraction = 0.0;
    CHECK_THROWS_AS(sample_low_shot(task, fr), SampleError);

    fr.fraction = 0.1;
    std::set<std::vector<std::size_t>> subsets;
    for (std::uint64_t seed : {1, 2, 3}) {
        fr.rng_seed = seed;
        auto s = sample_low_shot(task, fr);
        std::vector<std::size_t> sig;
        for (const auto& ex : s.train.examples) sig.push_back(ex.b.empty() ? 0 : ex.b[0]);
        std::vector<float> first = s.train.examples[0].a;
        sig.push_back(static_cast<std::size_t>(first[0] * 1e6));
        subsets.insert(sig);
    }
    CHECK(subsets.size() == 3);
}

TEST_CASE("per-class low-shot sampling rejects multi-label tasks") {
    auto p = base_params(4, 23);
    p.examples_per_class = 8;
    p.val_per_class = 2;
    TaskSpec skel;
    Rng rng(16);
    auto task = make_multilabel_task(p, 4, skel, rng);
    LowShotConfig cfg;
    cfg.mode = LowShotConfig::Mode::PerClass;
    CHECK_THROWS_AS(sample_low_shot(task, cfg), SampleError);
}

TEST_CASE("corpus mean token") {
    TaskSpec t;
    t.feat_dim = 2;
    Example e1, e2;
    e1.a = {1.0f, 2.0f, 3.0f, 4.0f};  // two tokens
    e2.a = {5.0f, 6.0f};
    t.train.examples = {e1, e2};
    auto mean = corpus_mean_token({&t}, 2);
    CHECK(mean[0] == doctest::Approx(3.0));
    CHECK(mean[1] == doctest::Approx(4.0));
    TaskSpec empty;
    CHECK_THROWS_AS(corpus_mean_token({&empty}, 2), StateError);
}

TEST_CASE("default stream: shape, order and baselines") {
    StreamConfig cfg;
    cfg.rng_seed = 7;
    cfg.size_scale = 0.25;
    auto stream = build_default_stream(cfg);
    REQUIRE(stream.vl_tasks.size() == 4);
    CHECK(stream.v_tasks.size() == 2);
    CHECK(stream.l_tasks.size() == 2);
    CHECK(stream.config.upstream_order ==
          std::vector<std::string>{"t1", "t2", "t3", "t4"});
    CHECK(stream.vl_tasks[0].num_classes == 32);
    CHECK(stream.vl_tasks[0].random_baseline == doctest::Approx(100.0 / 32));
    CHECK(stream.vl_tasks[1].random_baseline == doctest::Approx(50.0));
    CHECK(stream.vl_tasks[2].random_baseline == doctest::Approx(100.0 / 3));
    CHECK(stream.vl_tasks[3].kind == TaskKind::MultiChoice);
    CHECK(stream.vl_tasks[3].random_baseline == doctest::Approx(25.0));
    CHECK(stream.mean_token_a.size() == stream.vl_tasks[0].feat_dim);
    CHECK(stream.find("l2").modality == Modality::L);
    CHECK_THROWS_AS(stream.find("zzz"), ConfigError);
}

TEST_CASE("task serialization round trip") {
    auto dir = temp_dir("roundtrip");
    auto p = base_params(4, 24);
    p.fusion = FusionRule::SingleModalityA;
    p.examples_per_class = 6;
    p.val_per_class = 2;
    TaskSpec skel;
    skel.task_id = "rt";
    Rng rng(17);
    auto task = generate_task(p, skel, rng);
    save_task(task, dir.string());
    auto loaded = load_task(dir.string(), "rt");
    CHECK(loaded.task_id == task.task_id);
    CHECK(loaded.num_classes == task.num_classes);
    CHECK(loaded.random_baseline == doctest::Approx(task.random_baseline));
    CHECK(loaded.n_a == task.n_a);
    CHECK(loaded.n_b == task.n_b);
    REQUIRE(loaded.train.size() == task.train.size());
    REQUIRE(loaded.val.size() == task.val.size());
    for (std::size_t i = 0; i < task.train.size(); ++i)
        CHECK(examples_equal(loaded.train.examples[i], task.train.examples[i]));
    std::filesystem::remove_all(dir);
}

TEST_CASE("stream serialization round trip") {
    auto dir = temp_dir("stream");
    StreamConfig cfg;
    cfg.rng_seed = 3;
    cfg.size_scale = 0.1;
    auto stream = build_default_stream(cfg);
    save_stream(stream, dir.string());
    auto loaded = load_stream(dir.string());
    CHECK(loaded.vl_tasks.size() == 4);
    CHECK(loaded.v_tasks.size() == 2);
    CHECK(loaded.l_tasks.size() == 2);
    CHECK(loaded.config.upstream_order == stream.config.upstream_order);
    CHECK(loaded.mean_token_a == stream.mean_token_a);
    for (std::size_t k = 0; k < stream.vl_tasks.size(); ++k) {
        const auto& a = stream.vl_tasks[k];
        const auto& b = loaded.vl_tasks[k];
        REQUIRE(a.train.size() == b.train.size());
        for (std::size_t i = 0; i < a.train.size(); ++i)
            CHECK(examples_equal(a.train.examples[i], b.train.examples[i]));
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("multi-choice serialization keeps candidates") {
    auto dir = temp_dir("mc");
    auto p = base_params(4, 25);
    p.examples_per_class = 4;
    p.val_per_class = 2;
    TaskSpec skel;
    skel.task_id = "mcs";
    Rng rng(18);
    auto task = make_multichoice_task(p, 4, skel, rng);
    save_task(task, dir.string());
    auto loaded = load_task(dir.string(), "mcs");
    REQUIRE(loaded.train.size() == task.train.size());
    for (std::size_t i = 0; i < task.train.size(); ++i)
        CHECK(examples_equal(loaded.train.examples[i], task.train.examples[i]));
    std::filesystem::remove_all(dir);
}

TEST_CASE("name round trips for task enums") {
    for (auto m : {Modality::VL, Modality::V, Modality::L})
        CHECK(modality_from_name(modality_name(m)) == m);
    for (auto k : {TaskKind::Classification, TaskKind::MultiChoice, TaskKind::MultiLabel})
        CHECK(task_kind_from_name(task_kind_name(k)) == k);
    for (auto f : {FusionRule::Xor, FusionRule::Conjunction, FusionRule::SingleModalityA,
                   FusionRule::SingleModalityB})
        CHECK(fusion_rule_from_name(fusion_rule_name(f)) == f);
    CHECK_THROWS(modality_from_name("bogus"));
}
