// Microbenchmarks for the hot paths: the encoder forward pass, the full
// forward/backward sweep, one optimizer step and report assembly.

#include <benchmark/benchmark.h>

#include "mmcl/algorithms.hpp"
#include "mmcl/metrics.hpp"
#include "mmcl/model.hpp"
#include "mmcl/optim.hpp"

using namespace mmcl;

namespace {

Batch make_batch(const EncoderConfig& cfg, std::size_t batch) {
    Batch b;
    b.batch = batch;
    b.n_a = cfg.max_tokens_a;
    b.n_b = cfg.max_tokens_b;
    Rng rng(17);
    b.a.resize(batch * b.n_a * cfg.feat_dim_a);
    for (auto& v : b.a) v = static_cast<float>(rng.normal());
    b.b.resize(batch * b.n_b);
    for (auto& v : b.b) v = rng.uniform_index(cfg.vocab_b);
    return b;
}

void bench_forward(benchmark::State& state) {
    EncoderConfig cfg;
    Model m(cfg, 1);
    m.add_head("t", HeadKind::Classifier, 8);
    Batch b = make_batch(cfg, static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        Graph<float> g;
        auto logits = m.forward_logits(g, b, "t");
        benchmark::DoNotOptimize(g.value(logits));
    }
}

void bench_forward_backward(benchmark::State& state) {
    EncoderConfig cfg;
    Model m(cfg, 1);
    m.add_head("t", HeadKind::Classifier, 8);
    Batch b = make_batch(cfg, static_cast<std::size_t>(state.range(0)));
    std::vector<std::size_t> targets(b.batch);
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = i % 8;
    for (auto _ : state) {
        Graph<float> g;
        auto loss = g.softmax_cross_entropy(m.forward_logits(g, b, "t"), targets);
        g.backward(loss);
        benchmark::DoNotOptimize(g.scalar(loss));
        for (auto* p : m.parameters()) p->tensor.grad.clear();
    }
}

void bench_adamw_step(benchmark::State& state) {
    EncoderConfig cfg;
    Model m(cfg, 1);
    auto params = m.parameters();
    Rng rng(2);
    std::vector<std::vector<float>> grads;
    for (auto* p : params) {
        auto& g = grads.emplace_back(p->tensor.data.size());
        for (auto& gv : g) gv = static_cast<float>(rng.normal(0.0, 0.01));
    }
    OptimizerState opt;
    for (auto _ : state) {
        // the step consumes the gradients, so restore them every iteration
        for (std::size_t i = 0; i < params.size(); ++i)
            params[i]->tensor.grad = grads[i];
        adamw_step(params, opt);
        benchmark::DoNotOptimize(opt.step_count);
    }
}

void bench_build_report(benchmark::State& state) {
    std::vector<ScoreRecord> rs;
    std::map<std::string, double> baselines;
    const std::vector<std::string> order{"t1", "t2", "t3", "t4"};
    for (std::size_t i = 0; i < order.size(); ++i) baselines[order[i]] = 10.0 + 5.0 * i;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            ScoreRecord r;
            r.experiment_id = "bench";
            r.evaluated_task = order[i];
            r.seed = seed;
            r.score_metric = "accuracy";
            r.algorithm = "direct";
            r.checkpoint_after_task = order[i];
            r.regime = "direct";
            r.score = 70.0 + static_cast<double>(i) + 0.1 * static_cast<double>(seed);
            rs.push_back(r);
            for (const char* alg : {"seq_ft", "er", "ewc", "adapters"}) {
                r.algorithm = alg;
                r.regime = "upstream";
                for (std::size_t j = i; j < order.size(); ++j) {
                    r.checkpoint_after_task = order[j];
                    r.score = 65.0 - static_cast<double>(j - i) +
                              0.1 * static_cast<double>(seed);
                    rs.push_back(r);
                }
            }
        }
    }
    for (auto _ : state) {
        auto report = build_report(rs, baselines);
        benchmark::DoNotOptimize(report.num_seeds);
    }
}

BENCHMARK(bench_forward)->Arg(1)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(bench_forward_backward)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(bench_adamw_step)->Unit(benchmark::kMicrosecond);
BENCHMARK(bench_build_report)->Unit(benchmark::kMicrosecond);

}  // namespace
