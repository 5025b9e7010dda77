// mmcl: generate benchmark task streams, run upstream continual learning,
// direct fine-tuning baselines and downstream low-shot transfer, and compile
// metric reports from the score logs.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 artifact mismatch
// (bad checkpoint / score log), 4 incomplete or degenerate data.

#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "mmcl/algorithms.hpp"
#include "mmcl/ledger.hpp"
#include "mmcl/metrics.hpp"
#include "mmcl/model.hpp"
#include "mmcl/tasks.hpp"
#include "mmcl/textcfg.hpp"

namespace fs = std::filesystem;
using namespace mmcl;

namespace {

struct RunOptions {
    std::string manifest;
    std::string tasks_dir;
    std::string out_dir;
    std::string algorithm = "seq_ft";
    std::string experiment_id;
    std::uint64_t seed = 0;
    std::size_t batch_size = 32;
    std::size_t epochs = 3;
    double learning_rate = 1e-3;
    double weight_decay = 1e-2;
    // algorithm knobs
    std::size_t k_frozen = 0;
    std::size_t replay_every = 100;
    double replay_fraction = 0.01;
    double ewc_lambda = 100.0;
    double ewc_sample_fraction = 0.01;
    std::size_t adapter_reduction = 16;
    // low-shot
    std::string lowshot_mode = "per_class";
    std::size_t per_class = 16;
    double fraction = 0.05;
};

void add_common_flags(CLI::App* cmd, RunOptions& o, bool with_algorithm) {
    cmd->add_option("--manifest", o.manifest, "load options from a run manifest");
    cmd->add_option("--tasks", o.tasks_dir, "task stream directory");
    cmd->add_option("--out", o.out_dir, "output directory");
    cmd->add_option("--experiment-id", o.experiment_id, "experiment identifier");
    cmd->add_option("--seed", o.seed, "run seed");
    cmd->add_option("--batch-size", o.batch_size, "minibatch size");
    cmd->add_option("--epochs", o.epochs, "epochs per task");
    cmd->add_option("--learning-rate", o.learning_rate, "AdamW learning rate");
    cmd->add_option("--weight-decay", o.weight_decay, "AdamW weight decay");
    if (with_algorithm) {
        cmd->add_option("--algorithm", o.algorithm,
                        "seq_ft | frozen_encoder | frozen_bottom_k | er | ewc | adapters");
        cmd->add_option("--k-frozen", o.k_frozen, "frozen bottom layers (0 = 3/4 of stack)");
        cmd->add_option("--replay-every", o.replay_every, "primary steps between replays");
        cmd->add_option("--replay-fraction", o.replay_fraction, "buffer fraction per task");
        cmd->add_option("--ewc-lambda", o.ewc_lambda, "EWC penalty strength");
        cmd->add_option("--ewc-sample-fraction", o.ewc_sample_fraction,
                        "train fraction for the Fisher estimate");
        cmd->add_option("--adapter-reduction", o.adapter_reduction,
                        "adapter bottleneck reduction factor");
    }
}

void apply_manifest(RunOptions& o) {
    if (o.manifest.empty()) return;
    TextConfig m = TextConfig::load(o.manifest);
    auto str = [&](const char* k, std::string& v) {
        if (m.has("run", k)) v = m.get("run", k);
    };
    auto num = [&](const char* k, auto& v) {
        if (m.has("run", k)) v = static_cast<std::decay_t<decltype(v)>>(m.get_double("run", k));
    };
    str("tasks", o.tasks_dir);
    str("algorithm", o.algorithm);
    str("experiment_id", o.experiment_id);
    str("lowshot_mode", o.lowshot_mode);
    num("seed", o.seed);
    num("batch_size", o.batch_size);
    num("epochs", o.epochs);
    num("learning_rate", o.learning_rate);
    num("weight_decay", o.weight_decay);
    num("k_frozen", o.k_frozen);
    num("replay_every", o.replay_every);
    num("replay_fraction", o.replay_fraction);
    num("ewc_lambda", o.ewc_lambda);
    num("ewc_sample_fraction", o.ewc_sample_fraction);
    num("adapter_reduction", o.adapter_reduction);
    num("per_class", o.per_class);
    num("fraction", o.fraction);
}

void write_manifest(const RunOptions& o, const std::string& command) {
    TextConfig m;
    m.set("run", "command", command);
    m.set("run", "tasks", o.tasks_dir);
    m.set("run", "algorithm", o.algorithm);
    m.set("run", "experiment_id", o.experiment_id);
    m.set("run", "seed", std::to_string(o.seed));
    m.set("run", "batch_size", std::to_string(o.batch_size));
    m.set("run", "epochs", std::to_string(o.epochs));
    m.set("run", "learning_rate", TextConfig::format_double(o.learning_rate));
    m.set("run", "weight_decay", TextConfig::format_double(o.weight_decay));
    m.set("run", "k_frozen", std::to_string(o.k_frozen));
    m.set("run", "replay_every", std::to_string(o.replay_every));
    m.set("run", "replay_fraction", TextConfig::format_double(o.replay_fraction));
    m.set("run", "ewc_lambda", TextConfig::format_double(o.ewc_lambda));
    m.set("run", "ewc_sample_fraction", TextConfig::format_double(o.ewc_sample_fraction));
    m.set("run", "adapter_reduction", std::to_string(o.adapter_reduction));
    m.set("run", "lowshot_mode", o.lowshot_mode);
    m.set("run", "per_class", std::to_string(o.per_class));
    m.set("run", "fraction", TextConfig::format_double(o.fraction));
    m.save(o.out_dir + "/manifest.meta");
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

EncoderConfig encoder_config_for(const TaskStream& stream) {
    EncoderConfig cfg;
    cfg.feat_dim_a = stream.vl_tasks.empty() ? cfg.feat_dim_a : stream.vl_tasks[0].feat_dim;
    return cfg;
}

AlgorithmConfig algorithm_config_for(const RunOptions& o) {
    AlgorithmConfig alg;
    alg.kind = algorithm_from_name(o.algorithm);
    alg.k_frozen = o.k_frozen;
    alg.replay_every = o.replay_every;
    alg.replay_buffer_fraction = o.replay_fraction;
    alg.ewc_lambda = o.ewc_lambda;
    alg.ewc_sample_fraction = o.ewc_sample_fraction;
    alg.adapter_reduction = o.adapter_reduction;
    return alg;
}

TrainConfig train_config_for(const RunOptions& o) {
    TrainConfig t;
    t.batch_size = o.batch_size;
    t.epochs = o.epochs;
    t.learning_rate = o.learning_rate;
    t.weight_decay = o.weight_decay;
    t.seed = o.seed;
    return t;
}

std::string checkpoint_path(const std::string& out_dir, const std::string& task_id) {
    return out_dir + "/ckpt_after_" + task_id + ".bin";
}

// ---- subcommands ------------------------------------------------------------

int cmd_gen_tasks(const std::string& out_dir, std::uint64_t seed, double shift_severity,
                  double size_scale, const std::string& order_csv) {
    StreamConfig cfg;
    cfg.rng_seed = seed;
    cfg.shift_severity = shift_severity;
    cfg.size_scale = size_scale;
    if (!order_csv.empty()) cfg.upstream_order = TextConfig::split_list(order_csv);
    TaskStream stream = build_default_stream(cfg);
    save_stream(stream, out_dir);
    std::cout << "wrote " << stream.all().size() << " tasks to " << out_dir << "\n";
    return 0;
}

int cmd_upstream(RunOptions o) {
    apply_manifest(o);
    require(!o.tasks_dir.empty(), "--tasks is required");
    require(!o.out_dir.empty(), "--out is required");
    if (o.experiment_id.empty()) o.experiment_id = "upstream-" + o.algorithm;
    fs::create_directories(o.out_dir);
    write_manifest(o, "upstream");

    TaskStream stream = load_stream(o.tasks_dir);
    const AlgorithmConfig alg = algorithm_config_for(o);
    const TrainConfig train = train_config_for(o);
    const bool adapters = alg.kind == AlgorithmKind::Adapters;

    std::vector<const TaskSpec*> order;
    for (const auto& id : stream.config.upstream_order) order.push_back(&stream.find(id));
    require(!order.empty(), "task stream has an empty upstream order");

    // Resume from the longest prefix of existing checkpoints.
    std::size_t done = 0;
    while (done < order.size() &&
           fs::exists(checkpoint_path(o.out_dir, order[done]->task_id)))
        ++done;

    Model model = done == 0
                      ? Model(encoder_config_for(stream), o.seed)
                      : load_checkpoint(checkpoint_path(o.out_dir, order[done - 1]->task_id));
    if (!model.has_mean_token_a()) model.set_mean_token_a(stream.mean_token_a);

    TrainState state;
    std::map<std::string, const TaskSpec*> lookup;
    for (std::size_t i = 0; i < done; ++i) {
        const TaskSpec* t = order[i];
        state.tasks_trained.push_back(t->task_id);
        lookup[t->task_id] = t;
        if (alg.kind == AlgorithmKind::ER)
            state.replay.cache(*t, alg.replay_buffer_fraction, o.seed);
        if (alg.kind == AlgorithmKind::EWC) {
            Model snapshot = load_checkpoint(checkpoint_path(o.out_dir, t->task_id));
            state.fishers.push_back(ewc_estimate_fisher(snapshot, *t,
                                                        alg.ewc_sample_fraction, o.seed));
        }
    }

    const std::string score_path = o.out_dir + "/scores.csv";
    for (std::size_t i = done; i < order.size(); ++i) {
        const TaskSpec& task = *order[i];
        TrainStats stats = train_task(model, state, task, alg, train, lookup);
        lookup[task.task_id] = &task;
        std::cout << "trained " << task.task_id << " (" << stats.primary_steps
                  << " steps, " << stats.replay_steps << " replays, trained fraction "
                  << stats.trained_fraction << ")\n";
        save_checkpoint(model, checkpoint_path(o.out_dir, task.task_id),
                        {{"experiment_id", o.experiment_id},
                         {"algorithm", o.algorithm},
                         {"after_task", task.task_id},
                         {"seed", std::to_string(o.seed)}});
        // revisit every task trained so far
        std::vector<ScoreRecord> batch;
        for (std::size_t j = 0; j <= i; ++j) {
            const TaskSpec& prev = *order[j];
            ScoreRecord r;
            r.experiment_id = o.experiment_id;
            r.algorithm = o.algorithm;
            r.evaluated_task = prev.task_id;
            r.checkpoint_after_task = task.task_id;
            r.regime = "upstream";
            r.seed = o.seed;
            r.score_metric = score_metric_name(prev.score_metric);
            r.score = evaluate(model, prev, adapters && model.has_adapters(prev.task_id));
            batch.push_back(r);
        }
        append_scores(score_path, batch);
    }
    std::cout << "score log: " << score_path << "\n";
    return 0;
}

int cmd_direct_ft(RunOptions o) {
    apply_manifest(o);
    require(!o.tasks_dir.empty(), "--tasks is required");
    require(!o.out_dir.empty(), "--out is required");
    o.algorithm = "seq_ft";
    if (o.experiment_id.empty()) o.experiment_id = "direct-ft";
    fs::create_directories(o.out_dir);
    write_manifest(o, "direct-ft");

    TaskStream stream = load_stream(o.tasks_dir);
    const TrainConfig train = train_config_for(o);
    const std::string score_path = o.out_dir + "/scores.csv";
    AlgorithmConfig alg;  // plain sequential fine-tuning, one task per model

    for (const auto& id : stream.config.upstream_order) {
        const TaskSpec& task = stream.find(id);
        Model model(encoder_config_for(stream), o.seed);
        model.set_mean_token_a(stream.mean_token_a);
        TrainState state;
        train_task(model, state, task, alg, train, {});
        ScoreRecord r;
        r.experiment_id = o.experiment_id;
        r.algorithm = "direct";
        r.evaluated_task = task.task_id;
        r.checkpoint_after_task = task.task_id;
        r.regime = "direct";
        r.seed = o.seed;
        r.score_metric = score_metric_name(task.score_metric);
        r.score = evaluate(model, task, false);
        append_score(score_path, r);
        std::cout << "direct " << task.task_id << ": " << r.score << "\n";
    }
    std::cout << "score log: " << score_path << "\n";
    return 0;
}

int cmd_downstream(RunOptions o, const std::string& checkpoint) {
    apply_manifest(o);
    require(!o.tasks_dir.empty(), "--tasks is required");
    require(!o.out_dir.empty(), "--out is required");
    fs::create_directories(o.out_dir);
    write_manifest(o, "downstream");

    TaskStream stream = load_stream(o.tasks_dir);
    const TrainConfig train = train_config_for(o);
    LowShotConfig ls;
    if (o.lowshot_mode == "per_class") {
        ls.mode = LowShotConfig::Mode::PerClass;
    } else if (o.lowshot_mode == "fraction") {
        ls.mode = LowShotConfig::Mode::Fraction;
    } else {
        throw ConfigError("lowshot_mode must be per_class or fraction");
    }
    ls.per_class = o.per_class;
    ls.fraction = o.fraction;
    ls.rng_seed = o.seed;

    std::vector<const TaskSpec*> downstream;
    for (const auto& t : stream.v_tasks) downstream.push_back(&t);
    for (const auto& t : stream.l_tasks) downstream.push_back(&t);
    require(!downstream.empty(), "task stream has no downstream tasks");

    const std::string score_path = o.out_dir + "/scores.csv";
    std::vector<ScoreRecord> batch;
    for (const TaskSpec* task : downstream) {
        LowShotConfig task_ls = ls;
        // Multi-label tasks have no per-class notion; fall back to a fraction.
        if (task->kind == TaskKind::MultiLabel) task_ls.mode = LowShotConfig::Mode::Fraction;
        TaskSpec shot = sample_low_shot(*task, task_ls);

        ScoreRecord r;
        r.experiment_id =
            o.experiment_id.empty() ? "downstream-" + o.algorithm : o.experiment_id;
        r.evaluated_task = task->task_id;
        r.seed = o.seed;
        r.score_metric = score_metric_name(task->score_metric);
        if (checkpoint.empty()) {
            Model model(encoder_config_for(stream), o.seed);
            model.set_mean_token_a(stream.mean_token_a);
            r.algorithm = "direct";
            r.checkpoint_after_task = "init";
            r.regime = "lowshot_direct";
            r.score = finetune_low_shot(model, shot, train);
        } else {
            Model model = load_checkpoint(checkpoint);
            TextConfig meta = read_checkpoint_meta(checkpoint);
            r.algorithm = meta.get_or("provenance", "algorithm", o.algorithm);
            r.checkpoint_after_task = meta.get_or("provenance", "after_task", "final");
            r.regime = "lowshot";
            r.score = finetune_low_shot(model, shot, train);
        }
        batch.push_back(r);
        std::cout << r.regime << " " << task->task_id << ": " << r.score << "\n";
    }
    append_scores(score_path, batch);
    std::cout << "score log: " << score_path << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& score_files, const std::string& tasks_dir,
               const std::string& out_dir) {
    require(!score_files.empty(), "at least one --scores file is required");
    require(!tasks_dir.empty(), "--tasks is required");
    require(!out_dir.empty(), "--out is required");
    TaskStream stream = load_stream(tasks_dir);
    std::map<std::string, double> baselines;
    for (const auto* t : stream.all()) baselines[t->task_id] = t->random_baseline;
    std::vector<ScoreRecord> records;
    for (const auto& f : score_files) {
        auto part = read_score_log(f);
        records.insert(records.end(), part.begin(), part.end());
    }
    MetricReport report = build_report(records, baselines);
    write_report(report, out_dir);
    std::cout << "report written to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale dual-modality continual learning benchmark engine"};
    app.require_subcommand(1);

    // gen-tasks
    std::string gen_out;
    std::uint64_t gen_seed = 0;
    double gen_shift = 0.8, gen_scale = 1.0;
    std::string gen_order;
    auto* gen = app.add_subcommand("gen-tasks", "generate a synthetic task stream");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--shift-severity", gen_shift, "domain shift severity in [0,1]");
    gen->add_option("--size-scale", gen_scale, "scales per-class example counts");
    gen->add_option("--order", gen_order, "comma-separated upstream task order");

    RunOptions up_o, direct_o, down_o;
    auto* up = app.add_subcommand("upstream", "continual learning over the upstream tasks");
    add_common_flags(up, up_o, true);
    auto* direct = app.add_subcommand("direct-ft", "single-task fine-tuning baselines");
    add_common_flags(direct, direct_o, false);
    auto* down = app.add_subcommand("downstream", "low-shot transfer to unimodal tasks");
    add_common_flags(down, down_o, true);
    std::string down_ckpt;
    down->add_option("--checkpoint", down_ckpt,
                     "upstream checkpoint to adapt from (omit for the direct baseline)");
    down->add_option("--lowshot-mode", down_o.lowshot_mode, "per_class | fraction");
    down->add_option("--per-class", down_o.per_class, "examples per class");
    down->add_option("--fraction", down_o.fraction, "train fraction");

    std::vector<std::string> rep_scores;
    std::string rep_tasks, rep_out;
    auto* rep = app.add_subcommand("report", "compile metric tables from score logs");
    rep->add_option("--scores", rep_scores, "score log csv files")->expected(-1);
    rep->add_option("--tasks", rep_tasks, "task stream directory");
    rep->add_option("--out", rep_out, "report output directory");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_tasks(gen_out, gen_seed, gen_shift, gen_scale,
                                                gen_order);
        if (up->parsed()) return cmd_upstream(up_o);
        if (direct->parsed()) return cmd_direct_ft(direct_o);
        if (down->parsed()) return cmd_downstream(down_o, down_ckpt);
        if (rep->parsed()) return cmd_report(rep_scores, rep_tasks, rep_out);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const SampleError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const VariantError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const CheckpointError& e) {
        std::cerr << "artifact mismatch: " << e.what() << "\n";
        return 3;
    } catch (const LedgerError& e) {
        std::cerr << "artifact mismatch: " << e.what() << "\n";
        return 3;
    } catch (const MetricError& e) {
        std::cerr << "incomplete data: " << e.what() << "\n";
        return 4;
    } catch (const DegenerateBaseline& e) {
        std::cerr << "incomplete data: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "incomplete data: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
