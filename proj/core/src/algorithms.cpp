#include "mmcl/algorithms.hpp"

#include <algorithm>
#include <cmath>

#include "mmcl/metrics.hpp"

namespace mmcl {

std::string algorithm_name(AlgorithmKind k) {
    switch (k) {
        case AlgorithmKind::SeqFT: return "seq_ft";
        case AlgorithmKind::FrozenEncoder: return "frozen_encoder";
        case AlgorithmKind::FrozenBottomK: return "frozen_bottom_k";
        case AlgorithmKind::ER: return "er";
        case AlgorithmKind::EWC: return "ewc";
        case AlgorithmKind::Adapters: return "adapters";
    }
    return "?";
}

AlgorithmKind algorithm_from_name(const std::string& s) {
    if (s == "seq_ft") return AlgorithmKind::SeqFT;
    if (s == "frozen_encoder") return AlgorithmKind::FrozenEncoder;
    if (s == "frozen_bottom_k") return AlgorithmKind::FrozenBottomK;
    if (s == "er") return AlgorithmKind::ER;
    if (s == "ewc") return AlgorithmKind::EWC;
    if (s == "adapters") return AlgorithmKind::Adapters;
    throw ConfigError("unknown algorithm: " + s);
}

void AlgorithmConfig::validate(const EncoderConfig& cfg) const {
    if (kind == AlgorithmKind::FrozenBottomK && frozen_layers(cfg.num_layers) >= cfg.num_layers)
        throw ConfigError("frozen_bottom_k: k must leave at least one layer trainable");
    if (replay_every == 0) throw ConfigError("replay_every must be > 0");
    if (!(replay_buffer_fraction > 0.0 && replay_buffer_fraction <= 1.0))
        throw ConfigError("replay_buffer_fraction must be in (0, 1]");
    if (!(ewc_sample_fraction > 0.0 && ewc_sample_fraction <= 1.0))
        throw ConfigError("ewc_sample_fraction must be in (0, 1]");
    if (ewc_lambda < 0.0) throw ConfigError("ewc_lambda must be >= 0");
    if (adapter_reduction == 0 || cfg.embed_dim % adapter_reduction != 0)
        throw ConfigError("adapter_reduction must divide embed_dim");
}

// ---- replay buffer ------------------------------------------------------------

bool ReplayBuffer::has_task(const std::string& task_id) const {
    return std::find(tasks_cached.begin(), tasks_cached.end(), task_id) !=
           tasks_cached.end();
}

std::size_t ReplayBuffer::cache_size(std::size_t train_size, double fraction) {
    return static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(train_size)));
}

void ReplayBuffer::cache(const TaskSpec& task, double fraction, std::uint64_t seed) {
    if (has_task(task.task_id))
        throw StateError("replay buffer already holds task " + task.task_id);
    const std::size_t n = cache_size(task.train.size(), fraction);
    Rng rng = Rng::derive(seed, "er-cache:" + task.task_id);
    for (auto i : rng.sample_without_replacement(task.train.size(), n))
        entries.push_back({task.task_id, task.train.examples[i]});
    tasks_cached.push_back(task.task_id);
}

// ---- batches and forward ------------------------------------------------------------

PreparedBatch prepare_batch(const TaskSpec& task, const Dataset& data,
                            const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ShapeError("prepare_batch: empty index list");
    PreparedBatch out;
    out.logical_batch = indices.size();
    const Example& first = data.examples.at(indices[0]);
    const std::size_t n_a = first.a.size() / task.feat_dim;

    if (task.kind == TaskKind::MultiChoice) {
        out.k = first.candidates.size();
        if (out.k < 2) throw ShapeError("prepare_batch: multi-choice example without candidates");
        const std::size_t row_b = first.b.size() + 1 + task.candidate_len;
        out.inputs.batch = indices.size() * out.k;
        out.inputs.n_a = n_a;
        out.inputs.n_b = row_b;
        for (auto i : indices) {
            const Example& ex = data.examples.at(i);
            if (ex.candidates.size() != out.k)
                throw ShapeError("prepare_batch: ragged candidate counts");
            for (std::size_t c = 0; c < out.k; ++c) {
                out.inputs.a.insert(out.inputs.a.end(), ex.a.begin(), ex.a.end());
                out.inputs.b.insert(out.inputs.b.end(), ex.b.begin(), ex.b.end());
                out.inputs.b.push_back(kSepToken);
                out.inputs.b.insert(out.inputs.b.end(), ex.candidates[c].begin(),
                                    ex.candidates[c].end());
            }
            out.targets.push_back(ex.label);
        }
        return out;
    }

    out.inputs.batch = indices.size();
    out.inputs.n_a = n_a;
    out.inputs.n_b = first.b.size();
    for (auto i : indices) {
        const Example& ex = data.examples.at(i);
        if (ex.a.size() != n_a * task.feat_dim || ex.b.size() != out.inputs.n_b)
            throw ShapeError("prepare_batch: ragged example sizes");
        out.inputs.a.insert(out.inputs.a.end(), ex.a.begin(), ex.a.end());
        out.inputs.b.insert(out.inputs.b.end(), ex.b.begin(), ex.b.end());
        if (task.kind == TaskKind::MultiLabel) {
            std::vector<float> hot(task.num_classes, 0.0f);
            for (auto c : ex.label_set) hot.at(c) = 1.0f;
            out.multi_hot.insert(out.multi_hot.end(), hot.begin(), hot.end());
        } else {
            out.targets.push_back(ex.label);
        }
    }
    return out;
}

Graph<float>::Ref forward_task(Graph<float>& g, Model& model, const TaskSpec& task,
                               const PreparedBatch& batch, bool adapters_enabled) {
    auto logits = model.forward_logits(g, batch.inputs, task.task_id, adapters_enabled);
    if (task.kind == TaskKind::MultiChoice)
        logits = g.reshape(logits, Shape{batch.logical_batch, batch.k});
    return logits;
}

Graph<float>::Ref batch_loss(Graph<float>& g, Model& model, const TaskSpec& task,
                             const PreparedBatch& batch, bool adapters_enabled) {
    auto logits = forward_task(g, model, task, batch, adapters_enabled);
    if (task.kind == TaskKind::MultiLabel) return g.sigmoid_bce(logits, batch.multi_hot);
    return g.softmax_cross_entropy(logits, batch.targets);
}

// ---- evaluation ------------------------------------------------------------

std::vector<float> evaluate_logits(Model& model, const TaskSpec& task, bool adapters_enabled,
                                   std::size_t batch_size) {
    std::vector<float> out;
    const std::size_t n = task.val.size();
    for (std::size_t start = 0; start < n; start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n, start + batch_size); ++i)
            idx.push_back(i);
        PreparedBatch pb = prepare_batch(task, task.val, idx);
        Graph<float> g;
        auto logits = forward_task(g, model, task, pb, adapters_enabled);
        const auto& v = g.value(logits);
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

double evaluate(Model& model, const TaskSpec& task, bool adapters_enabled,
                std::size_t batch_size) {
    const std::vector<float> logits = evaluate_logits(model, task, adapters_enabled,
                                                      batch_size);
    const std::size_t n = task.val.size();
    const std::size_t width = logits.size() / n;
    if (task.score_metric == ScoreMetricKind::MicroF1) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<bool> truth(width, false);
            for (auto c : task.val.examples[i].label_set) truth.at(c) = true;
            for (std::size_t c = 0; c < width; ++c) {
                const bool pred = logits[i * width + c] > 0.0f;
                tp += pred && truth[c];
                fp += pred && !truth[c];
                fn += !pred && truth[c];
            }
        }
        return micro_f1_percent(tp, fp, fn);
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < width; ++c)
            if (logits[i * width + c] > logits[i * width + best]) best = c;
        correct += best == task.val.examples[i].label;
    }
    return accuracy_percent(correct, n);
}

// ---- freezing ------------------------------------------------------------

double configure_freezing(Model& model, const AlgorithmConfig& alg,
                          const std::string& current_task) {
    if (!model.has_head(current_task))
        throw HeadError("configure_freezing: no head for " + current_task);
    model.set_trainable_all(true);
    for (const auto& [t, info] : model.heads())
        if (t != current_task) model.set_trainable_prefix(Model::head_prefix(t), false);
    for (const auto& [t, r] : model.adapters())
        if (alg.kind != AlgorithmKind::Adapters || t != current_task)
            model.set_trainable_prefix("adapter." + t + ".", false);

    const auto freeze_shared = [&] {
        for (const char* p : {"embed.", "pos.", "layer.", "final_ln."})
            model.set_trainable_prefix(p, false);
    };
    switch (alg.kind) {
        case AlgorithmKind::FrozenEncoder:
        case AlgorithmKind::Adapters: freeze_shared(); break;
        case AlgorithmKind::FrozenBottomK: {
            model.set_trainable_prefix("embed.", false);
            model.set_trainable_prefix("pos.", false);
            const std::size_t k = alg.frozen_layers(model.config().num_layers);
            for (std::size_t l = 0; l < k; ++l)
                model.set_trainable_prefix(Model::layer_prefix(l), false);
            break;
        }
        case AlgorithmKind::SeqFT:
        case AlgorithmKind::ER:
        case AlgorithmKind::EWC: break;
    }
    return model.trained_fraction();
}

// ---- shared step helper ------------------------------------------------------------

namespace {

void optimizer_step(Model& model, OptimizerState& opt) {
    std::vector<Parameter*> touched;
    for (auto* p : model.parameters())
        if (p->trainable && p->tensor.grad.size() == p->tensor.data.size())
            touched.push_back(p);
    adamw_step(touched, opt);
    // drop any stray gradients (e.g. on frozen parameters: there are none, but
    // keep the tape contract tight)
    for (auto* p : model.parameters()) p->tensor.grad.clear();
}

HeadKind head_kind_for(const TaskSpec& task) {
    switch (task.kind) {
        case TaskKind::Classification: return HeadKind::Classifier;
        case TaskKind::MultiChoice: return HeadKind::ChoiceScorer;
        case TaskKind::MultiLabel: return HeadKind::MultiLabel;
    }
    throw ConfigError("unknown task kind");
}

}  // namespace

// ---- experience replay step ------------------------------------------------------------

void er_replay_step(Model& model, OptimizerState& opt, const ReplayBuffer& buffer,
                    const std::map<std::string, const TaskSpec*>& task_lookup,
                    std::size_t batch_size, Rng& replay_rng, bool adapters_enabled) {
    if (buffer.entries.empty()) throw StateError("replay step on an empty buffer");
    // Sample with replacement, then group by source task so each group runs
    // through its own head.
    std::map<std::string, std::vector<const Example*>> groups;
    std::size_t total = 0;
    for (std::size_t i = 0; i < batch_size; ++i) {
        const ReplayEntry& e = buffer.entries[replay_rng.uniform_index(buffer.entries.size())];
        groups[e.task_id].push_back(&e.example);
        ++total;
    }

    std::vector<std::string> unfrozen;
    for (const auto& [task_id, g] : groups) {
        const std::string prefix = Model::head_prefix(task_id);
        if (!model.param(prefix + "weight").trainable) {
            model.set_trainable_prefix(prefix, true);
            unfrozen.push_back(prefix);
        }
    }

    Graph<float> g;
    Graph<float>::Ref loss = -1;
    for (const auto& [task_id, members] : groups) {
        auto it = task_lookup.find(task_id);
        if (it == task_lookup.end())
            throw StateError("replay step: no task spec for " + task_id);
        Dataset tmp;
        std::vector<std::size_t> idx;
        for (const auto* ex : members) {
            idx.push_back(tmp.examples.size());
            tmp.examples.push_back(*ex);
        }
        PreparedBatch pb = prepare_batch(*it->second, tmp, idx);
        auto part = g.scale(batch_loss(g, model, *it->second, pb, adapters_enabled),
                            static_cast<float>(members.size()) / static_cast<float>(total));
        loss = loss < 0 ? part : g.add_scalars(loss, part);
    }
    g.backward(loss);
    optimizer_step(model, opt);
    for (const auto& prefix : unfrozen) model.set_trainable_prefix(prefix, false);
}

// ---- EWC ------------------------------------------------------------

TaskFisher ewc_estimate_fisher(Model& model, const TaskSpec& task, double sample_fraction,
                               std::uint64_t seed, bool adapters_enabled) {
    TaskFisher out;
    out.task_id = task.task_id;
    const std::size_t n = static_cast<std::size_t>(
        std::ceil(sample_fraction * static_cast<double>(task.train.size())));
    Rng rng = Rng::derive(seed, "ewc-fisher:" + task.task_id);
    const auto indices = rng.sample_without_replacement(task.train.size(), n);

    std::vector<Parameter*> shared;
    for (auto* p : model.shared_parameters())
        if (p->trainable) shared.push_back(p);
    for (auto* p : shared) {
        out.fisher[p->name].assign(p->tensor.size(), 0.0f);
        out.anchor[p->name] = p->tensor.data;
    }

    for (auto i : indices) {
        PreparedBatch pb = prepare_batch(task, task.train, {i});
        Graph<float> g;
        g.backward(batch_loss(g, model, task, pb, adapters_enabled));
        for (auto* p : shared) {
            if (p->tensor.grad.size() != p->tensor.data.size()) continue;
            auto& f = out.fisher[p->name];
            for (std::size_t j = 0; j < f.size(); ++j)
                f[j] += p->tensor.grad[j] * p->tensor.grad[j];
        }
        for (auto* p : model.parameters()) p->tensor.grad.clear();
    }
    for (auto& [name, f] : out.fisher)
        for (auto& v : f) v /= static_cast<float>(n);
    return out;
}

Graph<float>::Ref ewc_penalty(Graph<float>& g, Model& model, const TaskFisher& fisher,
                              double lambda) {
    std::vector<Graph<float>::Ref> theta;
    std::vector<const std::vector<float>*> f, a;
    for (const auto& [name, fv] : fisher.fisher) {
        auto& p = model.param(name);
        theta.push_back(g.param(p));
        f.push_back(&fv);
        a.push_back(&fisher.anchor.at(name));
    }
    return g.quadratic_penalty(theta, f, a, static_cast<float>(lambda));
}

// ---- training ------------------------------------------------------------

TrainStats train_task(Model& model, TrainState& state, const TaskSpec& task,
                      const AlgorithmConfig& alg, const TrainConfig& train,
                      const std::map<std::string, const TaskSpec*>& task_lookup) {
    alg.validate(model.config());
    if (std::find(state.tasks_trained.begin(), state.tasks_trained.end(), task.task_id) !=
        state.tasks_trained.end())
        throw StateError("task already trained: " + task.task_id);

    if (!model.has_head(task.task_id))
        model.add_head(task.task_id, head_kind_for(task), task.num_classes);
    const bool adapters = alg.kind == AlgorithmKind::Adapters;
    if (adapters && !model.has_adapters(task.task_id))
        model.insert_adapters(task.task_id, alg.adapter_reduction);

    TrainStats stats;
    stats.trained_fraction = configure_freezing(model, alg, task.task_id);

    // Fresh optimizer at every task boundary.
    OptimizerState opt;
    opt.learning_rate = train.learning_rate;
    opt.weight_decay = train.weight_decay;

    // Independent named streams: the primary data order never depends on the
    // algorithm, so regularizer-free variants stay on identical trajectories.
    Rng order_rng = Rng::derive(train.seed, "data-order:" + task.task_id);
    Rng replay_rng = Rng::derive(train.seed, "er-replay:" + task.task_id);
    Rng ewc_rng = Rng::derive(train.seed, "ewc-pick:" + task.task_id);

    const bool do_replay = alg.kind == AlgorithmKind::ER && !state.replay.entries.empty();
    const bool do_penalty =
        alg.kind == AlgorithmKind::EWC && alg.ewc_lambda > 0.0 && !state.fishers.empty();

    const std::size_t n = task.train.size();
    for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
        const auto perm = order_rng.permutation(n);
        for (std::size_t start = 0; start < n; start += train.batch_size) {
            std::vector<std::size_t> idx(perm.begin() + start,
                                         perm.begin() +
                                             std::min(n, start + train.batch_size));
            PreparedBatch pb = prepare_batch(task, task.train, idx);
            Graph<float> g;
            auto loss = batch_loss(g, model, task, pb, adapters);
            if (do_penalty) {
                const TaskFisher& tf =
                    state.fishers[ewc_rng.uniform_index(state.fishers.size())];
                loss = g.add_scalars(loss, ewc_penalty(g, model, tf, alg.ewc_lambda));
            }
            g.backward(loss);
            optimizer_step(model, opt);
            ++stats.primary_steps;
            if (do_replay && stats.primary_steps % alg.replay_every == 0) {
                er_replay_step(model, opt, state.replay, task_lookup, train.batch_size,
                               replay_rng, adapters);
                ++stats.replay_steps;
            }
        }
    }

    if (alg.kind == AlgorithmKind::ER)
        state.replay.cache(task, alg.replay_buffer_fraction, train.seed);
    if (alg.kind == AlgorithmKind::EWC)
        state.fishers.push_back(ewc_estimate_fisher(model, task, alg.ewc_sample_fraction,
                                                    train.seed, adapters));
    state.tasks_trained.push_back(task.task_id);
    return stats;
}

double finetune_low_shot(Model& model, const TaskSpec& task, const TrainConfig& train,
                         bool adapters_enabled) {
    if (!model.has_head(task.task_id))
        model.add_head(task.task_id, head_kind_for(task), task.num_classes);
    AlgorithmConfig plain;
    plain.kind = AlgorithmKind::SeqFT;
    configure_freezing(model, plain, task.task_id);

    OptimizerState opt;
    opt.learning_rate = train.learning_rate;
    opt.weight_decay = train.weight_decay;
    Rng order_rng = Rng::derive(train.seed, "lowshot-order:" + task.task_id);
    const std::size_t n = task.train.size();
    if (n == 0) throw StateError("low-shot fine-tuning on an empty train split");
    for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
        const auto perm = order_rng.permutation(n);
        for (std::size_t start = 0; start < n; start += train.batch_size) {
            std::vector<std::size_t> idx(perm.begin() + start,
                                         perm.begin() +
                                             std::min(n, start + train.batch_size));
            PreparedBatch pb = prepare_batch(task, task.train, idx);
            Graph<float> g;
            g.backward(batch_loss(g, model, task, pb, adapters_enabled));
            optimizer_step(model, opt);
        }
    }
    return evaluate(model, task, adapters_enabled);
}

}  // namespace mmcl
