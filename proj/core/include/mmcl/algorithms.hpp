#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmcl/model.hpp"
#include "mmcl/optim.hpp"
#include "mmcl/tasks.hpp"

namespace mmcl {

enum class AlgorithmKind { SeqFT, FrozenEncoder, FrozenBottomK, ER, EWC, Adapters };

std::string algorithm_name(AlgorithmKind k);
AlgorithmKind algorithm_from_name(const std::string& s);

struct AlgorithmConfig {
    AlgorithmKind kind = AlgorithmKind::SeqFT;
    std::size_t k_frozen = 0;              // 0 means floor(0.75 * num_layers)
    double replay_buffer_fraction = 0.01;  // of the task's train size, rounded up
    std::size_t replay_every = 100;        // primary steps between replay steps
    double ewc_lambda = 100.0;
    double ewc_sample_fraction = 0.01;     // train fraction for the Fisher estimate
    std::size_t adapter_reduction = 16;

    std::size_t frozen_layers(std::size_t num_layers) const {
        return k_frozen ? k_frozen : (num_layers * 3) / 4;
    }
    void validate(const EncoderConfig& cfg) const;
};

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t epochs = 3;
    double learning_rate = 1e-4;
    double weight_decay = 1e-2;
    std::uint64_t seed = 0;
};

// ---- experience replay ------------------------------------------------------------

struct ReplayEntry {
    std::string task_id;
    Example example;
};

struct ReplayBuffer {
    std::vector<ReplayEntry> entries;
    std::vector<std::string> tasks_cached;

    bool has_task(const std::string& task_id) const;
    // Stores ceil(fraction * train size) examples drawn without replacement.
    void cache(const TaskSpec& task, double fraction, std::uint64_t seed);
    static std::size_t cache_size(std::size_t train_size, double fraction);
};

// ---- EWC ------------------------------------------------------------

// Diagonal empirical Fisher and weight anchor for the shared parameters as
// they stood right after training one task.
struct TaskFisher {
    std::string task_id;
    std::map<std::string, std::vector<float>> fisher;
    std::map<std::string, std::vector<float>> anchor;
};

TaskFisher ewc_estimate_fisher(Model& model, const TaskSpec& task, double sample_fraction,
                               std::uint64_t seed, bool adapters_enabled = false);

// Adds lambda * sum F (theta - anchor)^2 over the shared trainable parameters
// to the tape; gradient is 2 * lambda * F * (theta - anchor).
Graph<float>::Ref ewc_penalty(Graph<float>& g, Model& model, const TaskFisher& fisher,
                              double lambda);

// ---- batches, forward, evaluation --------------------------------------------------

// Model-ready batch. Multi-choice examples are flattened to one row per
// (example, candidate) pairing: context ids ++ separator ++ candidate ids.
struct PreparedBatch {
    Batch inputs;
    std::vector<std::size_t> targets;  // classification / multi-choice
    std::vector<float> multi_hot;      // multi-label targets, size B * C
    std::size_t logical_batch = 0;
    std::size_t k = 1;  // candidates per example (1 unless multi-choice)
};

PreparedBatch prepare_batch(const TaskSpec& task, const Dataset& data,
                            const std::vector<std::size_t>& indices);

// Task logits on the tape: [B, C] for classification and multi-label,
// [B, k] for multi-choice.
Graph<float>::Ref forward_task(Graph<float>& g, Model& model, const TaskSpec& task,
                               const PreparedBatch& batch, bool adapters_enabled);

Graph<float>::Ref batch_loss(Graph<float>& g, Model& model, const TaskSpec& task,
                             const PreparedBatch& batch, bool adapters_enabled);

// Validation score in the task's own metric (accuracy or micro-F1), percent.
double evaluate(Model& model, const TaskSpec& task, bool adapters_enabled,
                std::size_t batch_size = 64);

// Raw validation logits, row-major [val size, C or k]; used by the
// bit-identity checks.
std::vector<float> evaluate_logits(Model& model, const TaskSpec& task, bool adapters_enabled,
                                   std::size_t batch_size = 64);

// ---- training ------------------------------------------------------------

struct TrainState {
    ReplayBuffer replay;
    std::vector<TaskFisher> fishers;
    std::vector<std::string> tasks_trained;
};

struct TrainStats {
    std::size_t primary_steps = 0;
    std::size_t replay_steps = 0;
    double trained_fraction = 0.0;
};

// Marks parameters frozen/trainable for training `current_task` under the
// algorithm; returns the trained-parameter fraction.
double configure_freezing(Model& model, const AlgorithmConfig& alg,
                          const std::string& current_task);

// One replay step over a buffer sample; the replayed tasks' heads are made
// trainable for this step only.
void er_replay_step(Model& model, OptimizerState& opt, const ReplayBuffer& buffer,
                    const std::map<std::string, const TaskSpec*>& task_lookup,
                    std::size_t batch_size, Rng& replay_rng, bool adapters_enabled);

// Trains one upstream task end to end: registers the head (and adapter set
// for the adapter algorithm), applies the freeze mask, runs the epochs with
// a per-task optimizer, then updates the replay buffer / Fisher store.
// `task_lookup` must cover all previously trained tasks.
TrainStats train_task(Model& model, TrainState& state, const TaskSpec& task,
                      const AlgorithmConfig& alg, const TrainConfig& train,
                      const std::map<std::string, const TaskSpec*>& task_lookup);

// Low-shot adaptation: plain fine-tuning of the shared encoder plus a task
// head on the (already subsampled) train split.
double finetune_low_shot(Model& model, const TaskSpec& task, const TrainConfig& train,
                         bool adapters_enabled = false);

}  // namespace mmcl
