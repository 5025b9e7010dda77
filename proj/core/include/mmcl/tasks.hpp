#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmcl/errors.hpp"
#include "mmcl/rng.hpp"

namespace mmcl {

enum class Modality { VL, V, L };
enum class TaskKind { Classification, MultiChoice, MultiLabel };
enum class ScoreMetricKind { Accuracy, MicroF1 };
enum class FusionRule { Xor, Conjunction, SingleModalityA, SingleModalityB };

std::string modality_name(Modality m);
Modality modality_from_name(const std::string& s);
std::string task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& s);
std::string score_metric_name(ScoreMetricKind m);
ScoreMetricKind score_metric_from_name(const std::string& s);
std::string fusion_rule_name(FusionRule f);
FusionRule fusion_rule_from_name(const std::string& s);

// One labeled example. Modality A is a flat [n_a * feat_dim] feature block,
// modality B a token id sequence. Multi-choice examples carry k candidate
// sequences next to the shared context in `b`; multi-label examples carry a
// class set in `label_set`.
struct Example {
    std::vector<float> a;
    std::vector<std::size_t> b;
    std::size_t label = 0;
    std::vector<std::size_t> label_set;
    std::vector<std::vector<std::size_t>> candidates;
};

struct Dataset {
    std::vector<Example> examples;
    std::size_t size() const { return examples.size(); }
};

struct TaskSpec {
    std::string task_id;
    Modality modality = Modality::VL;
    TaskKind kind = TaskKind::Classification;
    std::size_t num_classes = 2;  // C, or k for multi-choice
    ScoreMetricKind score_metric = ScoreMetricKind::Accuracy;
    double random_baseline = 0.0;  // S_R, percent
    std::size_t feat_dim = 8;      // modality-A feature dim per token
    std::size_t n_a = 0;           // modality-A tokens per example
    std::size_t n_b = 0;           // modality-B tokens per example (context only for MC)
    std::size_t candidate_len = 0;
    FusionRule fusion = FusionRule::SingleModalityA;
    std::size_t a_segments = 1;
    Dataset train;
    Dataset val;
};

// Latent generators for one synthetic task. Class prototypes live in feature
// space for modality A and in token-pattern space for modality B.
struct SyntheticTaskParams {
    std::size_t num_classes = 2;
    std::size_t feat_dim = 8;
    std::size_t n_a_tokens = 16;
    std::size_t n_b_tokens = 8;
    std::size_t candidate_len = 4;
    std::size_t vocab = 64;
    std::vector<std::vector<float>> proto_a;             // [class][feat_dim]
    std::vector<std::vector<std::size_t>> proto_b;       // [class][n_b_tokens]
    std::vector<std::vector<std::size_t>> candidate_b;   // [class][candidate_len], MC only
    double noise_sigma = 0.1;
    double b_subst_prob = 0.05;
    FusionRule fusion = FusionRule::SingleModalityA;
    std::size_t a_segments = 1;
    std::size_t examples_per_class = 64;
    std::size_t val_per_class = 16;
};

struct StreamConfig {
    std::size_t k_vl = 4;
    std::size_t k_v = 2;
    std::size_t k_l = 2;
    std::vector<std::string> upstream_order;  // permutation of VL task ids
    double shift_severity = 0.8;
    std::uint64_t rng_seed = 0;
    double size_scale = 1.0;  // scales examples_per_class across the stream
};

struct LowShotConfig {
    enum class Mode { PerClass, Fraction };
    Mode mode = Mode::PerClass;
    std::size_t per_class = 16;
    double fraction = 0.05;
    std::uint64_t rng_seed = 0;
};

// Fills in random prototypes (and candidate patterns for multi-choice) that
// satisfy the pairwise-separation requirement.
void make_prototypes(SyntheticTaskParams& params, Rng& rng);

// Draws the datasets for one task. Throws GenerationError when prototypes are
// degenerate (pairwise distance < 4 * noise_sigma) or, for xor/conjunction
// rules, when a linear probe can solve the task from one modality alone.
TaskSpec generate_task(const SyntheticTaskParams& params, const TaskSpec& skeleton, Rng& rng,
                       bool validate = true);

TaskSpec make_multichoice_task(const SyntheticTaskParams& params, std::size_t k,
                               const TaskSpec& skeleton, Rng& rng);
TaskSpec make_multilabel_task(const SyntheticTaskParams& params, std::size_t num_classes,
                              const TaskSpec& skeleton, Rng& rng);

// Domain shift: rotates/translates the modality-A prototype space and
// permutes a severity-proportional slice of the modality-B vocabulary.
SyntheticTaskParams apply_shift(const SyntheticTaskParams& base, double severity, Rng& rng);

// Replaces the dropped modality with vacuous input. `mean_token_a` is needed
// when keep == 'B'.
TaskSpec make_unimodal_variant(const TaskSpec& task, char keep,
                               const std::vector<float>* mean_token_a = nullptr);

TaskSpec sample_low_shot(const TaskSpec& task, const LowShotConfig& cfg);

// Mean of all modality-A tokens in the given training sets; the vacuous-image
// analog.
std::vector<float> corpus_mean_token(const std::vector<const TaskSpec*>& tasks,
                                     std::size_t feat_dim);

// The default benchmark stream: 4 dual-modality upstream tasks (large-C
// classification, paired-segment binary, 3-way, shifted 4-choice) plus
// unimodal variants for downstream transfer.
struct TaskStream {
    StreamConfig config;
    std::vector<TaskSpec> vl_tasks;
    std::vector<TaskSpec> v_tasks;
    std::vector<TaskSpec> l_tasks;
    std::vector<float> mean_token_a;

    const TaskSpec& find(const std::string& task_id) const;
    std::vector<const TaskSpec*> all() const;
};

TaskStream build_default_stream(const StreamConfig& cfg);

// ---- data-side oracles ------------------------------------------------------
// Simple fitters independent of the encoder/tape path; used as generation
// gates and as test oracles.

// Multinomial logistic regression on raw features (flattened A and/or
// bag-of-token counts of B), full-batch gradient descent. Returns validation
// accuracy in percent.
double linear_probe_accuracy(const TaskSpec& task, bool use_a, bool use_b,
                             std::size_t epochs = 300, double lr = 0.5);

// One-hidden-layer tanh network on the same features.
double mlp_probe_accuracy(const TaskSpec& task, bool use_a, bool use_b,
                          std::size_t hidden = 32, std::size_t epochs = 400,
                          double lr = 0.3, std::uint64_t seed = 17);

// Assigns each example to the class whose modality-A prototype is nearest to
// the example's mean A token. Only meaningful for single_modality_A tasks.
double nearest_prototype_accuracy(const TaskSpec& task, const SyntheticTaskParams& params);

// Threshold oracle for multi-label tasks: class is predicted present when any
// A token lies within threshold of its prototype. Returns micro-F1 percent.
double multilabel_prototype_micro_f1(const TaskSpec& task, const SyntheticTaskParams& params);

// Picks the candidate whose token sequence was most frequently correct in the
// training split, ignoring the context entirely.
double candidate_frequency_accuracy(const TaskSpec& task);

// Empirical micro-F1 random baseline: random prediction sets matched to the
// label-cardinality prior, scored against the task's validation labels.
double estimate_micro_f1_random_baseline(const TaskSpec& task, std::size_t draws = 10000,
                                         std::uint64_t seed = 1234);

// ---- serialization ------------------------------------------------------------
// <id>.meta (structured text), <id>.{train,val}.a.bin (raw little-endian f32
// feature blob) and <id>.{train,val}.csv (labels and token ids).
void save_task(const TaskSpec& task, const std::string& dir);
TaskSpec load_task(const std::string& dir, const std::string& task_id);

void save_stream(const TaskStream& stream, const std::string& dir);
TaskStream load_stream(const std::string& dir);

}  // namespace mmcl
