#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmcl/errors.hpp"

namespace mmcl {

// ---- scalar metrics ------------------------------------------------------------

double accuracy_percent(std::size_t correct, std::size_t total);
double micro_f1_percent(std::size_t tp, std::size_t fp, std::size_t fn);

// Gain of score S_A over a baseline S_B, normalized by the baseline's own gain
// over the random baseline S_R: 100 * (S_A - S_B) / (S_B - S_R). Throws
// DegenerateBaseline when S_B == S_R.
double relative_gain(double s_a, double s_b, double s_r);

// Knowledge transfer of a continual learner against the direct fine-tuning
// score on the same task (a relative gain).
double knowledge_transfer(double s_cl, double s_direct, double s_random);

// Forgetting on task j after later training on task i:
// 100 * (S^j - S^{j<-i}) / (S^j - S_R^j), where S^j is the score right after
// training task j. Positive means performance was lost.
double forgetting(double s_just_after, double s_after_later, double s_random);

// Low-shot transfer: relative gain of low-shot adaptation from a continually
// trained checkpoint over low-shot adaptation from the original
// initialization.
double low_shot_transfer(double s_cl_ls, double s_direct_ls, double s_random);

// ---- score records and report assembly -----------------------------------------

// One evaluation result. `regime` is one of:
//   upstream        score of `algorithm` on `evaluated_task` using the
//                   checkpoint taken after training `checkpoint_after_task`
//   direct          single-task fine-tuning baseline (checkpoint == task)
//   lowshot         low-shot adaptation starting from the checkpoint taken
//                   after `checkpoint_after_task`
//   lowshot_direct  low-shot adaptation from the original initialization
struct ScoreRecord {
    std::string experiment_id;
    std::string algorithm;
    std::string evaluated_task;
    std::string checkpoint_after_task;
    std::string regime;
    std::uint64_t seed = 0;
    std::string score_metric;
    double score = 0.0;
};

struct MetricCell {
    double value = 0.0;  // the derived metric, percent
    double raw = 0.0;    // the underlying raw score, percent
};

struct AlgorithmReport {
    // knowledge transfer per upstream task, evaluated right after training it
    std::map<std::string, MetricCell> knowledge_transfer;
    // forgetting[evaluated_task][checkpoint_after_task]
    std::map<std::string, std::map<std::string, MetricCell>> forgetting;
    // low_shot[evaluated_task][checkpoint_after_task]
    std::map<std::string, std::map<std::string, MetricCell>> low_shot;
    // std across seeds of the raw just-after-training score, per task
    std::map<std::string, double> raw_std;
};

struct MetricReport {
    std::vector<std::string> task_order;  // upstream order as observed
    std::map<std::string, AlgorithmReport> algorithms;
    std::map<std::string, double> direct_scores;          // S^direct per task
    std::map<std::string, double> direct_std;
    std::map<std::string, double> lowshot_direct_scores;  // per downstream task
    std::map<std::string, double> lowshot_direct_std;
    std::map<std::string, double> random_baselines;       // S_R per task
    std::size_t num_seeds = 0;
};

// Aggregates raw records into a report. Scores are averaged over seeds first,
// then metrics are computed on the seed means. Throws MetricError when a
// needed baseline record is missing and DegenerateBaseline when a baseline
// ties the random baseline.
MetricReport build_report(const std::vector<ScoreRecord>& records,
                          const std::map<std::string, double>& random_baselines);

}  // namespace mmcl
