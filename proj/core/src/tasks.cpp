#include "mmcl/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <tuple>

#include "mmcl/model.hpp"
#include "mmcl/textcfg.hpp"

namespace mmcl {

namespace fs = std::filesystem;

// ---- enum names ----------------------------------------------------------------

std::string modality_name(Modality m) {
    switch (m) {
        case Modality::VL: return "VL";
        case Modality::V: return "V";
        case Modality::L: return "L";
    }
    return "?";
}
Modality modality_from_name(const std::string& s) {
    if (s == "VL") return Modality::VL;
    if (s == "V") return Modality::V;
    if (s == "L") return Modality::L;
    throw ConfigError("unknown modality: " + s);
}
std::string task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::Classification: return "classification";
        case TaskKind::MultiChoice: return "multichoice";
        case TaskKind::MultiLabel: return "multilabel";
    }
    return "?";
}
TaskKind task_kind_from_name(const std::string& s) {
    if (s == "classification") return TaskKind::Classification;
    if (s == "multichoice") return TaskKind::MultiChoice;
    if (s == "multilabel") return TaskKind::MultiLabel;
    throw ConfigError("unknown task kind: " + s);
}
std::string score_metric_name(ScoreMetricKind m) {
    return m == ScoreMetricKind::Accuracy ? "accuracy" : "micro_f1";
}
ScoreMetricKind score_metric_from_name(const std::string& s) {
    if (s == "accuracy") return ScoreMetricKind::Accuracy;
    if (s == "micro_f1") return ScoreMetricKind::MicroF1;
    throw ConfigError("unknown score metric: " + s);
}
std::string fusion_rule_name(FusionRule f) {
    switch (f) {
        case FusionRule::Xor: return "xor";
        case FusionRule::Conjunction: return "conjunction";
        case FusionRule::SingleModalityA: return "single_modality_a";
        case FusionRule::SingleModalityB: return "single_modality_b";
    }
    return "?";
}
FusionRule fusion_rule_from_name(const std::string& s) {
    if (s == "xor") return FusionRule::Xor;
    if (s == "conjunction") return FusionRule::Conjunction;
    if (s == "single_modality_a") return FusionRule::SingleModalityA;
    if (s == "single_modality_b") return FusionRule::SingleModalityB;
    throw ConfigError("unknown fusion rule: " + s);
}

// ---- prototypes ------------------------------------------------------------------

namespace {

double proto_distance(const std::vector<float>& a, const std::vector<float>& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

double min_pairwise_distance(const std::vector<std::vector<float>>& protos) {
    double best = 1e300;
    for (std::size_t i = 0; i < protos.size(); ++i)
        for (std::size_t j = i + 1; j < protos.size(); ++j)
            best = std::min(best, proto_distance(protos[i], protos[j]));
    return best;
}

std::size_t content_token(const SyntheticTaskParams& p, Rng& rng) {
    return kNumReservedTokens + rng.uniform_index(p.vocab - kNumReservedTokens);
}

std::size_t pattern_hamming(const std::vector<std::size_t>& a,
                            const std::vector<std::size_t>& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += (a[i] != b[i]);
    return n;
}

std::vector<std::vector<std::size_t>> draw_patterns(const SyntheticTaskParams& p,
                                                    std::size_t count, std::size_t len,
                                                    Rng& rng) {
    // Patterns must differ in at least half their positions pairwise.
    for (int attempt = 0; attempt < 200; ++attempt) {
        std::vector<std::vector<std::size_t>> pats(count);
        for (auto& pat : pats) {
            pat.resize(len);
            for (auto& t : pat) t = content_token(p, rng);
        }
        bool ok = true;
        for (std::size_t i = 0; i < count && ok; ++i)
            for (std::size_t j = i + 1; j < count && ok; ++j)
                if (pattern_hamming(pats[i], pats[j]) < (len + 1) / 2) ok = false;
        if (ok) return pats;
    }
    throw GenerationError("could not draw well-separated token patterns");
}

}  // namespace

void make_prototypes(SyntheticTaskParams& params, Rng& rng) {
    const double min_required = std::max(4.0 * params.noise_sigma, 0.8);
    for (int attempt = 0; attempt < 200; ++attempt) {
        std::vector<std::vector<float>> protos(params.num_classes);
        for (auto& pr : protos) {
            pr.resize(params.feat_dim);
            for (auto& v : pr) v = static_cast<float>(rng.normal(0.0, 1.5));
        }
        if (min_pairwise_distance(protos) >= min_required) {
            params.proto_a = std::move(protos);
            break;
        }
        if (attempt == 199)
            throw GenerationError("could not separate modality-A prototypes");
    }
    params.proto_b = draw_patterns(params, params.num_classes, params.n_b_tokens, rng);
    params.candidate_b = draw_patterns(params, params.num_classes, params.candidate_len, rng);
}

// ---- example drawing ------------------------------------------------------------

namespace {

void append_a_tokens(std::vector<float>& out, const std::vector<float>& proto,
                     std::size_t count, double sigma, Rng& rng) {
    for (std::size_t t = 0; t < count; ++t)
        for (float v : proto) out.push_back(static_cast<float>(v + rng.normal(0.0, sigma)));
}

std::vector<std::size_t> noisy_pattern(const SyntheticTaskParams& p,
                                       const std::vector<std::size_t>& pattern, Rng& rng) {
    std::vector<std::size_t> out = pattern;
    for (auto& t : out)
        if (rng.uniform() < p.b_subst_prob) t = content_token(p, rng);
    return out;
}

Example draw_classification_example(const SyntheticTaskParams& p, std::size_t label,
                                    Rng& rng) {
    Example ex;
    ex.label = label;
    std::size_t a_class = 0, b_class = 0;
    std::size_t a_class2 = 0;  // second segment for paired tasks
    switch (p.fusion) {
        case FusionRule::SingleModalityA:
            a_class = label;
            a_class2 = label;
            b_class = rng.uniform_index(p.num_classes);
            break;
        case FusionRule::SingleModalityB:
            b_class = label;
            a_class = rng.uniform_index(p.num_classes);
            a_class2 = a_class;
            break;
        case FusionRule::Xor:
        case FusionRule::Conjunction: {
            // label is a function of a binary A-side bit and a binary B-side
            // bit. With two A segments the A bit means "segments match".
            std::size_t a_bit, b_bit;
            if (p.fusion == FusionRule::Xor) {
                a_bit = rng.uniform_index(2);
                b_bit = label ^ a_bit;
            } else {
                if (label == 1) {
                    a_bit = 1;
                    b_bit = 1;
                } else {
                    std::size_t pick = rng.uniform_index(3);  // (0,0), (0,1), (1,0)
                    a_bit = pick == 2 ? 1 : 0;
                    b_bit = pick == 1 ? 1 : 0;
                }
            }
            b_class = b_bit;
            if (p.a_segments == 2) {
                a_class = rng.uniform_index(p.num_classes);
                if (a_bit == 1) {
                    a_class2 = a_class;
                } else {
                    a_class2 = rng.uniform_index(p.num_classes - 1);
                    if (a_class2 >= a_class) ++a_class2;
                }
            } else {
                a_class = a_bit;
                a_class2 = a_bit;
            }
            break;
        }
    }
    if (p.a_segments == 2) {
        const std::size_t seg = p.n_a_tokens / 2;
        append_a_tokens(ex.a, p.proto_a[a_class], seg, p.noise_sigma, rng);
        append_a_tokens(ex.a, p.proto_a[a_class2], p.n_a_tokens - seg, p.noise_sigma, rng);
    } else {
        append_a_tokens(ex.a, p.proto_a[a_class], p.n_a_tokens, p.noise_sigma, rng);
    }
    ex.b = noisy_pattern(p, p.proto_b[b_class], rng);
    return ex;
}

}  // namespace

TaskSpec generate_task(const SyntheticTaskParams& params, const TaskSpec& skeleton, Rng& rng,
                       bool validate) {
    if (params.noise_sigma < 0) throw GenerationError("negative noise_sigma");
    if (params.proto_a.size() != params.num_classes)
        throw GenerationError("prototype count != num_classes");
    if (params.num_classes < 2) throw GenerationError("need at least 2 classes");
    if ((params.fusion == FusionRule::Xor || params.fusion == FusionRule::Conjunction) &&
        params.a_segments == 1 && params.num_classes != 2)
        throw GenerationError("binary fusion rules need 2 classes");
    if (params.noise_sigma > 0 &&
        min_pairwise_distance(params.proto_a) < 4.0 * params.noise_sigma)
        throw GenerationError("degenerate prototypes: pairwise distance < 4*noise_sigma");

    TaskSpec task = skeleton;
    task.modality = Modality::VL;
    task.kind = TaskKind::Classification;
    task.num_classes =
        (params.fusion == FusionRule::Xor || params.fusion == FusionRule::Conjunction)
            ? 2
            : params.num_classes;
    task.score_metric = ScoreMetricKind::Accuracy;
    task.random_baseline = 100.0 / static_cast<double>(task.num_classes);
    task.feat_dim = params.feat_dim;
    task.n_a = params.n_a_tokens;
    task.n_b = params.n_b_tokens;
    task.fusion = params.fusion;
    task.a_segments = params.a_segments;

    for (std::size_t c = 0; c < task.num_classes; ++c)
        for (std::size_t i = 0; i < params.examples_per_class; ++i)
            task.train.examples.push_back(draw_classification_example(params, c, rng));
    for (std::size_t c = 0; c < task.num_classes; ++c)
        for (std::size_t i = 0; i < params.val_per_class; ++i)
            task.val.examples.push_back(draw_classification_example(params, c, rng));

    if (validate &&
        (params.fusion == FusionRule::Xor || params.fusion == FusionRule::Conjunction)) {
        const double margin = task.random_baseline + 12.0;
        const double acc_a = linear_probe_accuracy(task, true, false);
        const double acc_b = linear_probe_accuracy(task, false, true);
        if (acc_a > margin || acc_b > margin)
            throw GenerationError("fusion task solvable from a single modality: probe A " +
                                  std::to_string(acc_a) + "%, probe B " +
                                  std::to_string(acc_b) + "%");
    }
    return task;
}

TaskSpec make_multichoice_task(const SyntheticTaskParams& params, std::size_t k,
                               const TaskSpec& skeleton, Rng& rng) {
    if (k < 2) throw GenerationError("multichoice needs k >= 2");
    if (params.num_classes != k)
        throw GenerationError("multichoice: num_classes must equal k");
    TaskSpec task = skeleton;
    task.modality = Modality::VL;
    task.kind = TaskKind::MultiChoice;
    task.num_classes = k;
    task.score_metric = ScoreMetricKind::Accuracy;
    task.random_baseline = 100.0 / static_cast<double>(k);
    task.feat_dim = params.feat_dim;
    task.n_a = params.n_a_tokens;
    task.n_b = params.n_b_tokens;
    task.candidate_len = params.candidate_len;
    task.fusion = FusionRule::SingleModalityB;  // candidates carry the answer
    task.a_segments = 1;

    auto draw = [&](std::size_t ctx_class) {
        Example ex;
        append_a_tokens(ex.a, params.proto_a[ctx_class], params.n_a_tokens,
                        params.noise_sigma, rng);
        ex.b = noisy_pattern(params, params.proto_b[ctx_class], rng);
        // One candidate per class, shuffled; the context class marks the
        // correct one.
        std::vector<std::size_t> order = rng.permutation(k);
        ex.candidates.resize(k);
        for (std::size_t slot = 0; slot < k; ++slot) {
            const std::size_t cls = order[slot];
            std::vector<std::size_t> cand = noisy_pattern(params, params.candidate_b[cls], rng);
            cand.resize(params.candidate_len);
            ex.candidates[slot] = std::move(cand);
            if (cls == ctx_class) ex.label = slot;
        }
        return ex;
    };
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t i = 0; i < params.examples_per_class; ++i)
            task.train.examples.push_back(draw(c));
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t i = 0; i < params.val_per_class; ++i)
            task.val.examples.push_back(draw(c));
    return task;
}

TaskSpec make_multilabel_task(const SyntheticTaskParams& params, std::size_t num_classes,
                              const TaskSpec& skeleton, Rng& rng) {
    if (num_classes < 2) throw GenerationError("multilabel needs C >= 2");
    if (params.proto_a.size() != num_classes)
        throw GenerationError("multilabel: prototype count != C");
    TaskSpec task = skeleton;
    task.modality = Modality::VL;
    task.kind = TaskKind::MultiLabel;
    task.num_classes = num_classes;
    task.score_metric = ScoreMetricKind::MicroF1;
    task.feat_dim = params.feat_dim;
    task.n_a = params.n_a_tokens;
    task.n_b = params.n_b_tokens;
    task.fusion = FusionRule::SingleModalityA;
    task.a_segments = 1;

    auto draw = [&]() {
        Example ex;
        const std::size_t cardinality = 1 + rng.uniform_index(4);
        std::vector<std::size_t> present =
            rng.sample_without_replacement(num_classes, std::min(cardinality, num_classes));
        std::sort(present.begin(), present.end());
        ex.label_set = present;
        for (std::size_t t = 0; t < params.n_a_tokens; ++t) {
            const auto& proto = params.proto_a[present[t % present.size()]];
            append_a_tokens(ex.a, proto, 1, params.noise_sigma, rng);
        }
        ex.b.resize(params.n_b_tokens);
        for (auto& t : ex.b) t = content_token(params, rng);
        return ex;
    };
    const std::size_t n_train = params.examples_per_class * num_classes;
    const std::size_t n_val = params.val_per_class * num_classes;
    for (std::size_t i = 0; i < n_train; ++i) task.train.examples.push_back(draw());
    for (std::size_t i = 0; i < n_val; ++i) task.val.examples.push_back(draw());
    task.random_baseline = estimate_micro_f1_random_baseline(task);
    return task;
}

// ---- distribution shift ------------------------------------------------------------

SyntheticTaskParams apply_shift(const SyntheticTaskParams& base, double severity, Rng& rng) {
    SyntheticTaskParams out = base;
    if (severity == 0.0) return out;

    // Rotate disjoint coordinate pairs by severity-scaled angles: orthogonal
    // for every severity, so prototype separation is preserved exactly.
    const std::size_t f = base.feat_dim;
    std::vector<std::size_t> axes = rng.permutation(f);
    std::vector<double> angles(f / 2);
    for (auto& a : angles) a = severity * (1.2 + 0.6 * rng.uniform());
    std::vector<float> shift_vec(f);
    for (auto& v : shift_vec) v = static_cast<float>(severity * rng.normal(0.0, 1.0));

    for (auto& proto : out.proto_a) {
        for (std::size_t p = 0; p + 1 < f; p += 2) {
            const std::size_t i = axes[p], j = axes[p + 1];
            const double c = std::cos(angles[p / 2]), s = std::sin(angles[p / 2]);
            const double xi = proto[i], xj = proto[j];
            proto[i] = static_cast<float>(c * xi - s * xj);
            proto[j] = static_cast<float>(s * xi + c * xj);
        }
        for (std::size_t i = 0; i < f; ++i) proto[i] += shift_vec[i];
    }

    // Cyclically permute a severity-proportional share of the token ids the
    // patterns actually use: the same vocabulary with shuffled roles, so a
    // downstream reader of the old patterns is actively contradicted.
    std::vector<std::size_t> support;
    for (const auto* group : {&out.proto_b, &out.candidate_b})
        for (const auto& pat : *group)
            for (auto t : pat)
                if (t >= kNumReservedTokens &&
                    std::find(support.begin(), support.end(), t) == support.end())
                    support.push_back(t);
    std::sort(support.begin(), support.end());
    std::size_t m = static_cast<std::size_t>(std::llround(severity * support.size()));
    if (m == 1) m = 2;
    if (m > 1) {
        std::vector<std::size_t> sel = rng.sample_without_replacement(support.size(), m);
        std::vector<std::size_t> map(base.vocab);
        for (std::size_t i = 0; i < base.vocab; ++i) map[i] = i;
        for (std::size_t i = 0; i < m; ++i)
            map[support[sel[i]]] = support[sel[(i + 1) % m]];
        auto remap = [&](std::vector<std::vector<std::size_t>>& pats) {
            for (auto& pat : pats)
                for (auto& t : pat) t = map[t];
        };
        remap(out.proto_b);
        remap(out.candidate_b);
    }
    return out;
}

// ---- unimodal variants ------------------------------------------------------------

TaskSpec make_unimodal_variant(const TaskSpec& task, char keep,
                               const std::vector<float>* mean_token_a) {
    if (task.modality != Modality::VL)
        throw VariantError("unimodal variant requires a VL task");
    const bool a_solvable =
        task.fusion == FusionRule::SingleModalityA || task.kind == TaskKind::MultiLabel;
    const bool b_solvable = task.fusion == FusionRule::SingleModalityB;
    if (keep == 'A' && !a_solvable)
        throw VariantError("task not solvable from modality A alone");
    if (keep == 'B' && !b_solvable)
        throw VariantError("task not solvable from modality B alone");
    if (keep != 'A' && keep != 'B') throw VariantError("keep must be 'A' or 'B'");

    TaskSpec out = task;
    out.modality = keep == 'A' ? Modality::V : Modality::L;
    auto rewrite = [&](Dataset& ds) {
        for (auto& ex : ds.examples) {
            if (keep == 'A') {
                ex.b.assign(std::begin(kVacuousPhrase), std::end(kVacuousPhrase));
            } else {
                if (!mean_token_a)
                    throw StateError("mean token for modality A not computed");
                ex.a.clear();
                for (std::size_t t = 0; t < task.n_a; ++t)
                    ex.a.insert(ex.a.end(), mean_token_a->begin(), mean_token_a->end());
            }
        }
    };
    rewrite(out.train);
    rewrite(out.val);
    if (keep == 'A') out.n_b = 3;
    return out;
}

// ---- low-shot sampling ------------------------------------------------------------

TaskSpec sample_low_shot(const TaskSpec& task, const LowShotConfig& cfg) {
    TaskSpec out = task;
    out.train.examples.clear();
    Rng rng = Rng::derive(cfg.rng_seed, "low-shot:" + task.task_id);
    std::vector<std::size_t> selected;
    if (cfg.mode == LowShotConfig::Mode::PerClass) {
        if (task.kind == TaskKind::MultiLabel)
            throw SampleError("per-class sampling undefined for multi-label tasks");
        std::vector<std::vector<std::size_t>> by_class(task.num_classes);
        for (std::size_t i = 0; i < task.train.size(); ++i)
            by_class[task.train.examples[i].label].push_back(i);
        for (const auto& cls : by_class)
            if (cls.size() < cfg.per_class)
                throw SampleError("per-class count exceeds smallest class: " +
                                  std::to_string(cls.size()));
        for (const auto& cls : by_class) {
            auto pick = rng.sample_without_replacement(cls.size(), cfg.per_class);
            for (auto p : pick) selected.push_back(cls[p]);
        }
    } else {
        if (!(cfg.fraction > 0.0 && cfg.fraction <= 1.0))
            throw SampleError("fraction must be in (0, 1]");
        // round-half-up
        const std::size_t m = static_cast<std::size_t>(
            std::floor(cfg.fraction * static_cast<double>(task.train.size()) + 0.5));
        if (m == 0) throw SampleError("fraction selects zero examples");
        selected = rng.sample_without_replacement(task.train.size(), m);
    }
    std::sort(selected.begin(), selected.end());
    for (auto i : selected) out.train.examples.push_back(task.train.examples[i]);
    return out;
}

std::vector<float> corpus_mean_token(const std::vector<const TaskSpec*>& tasks,
                                     std::size_t feat_dim) {
    std::vector<double> acc(feat_dim, 0.0);
    std::size_t count = 0;
    for (const auto* t : tasks)
        for (const auto& ex : t->train.examples) {
            const std::size_t n = ex.a.size() / feat_dim;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t d = 0; d < feat_dim; ++d) acc[d] += ex.a[i * feat_dim + d];
            count += n;
        }
    if (count == 0) throw StateError("corpus_mean_token: no modality-A tokens");
    std::vector<float> out(feat_dim);
    for (std::size_t d = 0; d < feat_dim; ++d)
        out[d] = static_cast<float>(acc[d] / static_cast<double>(count));
    return out;
}

// ---- default stream ------------------------------------------------------------

const TaskSpec& TaskStream::find(const std::string& task_id) const {
    for (const auto* group : {&vl_tasks, &v_tasks, &l_tasks})
        for (const auto& t : *group)
            if (t.task_id == task_id) return t;
    throw ConfigError("no such task in stream: " + task_id);
}

std::vector<const TaskSpec*> TaskStream::all() const {
    std::vector<const TaskSpec*> out;
    for (const auto* group : {&vl_tasks, &v_tasks, &l_tasks})
        for (const auto& t : *group) out.push_back(&t);
    return out;
}

namespace {

std::size_t scaled(std::size_t n, double scale) {
    auto v = static_cast<std::size_t>(std::llround(n * scale));
    return v == 0 ? 1 : v;
}

// First n classes of a master generator family. Tasks built from the same
// family share their latent feature space, so learning one reinforces the
// representations the others rely on; only the shifted task moves the space.
SyntheticTaskParams slice_family(const SyntheticTaskParams& master, std::size_t offset,
                                 std::size_t n) {
    SyntheticTaskParams p = master;
    p.num_classes = n;
    p.proto_a.assign(master.proto_a.begin() + offset, master.proto_a.begin() + offset + n);
    p.proto_b.assign(master.proto_b.begin() + offset, master.proto_b.begin() + offset + n);
    p.candidate_b.assign(master.candidate_b.begin() + offset,
                         master.candidate_b.begin() + offset + n);
    return p;
}

}  // namespace

TaskStream build_default_stream(const StreamConfig& cfg) {
    TaskStream stream;
    stream.config = cfg;
    const double sc = cfg.size_scale;

    // One shared generator family for the whole stream.
    SyntheticTaskParams master;
    master.num_classes = 32;
    master.noise_sigma = 0.25;
    {
        Rng rng = Rng::derive(cfg.rng_seed, "task:master");
        make_prototypes(master, rng);
    }

    // Task 1: large-C classification over modality A.
    {
        SyntheticTaskParams p = slice_family(master, 0, 32);
        p.fusion = FusionRule::SingleModalityA;
        p.examples_per_class = scaled(16, sc);
        p.val_per_class = 4;
        Rng rng = Rng::derive(cfg.rng_seed, "task:t1");
        TaskSpec skel;
        skel.task_id = "t1";
        stream.vl_tasks.push_back(generate_task(p, skel, rng));
    }
    // Task 2: binary xor of an A-segment match bit and the B pattern bit.
    {
        SyntheticTaskParams p = slice_family(master, 0, 2);
        p.fusion = FusionRule::Xor;
        // The xor of two latent bits is the hardest fusion; keep the inputs
        // clean enough that it is reliably learnable at this size.
        p.noise_sigma = 0.15;
        p.examples_per_class = scaled(192, sc);
        p.val_per_class = 64;
        Rng rng = Rng::derive(cfg.rng_seed, "task:t2");
        TaskSpec skel;
        skel.task_id = "t2";
        stream.vl_tasks.push_back(generate_task(p, skel, rng));
    }
    // Task 3: 3-way classification over modality B.
    {
        SyntheticTaskParams p = slice_family(master, 0, 3);
        p.fusion = FusionRule::SingleModalityB;
        p.examples_per_class = scaled(85, sc);
        p.val_per_class = 42;
        Rng rng = Rng::derive(cfg.rng_seed, "task:t3");
        TaskSpec skel;
        skel.task_id = "t3";
        stream.vl_tasks.push_back(generate_task(p, skel, rng));
    }
    // Task 4: 4-choice task over a strongly shifted copy of the family space.
    {
        SyntheticTaskParams p = slice_family(master, 0, 4);
        // A context is near-uninformative here, so solving the task requires
        // re-reading modality B under the shifted token roles.
        p.noise_sigma = 3.0;
        p.examples_per_class = scaled(128, sc);
        p.val_per_class = 32;
        Rng rng = Rng::derive(cfg.rng_seed, "task:t4");
        SyntheticTaskParams shifted = apply_shift(p, cfg.shift_severity, rng);
        TaskSpec skel;
        skel.task_id = "t4";
        stream.vl_tasks.push_back(make_multichoice_task(shifted, 4, skel, rng));
    }

    {
        std::vector<const TaskSpec*> vl;
        for (const auto& t : stream.vl_tasks) vl.push_back(&t);
        stream.mean_token_a = corpus_mean_token(vl, stream.vl_tasks[0].feat_dim);
    }

    // Vision-only: held-out family classes, an 8-way classification variant
    // and a multilabel variant.
    if (cfg.k_v >= 1) {
        SyntheticTaskParams p = slice_family(master, 8, 8);
        p.fusion = FusionRule::SingleModalityA;
        p.examples_per_class = scaled(64, sc);
        p.val_per_class = 16;
        Rng rng = Rng::derive(cfg.rng_seed, "task:v1");
        TaskSpec skel;
        skel.task_id = "v1";
        stream.v_tasks.push_back(make_unimodal_variant(generate_task(p, skel, rng), 'A'));
    }
    if (cfg.k_v >= 2) {
        SyntheticTaskParams p = slice_family(master, 16, 8);
        p.examples_per_class = scaled(64, sc);
        p.val_per_class = 16;
        Rng rng = Rng::derive(cfg.rng_seed, "task:v2");
        TaskSpec skel;
        skel.task_id = "v2";
        stream.v_tasks.push_back(
            make_unimodal_variant(make_multilabel_task(p, 8, skel, rng), 'A'));
    }
    // Language-only: 2-way and 3-way variants over modality B.
    if (cfg.k_l >= 1) {
        SyntheticTaskParams p = slice_family(master, 24, 2);
        p.fusion = FusionRule::SingleModalityB;
        p.examples_per_class = scaled(256, sc);
        p.val_per_class = 64;
        Rng rng = Rng::derive(cfg.rng_seed, "task:l1");
        TaskSpec skel;
        skel.task_id = "l1";
        stream.l_tasks.push_back(
            make_unimodal_variant(generate_task(p, skel, rng), 'B', &stream.mean_token_a));
    }
    if (cfg.k_l >= 2) {
        SyntheticTaskParams p = slice_family(master, 26, 3);
        p.fusion = FusionRule::SingleModalityB;
        p.examples_per_class = scaled(170, sc);
        p.val_per_class = 42;
        Rng rng = Rng::derive(cfg.rng_seed, "task:l2");
        TaskSpec skel;
        skel.task_id = "l2";
        stream.l_tasks.push_back(
            make_unimodal_variant(generate_task(p, skel, rng), 'B', &stream.mean_token_a));
    }

    if (stream.config.upstream_order.empty())
        for (const auto& t : stream.vl_tasks)
            stream.config.upstream_order.push_back(t.task_id);
    return stream;
}

// ---- probes / oracles ------------------------------------------------------------

namespace {

// Raw feature view used by the probes: flattened A tokens and/or a
// bag-of-token count vector for B, standardized per feature on the train set.
struct ProbeFeatures {
    std::vector<std::vector<double>> train, val;
    std::vector<std::size_t> train_labels, val_labels;
};

std::size_t probe_vocab(const TaskSpec& task) {
    std::size_t mx = 0;
    for (const auto* ds : {&task.train, &task.val})
        for (const auto& ex : ds->examples)
            for (auto t : ex.b) mx = std::max(mx, t);
    return mx + 1;
}

ProbeFeatures extract_features(const TaskSpec& task, bool use_a, bool use_b) {
    ProbeFeatures f;
    const std::size_t vb = use_b ? probe_vocab(task) : 0;
    auto row = [&](const Example& ex) {
        std::vector<double> r;
        if (use_a)
            for (float v : ex.a) r.push_back(v);
        if (use_b) {
            std::vector<double> counts(vb, 0.0);
            for (auto t : ex.b) counts[t] += 1.0;
            r.insert(r.end(), counts.begin(), counts.end());
        }
        return r;
    };
    for (const auto& ex : task.train.examples) {
        f.train.push_back(row(ex));
        f.train_labels.push_back(ex.label);
    }
    for (const auto& ex : task.val.examples) {
        f.val.push_back(row(ex));
        f.val_labels.push_back(ex.label);
    }
    // standardize
    const std::size_t dim = f.train[0].size();
    std::vector<double> mu(dim, 0.0), sd(dim, 0.0);
    for (const auto& r : f.train)
        for (std::size_t d = 0; d < dim; ++d) mu[d] += r[d];
    for (auto& m : mu) m /= static_cast<double>(f.train.size());
    for (const auto& r : f.train)
        for (std::size_t d = 0; d < dim; ++d) sd[d] += (r[d] - mu[d]) * (r[d] - mu[d]);
    for (auto& s : sd) s = std::sqrt(s / static_cast<double>(f.train.size()));
    for (auto* split : {&f.train, &f.val})
        for (auto& r : *split)
            for (std::size_t d = 0; d < dim; ++d)
                r[d] = sd[d] > 1e-12 ? (r[d] - mu[d]) / sd[d] : 0.0;
    return f;
}

double probe_eval(const std::vector<std::vector<double>>& rows,
                  const std::vector<std::size_t>& labels,
                  const std::function<std::size_t(const std::vector<double>&)>& predict) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) correct += predict(rows[i]) == labels[i];
    return 100.0 * static_cast<double>(correct) / static_cast<double>(rows.size());
}

}  // namespace

double linear_probe_accuracy(const TaskSpec& task, bool use_a, bool use_b,
                             std::size_t epochs, double lr) {
    if (task.kind != TaskKind::Classification)
        throw MetricError("linear probe expects a classification task");
    ProbeFeatures f = extract_features(task, use_a, use_b);
    const std::size_t dim = f.train[0].size();
    const std::size_t C = task.num_classes;
    const std::size_t n = f.train.size();
    std::vector<double> W(C * (dim + 1), 0.0);  // last column is the bias
    std::vector<double> logits(C), probs(C), grad(C * (dim + 1));
    for (std::size_t e = 0; e < epochs; ++e) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& x = f.train[i];
            double mx = -1e300;
            for (std::size_t c = 0; c < C; ++c) {
                double z = W[c * (dim + 1) + dim];
                for (std::size_t d = 0; d < dim; ++d) z += W[c * (dim + 1) + d] * x[d];
                logits[c] = z;
                mx = std::max(mx, z);
            }
            double zsum = 0;
            for (std::size_t c = 0; c < C; ++c) zsum += std::exp(logits[c] - mx);
            for (std::size_t c = 0; c < C; ++c) {
                probs[c] = std::exp(logits[c] - mx) / zsum;
                const double err = probs[c] - (c == f.train_labels[i] ? 1.0 : 0.0);
                for (std::size_t d = 0; d < dim; ++d) grad[c * (dim + 1) + d] += err * x[d];
                grad[c * (dim + 1) + dim] += err;
            }
        }
        for (std::size_t j = 0; j < W.size(); ++j)
            W[j] -= lr * grad[j] / static_cast<double>(n);
    }
    auto predict = [&](const std::vector<double>& x) {
        std::size_t best = 0;
        double bz = -1e300;
        for (std::size_t c = 0; c < C; ++c) {
            double z = W[c * (dim + 1) + dim];
            for (std::size_t d = 0; d < dim; ++d) z += W[c * (dim + 1) + d] * x[d];
            if (z > bz) {
                bz = z;
                best = c;
            }
        }
        return best;
    };
    return probe_eval(f.val, f.val_labels, predict);
}

double mlp_probe_accuracy(const TaskSpec& task, bool use_a, bool use_b, std::size_t hidden,
                          std::size_t epochs, double lr, std::uint64_t seed) {
    if (task.kind != TaskKind::Classification)
        throw MetricError("mlp probe expects a classification task");
    ProbeFeatures f = extract_features(task, use_a, use_b);
    const std::size_t dim = f.train[0].size();
    const std::size_t C = task.num_classes;
    const std::size_t n = f.train.size();
    Rng rng(seed);
    std::vector<double> W1(hidden * (dim + 1)), W2(C * (hidden + 1), 0.0);
    for (auto& w : W1) w = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    std::vector<double> h(hidden), logits(C), probs(C), dh(hidden);
    std::vector<double> g1(W1.size()), g2(W2.size());
    auto forward = [&](const std::vector<double>& x) {
        for (std::size_t j = 0; j < hidden; ++j) {
            double z = W1[j * (dim + 1) + dim];
            for (std::size_t d = 0; d < dim; ++d) z += W1[j * (dim + 1) + d] * x[d];
            h[j] = std::tanh(z);
        }
        for (std::size_t c = 0; c < C; ++c) {
            double z = W2[c * (hidden + 1) + hidden];
            for (std::size_t j = 0; j < hidden; ++j) z += W2[c * (hidden + 1) + j] * h[j];
            logits[c] = z;
        }
    };
    for (std::size_t e = 0; e < epochs; ++e) {
        std::fill(g1.begin(), g1.end(), 0.0);
        std::fill(g2.begin(), g2.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& x = f.train[i];
            forward(x);
            double mx = *std::max_element(logits.begin(), logits.end());
            double zsum = 0;
            for (std::size_t c = 0; c < C; ++c) zsum += std::exp(logits[c] - mx);
            std::fill(dh.begin(), dh.end(), 0.0);
            for (std::size_t c = 0; c < C; ++c) {
                probs[c] = std::exp(logits[c] - mx) / zsum;
                const double err = probs[c] - (c == f.train_labels[i] ? 1.0 : 0.0);
                for (std::size_t j = 0; j < hidden; ++j) {
                    g2[c * (hidden + 1) + j] += err * h[j];
                    dh[j] += err * W2[c * (hidden + 1) + j];
                }
                g2[c * (hidden + 1) + hidden] += err;
            }
            for (std::size_t j = 0; j < hidden; ++j) {
                const double dz = dh[j] * (1.0 - h[j] * h[j]);
                for (std::size_t d = 0; d < dim; ++d) g1[j * (dim + 1) + d] += dz * x[d];
                g1[j * (dim + 1) + dim] += dz;
            }
        }
        for (std::size_t j = 0; j < W1.size(); ++j) W1[j] -= lr * g1[j] / n;
        for (std::size_t j = 0; j < W2.size(); ++j) W2[j] -= lr * g2[j] / n;
    }
    auto predict = [&](const std::vector<double>& x) {
        forward(x);
        return static_cast<std::size_t>(
            std::max_element(logits.begin(), logits.end()) - logits.begin());
    };
    return probe_eval(f.val, f.val_labels, predict);
}

double nearest_prototype_accuracy(const TaskSpec& task, const SyntheticTaskParams& params) {
    std::size_t correct = 0;
    for (const auto& ex : task.val.examples) {
        std::vector<float> mean(task.feat_dim, 0.0f);
        const std::size_t n = ex.a.size() / task.feat_dim;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t d = 0; d < task.feat_dim; ++d)
                mean[d] += ex.a[i * task.feat_dim + d] / static_cast<float>(n);
        std::size_t best = 0;
        double bd = 1e300;
        for (std::size_t c = 0; c < params.proto_a.size(); ++c) {
            double d = proto_distance(mean, params.proto_a[c]);
            if (d < bd) {
                bd = d;
                best = c;
            }
        }
        correct += best == ex.label;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(task.val.size());
}

double multilabel_prototype_micro_f1(const TaskSpec& task,
                                     const SyntheticTaskParams& params) {
    const double threshold = min_pairwise_distance(params.proto_a) / 2.0;
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto& ex : task.val.examples) {
        std::vector<bool> pred(params.proto_a.size(), false);
        const std::size_t n = ex.a.size() / task.feat_dim;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<float> tok(ex.a.begin() + i * task.feat_dim,
                                   ex.a.begin() + (i + 1) * task.feat_dim);
            for (std::size_t c = 0; c < params.proto_a.size(); ++c)
                if (proto_distance(tok, params.proto_a[c]) < threshold) pred[c] = true;
        }
        std::vector<bool> truth(params.proto_a.size(), false);
        for (auto c : ex.label_set) truth[c] = true;
        for (std::size_t c = 0; c < pred.size(); ++c) {
            tp += pred[c] && truth[c];
            fp += pred[c] && !truth[c];
            fn += !pred[c] && truth[c];
        }
    }
    return 100.0 * 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
}

double candidate_frequency_accuracy(const TaskSpec& task) {
    if (task.kind != TaskKind::MultiChoice)
        throw MetricError("candidate frequency oracle expects a multi-choice task");
    // No-context baseline: always answer the slot that was correct most often
    // in the training split.
    std::vector<std::size_t> counts(task.num_classes, 0);
    for (const auto& ex : task.train.examples) counts[ex.label]++;
    const std::size_t best = static_cast<std::size_t>(
        std::max_element(counts.begin(), counts.end()) - counts.begin());
    std::size_t correct = 0;
    for (const auto& ex : task.val.examples) correct += ex.label == best;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(task.val.size());
}

double estimate_micro_f1_random_baseline(const TaskSpec& task, std::size_t draws,
                                         std::uint64_t seed) {
    if (task.val.size() == 0) throw MetricError("empty validation set");
    // cardinality prior from the validation labels
    std::vector<std::size_t> cards;
    for (const auto& ex : task.val.examples) cards.push_back(ex.label_set.size());
    Rng rng(seed);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < draws; ++i) {
        const auto& ex = task.val.examples[i % task.val.size()];
        const std::size_t card = cards[rng.uniform_index(cards.size())];
        auto pred = rng.sample_without_replacement(task.num_classes,
                                                   std::min(card, task.num_classes));
        std::vector<bool> p(task.num_classes, false), t(task.num_classes, false);
        for (auto c : pred) p[c] = true;
        for (auto c : ex.label_set) t[c] = true;
        for (std::size_t c = 0; c < task.num_classes; ++c) {
            tp += p[c] && t[c];
            fp += p[c] && !t[c];
            fn += !p[c] && t[c];
        }
    }
    return 100.0 * 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
}

// ---- serialization ------------------------------------------------------------

namespace {

void write_f32_blob(const std::string& path, const std::vector<float>& values) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
}

std::vector<float> read_f32_blob(const std::string& path, std::size_t expected) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<float> out(expected);
    f.read(reinterpret_cast<char*>(out.data()),
           static_cast<std::streamsize>(expected * sizeof(float)));
    if (static_cast<std::size_t>(f.gcount()) != expected * sizeof(float))
        throw IoError("short read from " + path);
    return out;
}

std::string ids_to_str(const std::vector<std::size_t>& ids, char sep = ' ') {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += sep;
        out += std::to_string(ids[i]);
    }
    return out;
}

std::vector<std::size_t> ids_from_str(const std::string& s, char sep = ' ') {
    std::vector<std::size_t> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!cur.empty()) out.push_back(std::stoull(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(std::stoull(cur));
    return out;
}

void write_split_csv(const std::string& path, const Dataset& ds) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << "label,label_set,b_tokens,candidates\n";
    for (const auto& ex : ds.examples) {
        f << ex.label << "," << ids_to_str(ex.label_set, ';') << "," << ids_to_str(ex.b);
        f << ",";
        for (std::size_t i = 0; i < ex.candidates.size(); ++i) {
            if (i) f << "|";
            f << ids_to_str(ex.candidates[i]);
        }
        f << "\n";
    }
}

Dataset read_split_csv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("empty csv " + path);
    Dataset ds;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        // split into 4 comma-separated fields
        std::vector<std::string> fields;
        std::string cur;
        for (char c : line) {
            if (c == ',' && fields.size() < 3) {
                fields.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        fields.push_back(cur);
        if (fields.size() != 4) throw IoError("malformed row in " + path);
        Example ex;
        ex.label = std::stoull(fields[0]);
        ex.label_set = ids_from_str(fields[1], ';');
        ex.b = ids_from_str(fields[2]);
        if (!fields[3].empty()) {
            std::string cand;
            for (char c : fields[3] + "|") {
                if (c == '|') {
                    ex.candidates.push_back(ids_from_str(cand));
                    cand.clear();
                } else {
                    cand += c;
                }
            }
        }
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

}  // namespace

void save_task(const TaskSpec& task, const std::string& dir) {
    fs::create_directories(dir);
    TextConfig meta;
    meta.set("task", "id", task.task_id);
    meta.set("task", "modality", modality_name(task.modality));
    meta.set("task", "kind", task_kind_name(task.kind));
    meta.set("task", "num_classes", std::to_string(task.num_classes));
    meta.set("task", "score_metric", score_metric_name(task.score_metric));
    meta.set("task", "random_baseline", TextConfig::format_double(task.random_baseline));
    meta.set("task", "feat_dim", std::to_string(task.feat_dim));
    meta.set("task", "n_a", std::to_string(task.n_a));
    meta.set("task", "n_b", std::to_string(task.n_b));
    meta.set("task", "candidate_len", std::to_string(task.candidate_len));
    meta.set("task", "fusion", fusion_rule_name(task.fusion));
    meta.set("task", "a_segments", std::to_string(task.a_segments));
    meta.set("task", "train_size", std::to_string(task.train.size()));
    meta.set("task", "val_size", std::to_string(task.val.size()));
    const std::string base = dir + "/" + task.task_id;
    meta.save(base + ".meta");
    for (const auto& [suffix, ds] :
         std::vector<std::pair<std::string, const Dataset*>>{{"train", &task.train},
                                                             {"val", &task.val}}) {
        std::vector<float> blob;
        for (const auto& ex : ds->examples) blob.insert(blob.end(), ex.a.begin(), ex.a.end());
        write_f32_blob(base + "." + suffix + ".a.bin", blob);
        write_split_csv(base + "." + suffix + ".csv", *ds);
    }
}

TaskSpec load_task(const std::string& dir, const std::string& task_id) {
    const std::string base = dir + "/" + task_id;
    TextConfig meta = TextConfig::load(base + ".meta");
    TaskSpec task;
    task.task_id = meta.get("task", "id");
    task.modality = modality_from_name(meta.get("task", "modality"));
    task.kind = task_kind_from_name(meta.get("task", "kind"));
    task.num_classes = meta.get_u64("task", "num_classes");
    task.score_metric = score_metric_from_name(meta.get("task", "score_metric"));
    task.random_baseline = meta.get_double("task", "random_baseline");
    task.feat_dim = meta.get_u64("task", "feat_dim");
    task.n_a = meta.get_u64("task", "n_a");
    task.n_b = meta.get_u64("task", "n_b");
    task.candidate_len = meta.get_u64("task", "candidate_len");
    task.fusion = fusion_rule_from_name(meta.get("task", "fusion"));
    task.a_segments = meta.get_u64("task", "a_segments");
    const std::size_t train_size = meta.get_u64("task", "train_size");
    const std::size_t val_size = meta.get_u64("task", "val_size");
    for (const auto& [suffix, ds, n] : std::vector<std::tuple<std::string, Dataset*, std::size_t>>{
             {"train", &task.train, train_size}, {"val", &task.val, val_size}}) {
        *ds = read_split_csv(base + "." + suffix + ".csv");
        if (ds->size() != n) throw IoError("split size mismatch in " + base + "." + suffix);
        auto blob = read_f32_blob(base + "." + suffix + ".a.bin",
                                  n * task.n_a * task.feat_dim);
        for (std::size_t i = 0; i < n; ++i)
            ds->examples[i].a.assign(blob.begin() + i * task.n_a * task.feat_dim,
                                     blob.begin() + (i + 1) * task.n_a * task.feat_dim);
    }
    return task;
}

void save_stream(const TaskStream& stream, const std::string& dir) {
    fs::create_directories(dir);
    TextConfig meta;
    meta.set("stream", "k_vl", std::to_string(stream.config.k_vl));
    meta.set("stream", "k_v", std::to_string(stream.config.k_v));
    meta.set("stream", "k_l", std::to_string(stream.config.k_l));
    meta.set("stream", "order", TextConfig::join_list(stream.config.upstream_order));
    meta.set("stream", "shift_severity",
             TextConfig::format_double(stream.config.shift_severity));
    meta.set("stream", "rng_seed", std::to_string(stream.config.rng_seed));
    meta.set("stream", "size_scale", TextConfig::format_double(stream.config.size_scale));
    std::vector<std::string> ids;
    for (const auto& t : stream.vl_tasks) ids.push_back(t.task_id);
    meta.set("stream", "vl_tasks", TextConfig::join_list(ids));
    ids.clear();
    for (const auto& t : stream.v_tasks) ids.push_back(t.task_id);
    meta.set("stream", "v_tasks", TextConfig::join_list(ids));
    ids.clear();
    for (const auto& t : stream.l_tasks) ids.push_back(t.task_id);
    meta.set("stream", "l_tasks", TextConfig::join_list(ids));
    std::string mean;
    char buf[40];
    for (float v : stream.mean_token_a) {
        std::snprintf(buf, sizeof(buf), "%a", static_cast<double>(v));
        if (!mean.empty()) mean += " ";
        mean += buf;
    }
    meta.set("stream", "mean_token_a", mean);
    meta.save(dir + "/stream.meta");
    for (const auto* t : stream.all()) save_task(*t, dir);
}

TaskStream load_stream(const std::string& dir) {
    TextConfig meta = TextConfig::load(dir + "/stream.meta");
    TaskStream stream;
    stream.config.k_vl = meta.get_u64("stream", "k_vl");
    stream.config.k_v = meta.get_u64("stream", "k_v");
    stream.config.k_l = meta.get_u64("stream", "k_l");
    stream.config.upstream_order = TextConfig::split_list(meta.get("stream", "order"));
    stream.config.shift_severity = meta.get_double("stream", "shift_severity");
    stream.config.rng_seed = meta.get_u64("stream", "rng_seed");
    stream.config.size_scale = meta.get_double("stream", "size_scale");
    for (const auto& id : TextConfig::split_list(meta.get("stream", "vl_tasks")))
        stream.vl_tasks.push_back(load_task(dir, id));
    for (const auto& id : TextConfig::split_list(meta.get("stream", "v_tasks")))
        stream.v_tasks.push_back(load_task(dir, id));
    for (const auto& id : TextConfig::split_list(meta.get("stream", "l_tasks")))
        stream.l_tasks.push_back(load_task(dir, id));
    std::istringstream ms(meta.get("stream", "mean_token_a"));
    std::string tok;
    while (ms >> tok) stream.mean_token_a.push_back(static_cast<float>(std::strtod(tok.c_str(), nullptr)));
    return stream;
}

}  // namespace mmcl
