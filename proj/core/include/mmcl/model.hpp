#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmcl/graph.hpp"
#include "mmcl/optim.hpp"
#include "mmcl/rng.hpp"
#include "mmcl/tensor.hpp"

namespace mmcl {

// Two-modality encoder: modality A carries continuous feature tokens (the
// image-like stream), modality B discrete ids (the text-like stream). Both
// are embedded into one sequence and encoded by shared transformer layers.
struct EncoderConfig {
    std::size_t embed_dim = 64;
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 0;  // 0 means 4 * embed_dim
    std::size_t max_tokens_a = 16;
    std::size_t max_tokens_b = 40;
    std::size_t vocab_b = 64;
    std::size_t feat_dim_a = 8;
    double ln_eps = 1e-5;

    std::size_t ffn() const { return ffn_dim ? ffn_dim : 4 * embed_dim; }

    void validate() const {
        if (embed_dim == 0 || num_layers == 0 || num_heads == 0)
            throw ConfigError("EncoderConfig: zero-sized field");
        if (embed_dim % num_heads != 0)
            throw ConfigError("EncoderConfig: embed_dim % num_heads != 0");
        if (max_tokens_a == 0 || max_tokens_b == 0 || vocab_b == 0 || feat_dim_a == 0)
            throw ConfigError("EncoderConfig: token budgets and vocab must be > 0");
    }

    // Canonical text form; the checkpoint config hash is computed over this.
    std::string canonical_text() const {
        std::ostringstream os;
        os << "embed_dim=" << embed_dim << "\nnum_layers=" << num_layers
           << "\nnum_heads=" << num_heads << "\nffn_dim=" << ffn()
           << "\nmax_tokens_a=" << max_tokens_a << "\nmax_tokens_b=" << max_tokens_b
           << "\nvocab_b=" << vocab_b << "\nfeat_dim_a=" << feat_dim_a
           << "\nln_eps=" << ln_eps << "\n";
        return os.str();
    }
};

enum class HeadKind { Classifier, ChoiceScorer, MultiLabel };

inline std::string head_kind_name(HeadKind k) {
    switch (k) {
        case HeadKind::Classifier: return "classifier";
        case HeadKind::ChoiceScorer: return "choice_scorer";
        case HeadKind::MultiLabel: return "multi_label";
    }
    return "?";
}

inline HeadKind head_kind_from_name(const std::string& s) {
    if (s == "classifier") return HeadKind::Classifier;
    if (s == "choice_scorer") return HeadKind::ChoiceScorer;
    if (s == "multi_label") return HeadKind::MultiLabel;
    throw ConfigError("unknown head kind: " + s);
}

// Reserved modality-B ids: 0 separates context and candidate in multi-choice
// inputs; 1..3 form the fixed vacuous phrase. Generators use ids >= 4.
inline constexpr std::size_t kSepToken = 0;
inline constexpr std::size_t kVacuousPhrase[3] = {1, 2, 3};
inline constexpr std::size_t kNumReservedTokens = 4;

// One batch of raw inputs. Modality A: [batch, n_a, feat_dim] continuous
// features; modality B: [batch, n_b] discrete ids. Either token count may be
// zero.
template <typename T>
struct BatchT {
    std::size_t batch = 0;
    std::size_t n_a = 0;
    std::vector<T> a;  // batch * n_a * feat_dim
    std::size_t n_b = 0;
    std::vector<std::size_t> b;  // batch * n_b
};

using Batch = BatchT<float>;

template <typename T>
class ModelT {
  public:
    using Ref = typename Graph<T>::Ref;

    struct HeadInfo {
        HeadKind kind;
        std::size_t outputs;  // C for classifier/multi_label, 1 for choice scorer
    };

    ModelT(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        const std::size_t d = cfg_.embed_dim;
        const std::size_t f = cfg_.ffn();
        add_normal("embed.cls", {1, d}, seed);
        add_normal("embed.proj_a.weight", {cfg_.feat_dim_a, d}, seed);
        add_zeros("embed.proj_a.bias", {d});
        add_normal("embed.tok_b", {cfg_.vocab_b, d}, seed);
        add_normal("embed.type_a", {d}, seed);
        add_normal("embed.type_b", {d}, seed);
        add_normal("pos.a", {cfg_.max_tokens_a, d}, seed);
        add_normal("pos.b", {cfg_.max_tokens_b, d}, seed);
        for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
            const std::string p = layer_prefix(l);
            add_ones(p + "ln1.gamma", {d});
            add_zeros(p + "ln1.beta", {d});
            for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
                add_normal(p + w + std::string(".weight"), {d, d}, seed);
                add_zeros(p + w + std::string(".bias"), {d});
            }
            add_ones(p + "ln2.gamma", {d});
            add_zeros(p + "ln2.beta", {d});
            add_normal(p + "ffn.w1.weight", {d, f}, seed);
            add_zeros(p + "ffn.w1.bias", {f});
            add_normal(p + "ffn.w2.weight", {f, d}, seed);
            add_zeros(p + "ffn.w2.bias", {d});
        }
        add_ones("final_ln.gamma", {d});
        add_zeros("final_ln.beta", {d});
        seed_ = seed;
    }

    const EncoderConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

    // ---- parameter access ---------------------------------------------------

    ParameterT<T>& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("no such parameter: " + name);
        return it->second;
    }
    const ParameterT<T>& param(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("no such parameter: " + name);
        return it->second;
    }
    bool has_param(const std::string& name) const { return params_.count(name) != 0; }

    std::vector<ParameterT<T>*> parameters() {
        std::vector<ParameterT<T>*> out;
        out.reserve(params_.size());
        for (auto& [k, v] : params_) out.push_back(&v);
        return out;
    }

    // Everything that is not a per-task head or adapter.
    std::vector<ParameterT<T>*> shared_parameters() {
        std::vector<ParameterT<T>*> out;
        for (auto& [k, v] : params_)
            if (!k.starts_with("head.") && !k.starts_with("adapter.")) out.push_back(&v);
        return out;
    }

    std::size_t total_param_count() const {
        std::size_t n = 0;
        for (const auto& [k, v] : params_) n += v.tensor.size();
        return n;
    }
    std::size_t backbone_param_count() const {
        std::size_t n = 0;
        for (const auto& [k, v] : params_)
            if (!k.starts_with("head.") && !k.starts_with("adapter.")) n += v.tensor.size();
        return n;
    }
    std::size_t trainable_param_count() const {
        std::size_t n = 0;
        for (const auto& [k, v] : params_)
            if (v.trainable) n += v.tensor.size();
        return n;
    }
    double trained_fraction() const {
        return static_cast<double>(trainable_param_count()) /
               static_cast<double>(total_param_count());
    }

    void set_trainable_all(bool flag) {
        for (auto& [k, v] : params_) v.trainable = flag;
    }
    void set_trainable_prefix(const std::string& prefix, bool flag) {
        bool any = false;
        for (auto& [k, v] : params_)
            if (k.starts_with(prefix)) {
                v.trainable = flag;
                any = true;
            }
        if (!any) throw MaskError("prefix matches no parameter: " + prefix);
    }

    // Marks every parameter matching one of the prefixes frozen and all
    // others trainable; returns the trained-parameter fraction.
    double apply_freeze_mask(const std::vector<std::string>& frozen_prefixes) {
        for (const auto& p : frozen_prefixes) {
            bool any = false;
            for (auto& [k, v] : params_)
                if (k.starts_with(p)) {
                    any = true;
                    break;
                }
            if (!any) throw MaskError("freeze mask prefix matches no parameter: " + p);
        }
        for (auto& [k, v] : params_) {
            bool frozen = false;
            for (const auto& p : frozen_prefixes)
                if (k.starts_with(p)) {
                    frozen = true;
                    break;
                }
            v.trainable = !frozen;
        }
        return trained_fraction();
    }

    static std::string layer_prefix(std::size_t l) {
        return "layer." + std::to_string(l) + ".";
    }

    // ---- heads ---------------------------------------------------------------

    void add_head(const std::string& task_id, HeadKind kind, std::size_t num_classes) {
        if (heads_.count(task_id)) throw HeadError("head already exists for " + task_id);
        std::size_t outputs = 0;
        switch (kind) {
            case HeadKind::Classifier:
            case HeadKind::MultiLabel: outputs = num_classes; break;
            case HeadKind::ChoiceScorer: outputs = 1; break;
        }
        if (outputs == 0) throw HeadError("head with zero outputs for " + task_id);
        const std::string p = head_prefix(task_id);
        add_normal(p + "weight", {cfg_.embed_dim, outputs}, seed_);
        add_zeros(p + "bias", {outputs});
        heads_[task_id] = HeadInfo{kind, outputs};
    }

    bool has_head(const std::string& task_id) const { return heads_.count(task_id) != 0; }
    const HeadInfo& head(const std::string& task_id) const {
        auto it = heads_.find(task_id);
        if (it == heads_.end()) throw HeadError("no head for task " + task_id);
        return it->second;
    }
    const std::map<std::string, HeadInfo>& heads() const { return heads_; }
    static std::string head_prefix(const std::string& task_id) {
        return "head." + task_id + ".";
    }

    // ---- adapters --------------------------------------------------------------

    // Registers one adapter pair (after attention, after FFN) per layer for
    // `task_id`. Up-projections start at zero so the adapted forward equals
    // the backbone forward until training moves them. Returns added params /
    // backbone params.
    double insert_adapters(const std::string& task_id, std::size_t reduction_factor) {
        if (adapters_.count(task_id))
            throw AdapterError("adapter set already registered for " + task_id);
        if (reduction_factor == 0 || cfg_.embed_dim % reduction_factor != 0)
            throw AdapterError("reduction factor must divide embed_dim");
        const std::size_t d = cfg_.embed_dim;
        const std::size_t b = d / reduction_factor;
        std::size_t added = 0;
        for (std::size_t l = 0; l < cfg_.num_layers; ++l)
            for (const char* site : {"attn", "ffn"}) {
                const std::string p = adapter_prefix(task_id, l, site);
                added += add_normal(p + "down.weight", {d, b}, seed_);
                added += add_zeros(p + "down.bias", {b});
                added += add_zeros(p + "up.weight", {b, d});
                added += add_zeros(p + "up.bias", {d});
            }
        adapters_[task_id] = reduction_factor;
        return static_cast<double>(added) / static_cast<double>(backbone_param_count());
    }

    bool has_adapters(const std::string& task_id) const {
        return adapters_.count(task_id) != 0;
    }
    const std::map<std::string, std::size_t>& adapters() const { return adapters_; }
    static std::string adapter_prefix(const std::string& task_id, std::size_t layer,
                                      const std::string& site) {
        return "adapter." + task_id + ".layer." + std::to_string(layer) + "." + site + ".";
    }

    static std::size_t adapter_param_count(std::size_t d, std::size_t r,
                                           std::size_t layers) {
        const std::size_t b = d / r;
        return layers * 2 * (d * b + b + b * d + d);
    }

    // ---- positional embeddings -------------------------------------------------

    // Tiles the positional table for one modality out to `new_length`: whole
    // copies of the original rows followed by a prefix. The original rows stay
    // bit-identical.
    void extend_positional_embeddings(char modality, std::size_t new_length) {
        const std::string name = modality == 'A' ? "pos.a" : "pos.b";
        auto& p = param(name);
        const std::size_t old_len = p.tensor.shape[0];
        const std::size_t d = p.tensor.shape[1];
        if (new_length < old_len)
            throw ExtendError("cannot shrink positional table from " +
                              std::to_string(old_len) + " to " + std::to_string(new_length));
        if (new_length == old_len) return;
        TensorT<T> ext(Shape{new_length, d});
        for (std::size_t i = 0; i < new_length; ++i)
            for (std::size_t j = 0; j < d; ++j)
                ext.data[i * d + j] = p.tensor.data[(i % old_len) * d + j];
        p.tensor = std::move(ext);
        if (modality == 'A')
            cfg_.max_tokens_a = new_length;
        else
            cfg_.max_tokens_b = new_length;
    }

    // ---- vacuous inputs ----------------------------------------------------------

    void set_mean_token_a(std::vector<T> mean) {
        if (mean.size() != cfg_.feat_dim_a)
            throw ShapeError("mean token size != feat_dim_a");
        mean_token_a_ = std::move(mean);
    }
    bool has_mean_token_a() const { return mean_token_a_.has_value(); }
    const std::vector<T>& mean_token_a() const {
        if (!mean_token_a_) throw StateError("mean token for modality A not computed");
        return *mean_token_a_;
    }

    // Placeholder batch for a missing modality: A gets copies of the corpus
    // mean token, B the fixed reserved phrase. n_tokens = 0 uses the config
    // budget for A.
    BatchT<T> vacuous_input(char modality, std::size_t batch_size,
                            std::size_t n_tokens = 0) const {
        BatchT<T> out;
        out.batch = batch_size;
        if (modality == 'A') {
            if (!mean_token_a_) throw StateError("mean token for modality A not computed");
            const std::size_t n = n_tokens ? n_tokens : cfg_.max_tokens_a;
            out.n_a = n;
            out.a.reserve(batch_size * n * cfg_.feat_dim_a);
            for (std::size_t i = 0; i < batch_size * n; ++i)
                out.a.insert(out.a.end(), mean_token_a_->begin(), mean_token_a_->end());
        } else if (modality == 'B') {
            out.n_b = 3;
            out.b.reserve(batch_size * 3);
            for (std::size_t i = 0; i < batch_size; ++i)
                for (std::size_t t : kVacuousPhrase) out.b.push_back(t);
        } else {
            throw ConfigError("vacuous_input: modality must be 'A' or 'B'");
        }
        return out;
    }

    // ---- forward ---------------------------------------------------------------

    // [CLS] ++ proj(A)+posA+typeA ++ embed(B)+posB+typeB
    Ref embed_inputs(Graph<T>& g, const BatchT<T>& batch) {
        const std::size_t B = batch.batch;
        const std::size_t d = cfg_.embed_dim;
        if (B == 0) throw ShapeError("embed_inputs: empty batch");
        if (batch.n_a > cfg_.max_tokens_a)
            throw TokenBudgetError("modality A over budget: " + std::to_string(batch.n_a) +
                                   " > " + std::to_string(cfg_.max_tokens_a));
        if (batch.n_b > cfg_.max_tokens_b)
            throw TokenBudgetError("modality B over budget: " + std::to_string(batch.n_b) +
                                   " > " + std::to_string(cfg_.max_tokens_b));
        std::vector<Ref> parts;
        Ref cls = g.add_broadcast(g.input(Shape{B, 1, d}, std::vector<T>(B * d, T(0))),
                                  g.param(param("embed.cls")));
        parts.push_back(cls);
        if (batch.n_a > 0) {
            if (batch.a.size() != B * batch.n_a * cfg_.feat_dim_a)
                throw ShapeError("embed_inputs: modality A data size mismatch");
            Ref xa = g.input(Shape{B, batch.n_a, cfg_.feat_dim_a}, batch.a);
            Ref pa = g.linear(xa, g.param(param("embed.proj_a.weight")),
                              g.param(param("embed.proj_a.bias")));
            pa = g.add_broadcast(pa, g.slice_rows(g.param(param("pos.a")), 0, batch.n_a));
            pa = g.add_broadcast(pa, g.param(param("embed.type_a")));
            parts.push_back(pa);
        }
        if (batch.n_b > 0) {
            if (batch.b.size() != B * batch.n_b)
                throw ShapeError("embed_inputs: modality B id count mismatch");
            Ref eb = g.embedding(g.param(param("embed.tok_b")), batch.b, B, batch.n_b);
            eb = g.add_broadcast(eb, g.slice_rows(g.param(param("pos.b")), 0, batch.n_b));
            eb = g.add_broadcast(eb, g.param(param("embed.type_b")));
            parts.push_back(eb);
        }
        return g.concat_seq(parts);
    }

    // Pre-norm transformer stack with optional per-task adapters after the
    // attention and FFN sublayers.
    Ref encode(Graph<T>& g, Ref seq, const std::string& task_id = "",
               bool adapters_enabled = false) {
        if (adapters_enabled && !adapters_.count(task_id))
            throw AdapterError("no adapter set for task " + task_id);
        Ref x = seq;
        for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
            const std::string p = layer_prefix(l);
            AttentionParams<T> ap{&param(p + "attn.wq.weight"), &param(p + "attn.wq.bias"),
                                  &param(p + "attn.wk.weight"), &param(p + "attn.wk.bias"),
                                  &param(p + "attn.wv.weight"), &param(p + "attn.wv.bias"),
                                  &param(p + "attn.wo.weight"), &param(p + "attn.wo.bias")};
            Ref h = g.layer_norm(x, g.param(param(p + "ln1.gamma")),
                                 g.param(param(p + "ln1.beta")), T(cfg_.ln_eps));
            h = multi_head_attention(g, h, ap, cfg_.num_heads);
            if (adapters_enabled) h = adapter_forward(g, h, task_id, l, "attn");
            x = g.add(x, h);
            Ref f = g.layer_norm(x, g.param(param(p + "ln2.gamma")),
                                 g.param(param(p + "ln2.beta")), T(cfg_.ln_eps));
            f = g.linear(f, g.param(param(p + "ffn.w1.weight")),
                         g.param(param(p + "ffn.w1.bias")));
            f = g.gelu(f);
            f = g.linear(f, g.param(param(p + "ffn.w2.weight")),
                         g.param(param(p + "ffn.w2.bias")));
            if (adapters_enabled) f = adapter_forward(g, f, task_id, l, "ffn");
            x = g.add(x, f);
        }
        return g.layer_norm(x, g.param(param("final_ln.gamma")),
                            g.param(param("final_ln.beta")), T(cfg_.ln_eps));
    }

    // CLS pooling (row 0) followed by the task head.
    Ref pool_and_predict(Graph<T>& g, Ref encoded, const std::string& task_id) {
        const HeadInfo& h = head(task_id);
        Ref pooled = g.select_token(encoded, 0);
        const std::string p = head_prefix(task_id);
        Ref logits = g.linear(pooled, g.param(param(p + "weight")),
                              g.param(param(p + "bias")));
        (void)h;
        return logits;
    }

    Ref forward_logits(Graph<T>& g, const BatchT<T>& batch, const std::string& task_id,
                       bool adapters_enabled = false) {
        return pool_and_predict(g, encode(g, embed_inputs(g, batch), task_id,
                                          adapters_enabled),
                                task_id);
    }

  private:
    Ref adapter_forward(Graph<T>& g, Ref h, const std::string& task_id, std::size_t layer,
                        const std::string& site) {
        const std::string p = adapter_prefix(task_id, layer, site);
        Ref z = g.linear(h, g.param(param(p + "down.weight")),
                         g.param(param(p + "down.bias")));
        z = g.gelu(z);
        z = g.linear(z, g.param(param(p + "up.weight")), g.param(param(p + "up.bias")));
        return g.add(h, z);
    }

    std::size_t add_normal(const std::string& name, Shape shape, std::uint64_t seed) {
        auto t = seeded_normal_init<T>(shape, 0.0, 0.02,
                                       Rng::derive(seed, name).next_u64());
        std::size_t n = t.size();
        params_.emplace(name, ParameterT<T>(name, std::move(t)));
        return n;
    }
    std::size_t add_zeros(const std::string& name, Shape shape) {
        TensorT<T> t(shape, T(0));
        std::size_t n = t.size();
        params_.emplace(name, ParameterT<T>(name, std::move(t)));
        return n;
    }
    std::size_t add_ones(const std::string& name, Shape shape) {
        TensorT<T> t(shape, T(1));
        std::size_t n = t.size();
        params_.emplace(name, ParameterT<T>(name, std::move(t)));
        return n;
    }

    EncoderConfig cfg_;
    std::uint64_t seed_ = 0;
    std::map<std::string, ParameterT<T>> params_;
    std::map<std::string, HeadInfo> heads_;
    std::map<std::string, std::size_t> adapters_;  // task -> reduction factor
    std::optional<std::vector<T>> mean_token_a_;
};

using Model = ModelT<float>;

}  // namespace mmcl
