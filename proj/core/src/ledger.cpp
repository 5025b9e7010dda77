#include "mmcl/ledger.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mmcl {

namespace fs = std::filesystem;

// ---- binary helpers ------------------------------------------------------------

namespace {

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw CheckpointError("truncated checkpoint");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint8_t>(buf[pos]) |
                          (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos + 1]))
                           << 8);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

std::string hexfloat(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%a", v);
    return buf;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t config_hash(const EncoderConfig& cfg) { return fnv1a64(cfg.canonical_text()); }

// ---- checkpoints ------------------------------------------------------------

namespace {

TextConfig build_metadata(Model& model,
                          const std::map<std::string, std::string>& provenance) {
    TextConfig meta;
    const EncoderConfig& cfg = model.config();
    meta.set("config", "embed_dim", std::to_string(cfg.embed_dim));
    meta.set("config", "num_layers", std::to_string(cfg.num_layers));
    meta.set("config", "num_heads", std::to_string(cfg.num_heads));
    meta.set("config", "ffn_dim", std::to_string(cfg.ffn()));
    meta.set("config", "max_tokens_a", std::to_string(cfg.max_tokens_a));
    meta.set("config", "max_tokens_b", std::to_string(cfg.max_tokens_b));
    meta.set("config", "vocab_b", std::to_string(cfg.vocab_b));
    meta.set("config", "feat_dim_a", std::to_string(cfg.feat_dim_a));
    meta.set("config", "ln_eps", TextConfig::format_double(cfg.ln_eps));
    meta.set("config", "seed", std::to_string(model.seed()));
    std::vector<std::string> frozen;
    for (auto* p : model.parameters())
        if (!p->trainable) frozen.push_back(p->name);
    meta.set("frozen", "names", TextConfig::join_list(frozen));
    for (const auto& [task, info] : model.heads())
        meta.set("heads", task,
                 head_kind_name(info.kind) + "," + std::to_string(info.outputs));
    for (const auto& [task, r] : model.adapters())
        meta.set("adapters", task, std::to_string(r));
    meta.set("mean", "present", model.has_mean_token_a() ? "1" : "0");
    if (model.has_mean_token_a()) {
        std::string vals;
        for (float v : model.mean_token_a()) {
            if (!vals.empty()) vals += " ";
            vals += hexfloat(static_cast<double>(v));
        }
        meta.set("mean", "values", vals);
    }
    for (const auto& [k, v] : provenance) meta.set("provenance", k, v);
    return meta;
}

EncoderConfig config_from_meta(const TextConfig& meta) {
    EncoderConfig cfg;
    cfg.embed_dim = meta.get_u64("config", "embed_dim");
    cfg.num_layers = meta.get_u64("config", "num_layers");
    cfg.num_heads = meta.get_u64("config", "num_heads");
    cfg.ffn_dim = meta.get_u64("config", "ffn_dim");
    cfg.max_tokens_a = meta.get_u64("config", "max_tokens_a");
    cfg.max_tokens_b = meta.get_u64("config", "max_tokens_b");
    cfg.vocab_b = meta.get_u64("config", "vocab_b");
    cfg.feat_dim_a = meta.get_u64("config", "feat_dim_a");
    cfg.ln_eps = meta.get_double("config", "ln_eps");
    return cfg;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

void save_checkpoint(Model& model, const std::string& path,
                     const std::map<std::string, std::string>& provenance) {
    std::string out;
    out += "CLMB";
    put_u32(out, kCheckpointVersion);
    put_u64(out, config_hash(model.config()));
    auto params = model.parameters();  // sorted by name
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        if (p->name.size() > 0xffff) throw CheckpointError("tensor name too long");
        put_u16(out, static_cast<std::uint16_t>(p->name.size()));
        out += p->name;
        out.push_back(static_cast<char>(p->tensor.shape.size()));
        for (std::size_t d : p->tensor.shape) put_u64(out, d);
        for (float v : p->tensor.data) put_f32(out, v);
    }
    const std::string meta = build_metadata(model, provenance).write();
    put_u32(out, static_cast<std::uint32_t>(meta.size()));
    out += meta;

    if (!fs::path(path).parent_path().empty())
        fs::create_directories(fs::path(path).parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Model load_checkpoint(const std::string& path) {
    const std::string buf = read_file(path);
    Reader rd{buf};
    if (rd.bytes(4) != "CLMB") throw CheckpointError("bad magic in " + path);
    const std::uint32_t version = rd.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t stored_hash = rd.u64();

    struct RawTensor {
        std::string name;
        Shape shape;
        std::vector<float> data;
    };
    const std::uint32_t count = rd.u32();
    std::vector<RawTensor> tensors(count);
    for (auto& t : tensors) {
        t.name = rd.bytes(rd.u16());
        const std::uint8_t rank = rd.u8();
        t.shape.resize(rank);
        std::size_t n = 1;
        for (auto& d : t.shape) {
            d = rd.u64();
            n *= d;
        }
        t.data.resize(n);
        for (auto& v : t.data) v = rd.f32();
    }
    const TextConfig meta = TextConfig::parse(rd.bytes(rd.u32()));

    const EncoderConfig cfg = config_from_meta(meta);
    if (config_hash(cfg) != stored_hash)
        throw CheckpointError("config hash mismatch in " + path);

    Model model(cfg, meta.get_u64("config", "seed"));
    if (meta.has_section("heads"))
        for (const auto& [task, desc] : meta.sections().at("heads")) {
            const auto comma = desc.find(',');
            model.add_head(task, head_kind_from_name(desc.substr(0, comma)),
                           std::stoull(desc.substr(comma + 1)));
        }
    if (meta.has_section("adapters"))
        for (const auto& [task, r] : meta.sections().at("adapters"))
            model.insert_adapters(task, std::stoull(r));

    for (auto& t : tensors) {
        if (!model.has_param(t.name))
            throw CheckpointError("unknown tensor in checkpoint: " + t.name);
        auto& p = model.param(t.name);
        if (p.tensor.shape != t.shape)
            throw CheckpointError("shape mismatch for tensor " + t.name);
        p.tensor.data = std::move(t.data);
    }

    model.set_trainable_all(true);
    for (const auto& name : TextConfig::split_list(meta.get("frozen", "names")))
        model.param(name).trainable = false;
    if (meta.get("mean", "present") == "1") {
        std::istringstream ms(meta.get("mean", "values"));
        std::vector<float> mean;
        std::string tok;
        while (ms >> tok)
            mean.push_back(static_cast<float>(std::strtod(tok.c_str(), nullptr)));
        model.set_mean_token_a(std::move(mean));
    }
    return model;
}

TextConfig read_checkpoint_meta(const std::string& path) {
    const std::string buf = read_file(path);
    Reader rd{buf};
    if (rd.bytes(4) != "CLMB") throw CheckpointError("bad magic in " + path);
    rd.u32();
    rd.u64();
    const std::uint32_t count = rd.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        rd.bytes(rd.u16());
        const std::uint8_t rank = rd.u8();
        std::size_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) n *= rd.u64();
        rd.bytes(n * 4);
    }
    return TextConfig::parse(rd.bytes(rd.u32()));
}

// ---- score logs ------------------------------------------------------------

const char* const kScoreLogHeader =
    "experiment_id,algorithm,evaluated_task,checkpoint_after_task,regime,seed,"
    "score_metric,score";

namespace {

std::string record_key(const ScoreRecord& r) {
    return r.experiment_id + "," + r.algorithm + "," + r.evaluated_task + "," +
           r.checkpoint_after_task + "," + r.regime + "," + std::to_string(r.seed) + "," +
           r.score_metric;
}

void check_field(const std::string& v) {
    if (v.find(',') != std::string::npos || v.find('\n') != std::string::npos)
        throw LedgerError("score log field may not contain ',' or newline: " + v);
}

}  // namespace

std::vector<ScoreRecord> read_score_log(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw LedgerError("empty score log " + path);
    if (line != kScoreLogHeader) throw LedgerError("unexpected score log header in " + path);
    std::vector<ScoreRecord> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                fields.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        fields.push_back(cur);
        if (fields.size() != 8) throw LedgerError("malformed score log row: " + line);
        ScoreRecord r;
        r.experiment_id = fields[0];
        r.algorithm = fields[1];
        r.evaluated_task = fields[2];
        r.checkpoint_after_task = fields[3];
        r.regime = fields[4];
        r.seed = std::stoull(fields[5]);
        r.score_metric = fields[6];
        r.score = std::stod(fields[7]);
        out.push_back(std::move(r));
    }
    return out;
}

void append_scores(const std::string& path, const std::vector<ScoreRecord>& records) {
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    std::vector<ScoreRecord> existing;
    if (!fresh) existing = read_score_log(path);
    std::vector<std::string> keys;
    for (const auto& r : existing) keys.push_back(record_key(r));

    std::ofstream f(path, std::ios::binary | std::ios::app);
    if (!f) throw IoError("cannot write " + path);
    if (fresh) f << kScoreLogHeader << "\n";
    for (const auto& r : records) {
        for (const auto& v : {r.experiment_id, r.algorithm, r.evaluated_task,
                              r.checkpoint_after_task, r.regime, r.score_metric})
            check_field(v);
        const std::string key = record_key(r);
        if (std::find(keys.begin(), keys.end(), key) != keys.end())
            throw LedgerError("duplicate score record: " + key);
        keys.push_back(key);
        f << r.experiment_id << "," << r.algorithm << "," << r.evaluated_task << ","
          << r.checkpoint_after_task << "," << r.regime << "," << r.seed << ","
          << r.score_metric << "," << TextConfig::format_double(r.score) << "\n";
    }
}

void append_score(const std::string& path, const ScoreRecord& record) {
    append_scores(path, {record});
}

// ---- report files ------------------------------------------------------------

namespace {

std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string cell(const MetricCell& c) { return fmt2(c.value) + " [" + fmt2(c.raw) + "]"; }

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    return f;
}

}  // namespace

void write_report(const MetricReport& report, const std::string& dir) {
    fs::create_directories(dir);

    {
        auto f = open_out(dir + "/knowledge_transfer.csv");
        f << "algorithm,task,transfer,score\n";
        for (const auto& [alg, rep] : report.algorithms)
            for (const auto& task : report.task_order) {
                auto it = rep.knowledge_transfer.find(task);
                if (it == rep.knowledge_transfer.end()) continue;
                f << alg << "," << task << "," << TextConfig::format_double(it->second.value)
                  << "," << TextConfig::format_double(it->second.raw) << "\n";
            }
    }
    {
        auto f = open_out(dir + "/forgetting.csv");
        f << "algorithm,evaluated_task,checkpoint_after_task,forgetting,score\n";
        for (const auto& [alg, rep] : report.algorithms)
            for (const auto& [task, row] : rep.forgetting)
                for (const auto& [after, c] : row)
                    f << alg << "," << task << "," << after << ","
                      << TextConfig::format_double(c.value) << ","
                      << TextConfig::format_double(c.raw) << "\n";
    }
    {
        auto f = open_out(dir + "/low_shot.csv");
        f << "algorithm,task,checkpoint_after_task,transfer,score\n";
        for (const auto& [alg, rep] : report.algorithms)
            for (const auto& [task, row] : rep.low_shot)
                for (const auto& [after, c] : row)
                    f << alg << "," << task << "," << after << ","
                      << TextConfig::format_double(c.value) << ","
                      << TextConfig::format_double(c.raw) << "\n";
    }
    {
        auto f = open_out(dir + "/summary.txt");
        f << "seeds: " << report.num_seeds << "\n\n";
        f << "random baselines:\n";
        for (const auto& [task, s] : report.random_baselines)
            f << "  " << task << ": " << fmt2(s) << "\n";
        f << "\ndirect fine-tuning baselines (mean +/- std over seeds):\n";
        for (const auto& [task, s] : report.direct_scores)
            f << "  " << task << ": " << fmt2(s) << " +/- "
              << fmt2(report.direct_std.count(task) ? report.direct_std.at(task) : 0.0)
              << "\n";
        if (!report.lowshot_direct_scores.empty()) {
            f << "\nlow-shot direct baselines (mean +/- std over seeds):\n";
            for (const auto& [task, s] : report.lowshot_direct_scores)
                f << "  " << task << ": " << fmt2(s) << " +/- "
                  << fmt2(report.lowshot_direct_std.count(task)
                              ? report.lowshot_direct_std.at(task)
                              : 0.0)
                  << "\n";
        }
        for (const auto& [alg, rep] : report.algorithms) {
            f << "\n== " << alg << " ==\n";
            f << "knowledge transfer (value [raw score]):\n";
            for (const auto& task : report.task_order) {
                auto it = rep.knowledge_transfer.find(task);
                if (it == rep.knowledge_transfer.end()) continue;
                f << "  " << task << ": " << cell(it->second);
                auto sd = rep.raw_std.find(task);
                if (sd != rep.raw_std.end()) f << " +/- " << fmt2(sd->second);
                f << "\n";
            }
            if (!rep.forgetting.empty()) {
                f << "forgetting (value [raw score]):\n";
                for (const auto& [task, row] : rep.forgetting)
                    for (const auto& [after, c] : row)
                        f << "  " << task << " after " << after << ": " << cell(c) << "\n";
            }
            if (!rep.low_shot.empty()) {
                f << "low-shot transfer (value [raw score]):\n";
                for (const auto& [task, row] : rep.low_shot)
                    for (const auto& [after, c] : row)
                        f << "  " << task << " after " << after << ": " << cell(c) << "\n";
            }
        }
    }
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<std::vector<std::string>> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                fields.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        fields.push_back(cur);
        out.push_back(std::move(fields));
    }
    return out;
}

}  // namespace mmcl
