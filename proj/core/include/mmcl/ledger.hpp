#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmcl/metrics.hpp"
#include "mmcl/model.hpp"
#include "mmcl/textcfg.hpp"

namespace mmcl {

// ---- checkpoints ------------------------------------------------------------
// Binary layout: magic "CLMB", u32 format version, u64 FNV-1a hash of the
// encoder config's canonical text, u32 tensor count, then per tensor a u16
// name length + name, u8 rank, u64 dims and the little-endian f32 payload.
// A length-prefixed structured-text metadata block (heads, adapters, frozen
// parameters, mean token, provenance) follows the tensors. Writing is fully
// deterministic, so save(load(f)) reproduces f byte for byte.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::uint64_t fnv1a64(const std::string& text);
std::uint64_t config_hash(const EncoderConfig& cfg);

void save_checkpoint(Model& model, const std::string& path,
                     const std::map<std::string, std::string>& provenance = {});

// Reconstructs the model (config, heads, adapters, freeze flags, mean token)
// from the file. Throws CheckpointError on bad magic, version, or a config
// hash that does not match the stored config text.
Model load_checkpoint(const std::string& path);

// Metadata only, without materializing tensors.
TextConfig read_checkpoint_meta(const std::string& path);

// ---- score logs ------------------------------------------------------------
// Append-only CSV with the fixed header
// experiment_id,algorithm,evaluated_task,checkpoint_after_task,regime,seed,score_metric,score

extern const char* const kScoreLogHeader;

// Creates the file with its header when missing. A record whose key fields
// (everything except the score) already exist raises LedgerError.
void append_score(const std::string& path, const ScoreRecord& record);
void append_scores(const std::string& path, const std::vector<ScoreRecord>& records);
std::vector<ScoreRecord> read_score_log(const std::string& path);

// ---- report files ------------------------------------------------------------
// knowledge_transfer.csv, forgetting.csv, low_shot.csv plus a human-readable
// summary.txt with "value [raw]" cells.

void write_report(const MetricReport& report, const std::string& dir);

// Generic comma-split reader used by the report round-trip checks.
std::vector<std::vector<std::string>> read_csv(const std::string& path);

}  // namespace mmcl
