#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mera/clmethods.hpp"
#include "mera/data.hpp"
#include "mera/metrics.hpp"
#include "mera/model.hpp"

namespace mera {

// Full description of one continual run. Every field maps to one flat
// dotted config key; parse_config_file reads `key = value` lines on top of
// the defaults and apply_override handles a single key, which is also how
// CLI flags land. The modality roster is fixed (image, video, audio,
// point); `order` picks which of them run and in what sequence.
struct RunConfig {
    std::string method = "mera";
    std::string order = "sequential"; // preset or comma-separated ids
    std::string out_dir = "out";
    std::string experts_dir;          // empty: <out>/experts

    double replay_fraction = 0.10;
    double mispair_fraction = 0.0;
    double lambda = 1.0;
    bool realign_flag = false;

    DataShape shape;                  // latent 16, 8 classes, 2000/500
    std::vector<ModalitySpec> roster; // the four synthetic modalities
    ModelDims dims;                   // hidden/feat/embed 32, heads from shape

    TrainParams train;

    // one master seed; unset named seeds derive from it
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> seed_data;
    std::optional<std::uint64_t> seed_init;
    std::optional<std::uint64_t> seed_shuffle;
    std::optional<std::uint64_t> seed_replay;
    std::optional<std::uint64_t> seed_fisher;

    std::uint64_t data_seed() const;
    std::uint64_t init_seed() const;
    std::uint64_t shuffle_seed() const;
    std::uint64_t replay_seed() const;
    std::uint64_t fisher_seed() const;
    std::string resolved_experts_dir() const;
};

RunConfig default_config();

// every recognized key, sorted, with its current value rendered as text
std::map<std::string, std::string> config_echo(const RunConfig& cfg);

// set one key; unknown key or unparseable value throws ConfigError naming it
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

// `key = value` lines over the defaults; '#' starts a comment
RunConfig parse_config_file(const std::string& path);

// invariant check: known method, resolvable order, positive dims and
// counts, fractions in range; throws ConfigError with the field path
void validate_config(const RunConfig& cfg);

// order preset or explicit list -> distinct roster ids, at least one
std::vector<std::string> resolve_order(const RunConfig& cfg);

// the ordered datasets for one run, generated from the config seeds
std::vector<ModalityDataset> build_datasets(const RunConfig& cfg);

// stage context for stage i (1-based) under this config
StageContext stage_context(const RunConfig& cfg, int stage);

// ---- checkpoints ----
// Layout: magic "MERA", one version byte, a u32-length-prefixed UTF-8
// JSON metadata document, then one record per parameter in name order:
// u32 name length, name bytes, u32 rank, i64 extents, f32 values. All
// integers and floats little-endian. Decode errors throw FormatError
// naming the byte offset.

inline constexpr std::uint8_t kCheckpointVersion = 1;

void save_checkpoint(const MultimodalModel& m, const nlohmann::json& extra_meta,
                     const std::string& path);

struct LoadedCheckpoint {
    MultimodalModel model;
    nlohmann::json meta;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// ---- experts ----
// Upper-bound reference scores: one single-modality model per modality,
// trained with the standard stage recipe from the same base weights as the
// run. Scores are cached as CSV in the experts directory and only missing
// modalities are trained.
std::map<std::string, std::map<std::string, double>> ensure_experts(
    const RunConfig& cfg, const std::vector<ModalityDataset>& data);

// ---- run orchestration ----
struct RunResult {
    std::vector<std::string> order;
    ScoreTable table;
    GainReport report;
};

// Executes all stages of cfg.method over the resolved order, evaluating
// every learned modality after each stage. Artifacts land under
// cfg.out_dir: scores.csv (one row per stage/modality/task, appended as
// stages finish), summary.json (rewritten after each stage), per-stage
// checkpoints, and log.txt, the only file carrying timestamps.
RunResult run_experiment(const RunConfig& cfg);

// rebuild a score table from a run directory's scores.csv; the learning
// order is recovered from first-appearance stages
RunResult recompute_from_csv(const std::string& run_dir);

// ---- cli ----
// meralab run|experts|merge|realign|eval|report; returns the process exit
// status: 0 success, 1 runtime failure, 2 usage error.
int cli_main(int argc, const char* const* argv);

} // namespace mera
