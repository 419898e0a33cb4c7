#pragma once

#include <map>
#include <string>
#include <vector>

#include "mera/data.hpp"
#include "mera/model.hpp"
#include "mera/optim.hpp"
#include "mera/rng.hpp"

namespace mera {

// Hyperparameters for the three training processes a stage can run. The
// pretraining phase fits the new connector alone on the captioning split,
// the finetuning phase opens the backbone and heads on both splits, and
// realigning revisits all connectors on a replay mix. Heads share the
// backbone learning rate.
struct TrainParams {
    OptKind optimizer = OptKind::adam;
    double warmup_ratio = 0.03;
    int pretrain_epochs = 3;
    int finetune_epochs = 4;
    int realign_epochs = 1;
    std::int64_t pretrain_batch = 128;
    std::int64_t finetune_batch = 16;
    std::int64_t realign_batch = 16;
    double lr_connector_pretrain = 3e-3;
    double lr_connector_finetune = 1e-3;
    double lr_backbone = 3e-3;
    double lr_connector_realign = 1e-3;
};

// Everything a stage needs to know about where it sits in the run. Seeds
// are roots: each consumer derives its own stream from (seed, stage), so
// offline reruns of a single stage reproduce the in-process bytes.
struct StageContext {
    int stage = 1; // 1-based
    std::vector<std::string> order;
    std::string method = "ft";
    double replay_fraction = 0.10;
    double mispair_fraction = 0.0;
    double lambda = 1.0;
    bool realign_flag = false;
    std::uint64_t init_seed = 0;
    std::uint64_t shuffle_seed = 0;
    std::uint64_t replay_seed = 0;
    std::uint64_t fisher_seed = 0;
    TrainParams train;

    const std::string& current() const;
};

// replay sampling seed for one stage, shared by the in-process runner and
// the offline subcommands
std::uint64_t stage_replay_seed(std::uint64_t replay_seed, int stage);

// the replay mix a stage draws: fraction and seed from the context, then
// the optional mispairing corruption; offline reruns call this to land on
// the same items the in-process stage saw
ReplaySet stage_replay(const std::vector<const ModalityDataset*>& history,
                       const StageContext& ctx, bool include_current);

// ---- batching ----
// A group is a homogeneous slice of samples (one modality, one task); a
// batch never mixes groups because each (modality, task) pair routes
// through its own forward stack. The planner shuffles rows within every
// group, carves them into batches, then shuffles the batch order, which is
// as close to a joint shuffle as routing allows.
struct SampleGroup {
    std::string modality;
    std::string task;
    Tensor inputs; // [n, input_dim]
    std::vector<int> labels;
};

struct Batch {
    std::string modality;
    std::string task;
    Tensor inputs;
    std::vector<int> labels;
};

std::vector<Batch> plan_batches(const std::vector<SampleGroup>& groups, std::int64_t batch_size,
                                Rng& rng);

// replay items regrouped by (modality, task) in sorted order
std::vector<SampleGroup> replay_groups(const ReplaySet& replay);

// mean cross entropy of a split under the current parameters, no training
double eval_loss(const MultimodalModel& m, const std::string& modality, const std::string& task,
                 const SplitData& split);

// ---- fisher / ewc ----
struct FisherSnapshot {
    int stage = 0;
    std::map<std::string, Tensor> fisher; // diagonal, backbone+head namespace
    std::map<std::string, Tensor> anchor; // parameter values at snapshot time
};

struct FisherState {
    std::vector<FisherSnapshot> snaps;
};

// diagonal Fisher from per-sample gradients: F[p] = mean over samples of
// grad(p)^2, on the backbone+head namespace
FisherSnapshot fisher_estimate(const MultimodalModel& m, const std::vector<SampleGroup>& samples,
                               int stage);

// quadratic penalty sum_j (lambda/2) F_j (theta - anchor)^2 against the most
// recent anchor; zero with an empty history
double ewc_penalty(const ParameterSet& ps, const FisherState& hist, double lambda);
double ewc_loss(double base_loss, const ParameterSet& ps, const FisherState& hist, double lambda);
// analytic gradient of the penalty, accumulated into entry grads
void ewc_accumulate_grads(ParameterSet& ps, const FisherState& hist, double lambda);

// ---- stage procedures ----
MultimodalModel train_stage_standard(const MultimodalModel& prev, const ModalityDataset& cur,
                                     const StageContext& ctx);

struct MergeRecord {
    int stage = 0;
    double keep_coeff = 0.0; // on the previous model
    double new_coeff = 1.0;  // on the fresh vanilla model
    std::vector<std::string> merged;       // averaged backbone+head names
    std::vector<std::string> carried_prev; // old modality components
    std::vector<std::string> carried_new;  // current modality components
};

// stage-indexed average of the shared namespaces; modality components are
// never averaged, old ones come from prev and new ones from vanilla
MultimodalModel merge(const MultimodalModel& prev, const MultimodalModel& vanilla, int stage,
                      MergeRecord* rec = nullptr);

// connector-only pass over the replay mix; everything else bitwise frozen
MultimodalModel realign(const MultimodalModel& merged, const ReplaySet& replay,
                        const StageContext& ctx);

// Intermediate products of a merge-realign stage, kept so a run can
// persist the vanilla model alongside the stage result and an offline
// merge can be replayed against it later.
struct StageArtifacts {
    bool has_vanilla = false;
    MultimodalModel vanilla;
    bool has_merge = false;
    MergeRecord merge_rec;
};

// One continual stage of the chosen method; history holds the datasets of
// stages 1..i in learning order, the last one being the current stage's.
// prev is the finished previous-stage model, still without the current
// modality: its fresh components are registered here, which is what lets
// merge tell carried components from new ones by presence. fisher carries
// EWC state across stages and may be null for other methods.
MultimodalModel run_method_stage(const MultimodalModel& prev,
                                 const std::vector<const ModalityDataset*>& history,
                                 const StageContext& ctx, FisherState* fisher,
                                 StageArtifacts* artifacts = nullptr);

// ---- diagnosis ----
struct MisalignmentEntry {
    std::string modality;
    double drift = 0.0;
    double loss_before = 0.0;
    double loss_after = 0.0;
};

// drift of each old modality's representation plus the effect a realign
// pass would have on its test loss; operates on a copy of the model
std::vector<MisalignmentEntry> diagnose_misalignment(
    const MultimodalModel& m, const std::vector<FeatureProbe>& learn_probes,
    const std::vector<FeatureProbe>& current_probes,
    const std::vector<const ModalityDataset*>& history, const StageContext& ctx);

} // namespace mera
