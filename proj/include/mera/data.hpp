#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mera/tensor.hpp"

namespace mera {

// Synthetic modality family. One shared latent space carries the task
// semantics: both task rules are linear argmax rules over the latent, and
// the latent draws for a given (task, split) depend only on the global task
// seed. Modalities differ only in how the latent is rendered into an
// observation: x = tanh(A z) + noise, with A and the noise seeded per
// modality.

inline const std::vector<std::string> kTasks = {"capA", "qaA"};

struct ModalitySpec {
    std::string id;
    std::int64_t input_dim = 0;
    std::uint64_t render_seed = 0;
    double noise_sigma = 0.05;
};

struct DataShape {
    std::int64_t latent_dim = 16;
    std::int64_t classes = 8;
    std::int64_t train_per_task = 2000;
    std::int64_t test_per_task = 500;
};

struct SplitData {
    Tensor inputs; // [n, input_dim]
    std::vector<int> labels;
};

struct TaskData {
    std::string task;
    SplitData train;
    SplitData test;
};

struct ModalityDataset {
    std::string modality;
    std::int64_t input_dim = 0;
    std::vector<TaskData> tasks;

    std::int64_t train_total() const;
    const TaskData& task(const std::string& name) const;
};

ModalityDataset generate_modality(const ModalitySpec& spec, const DataShape& shape,
                                  const std::vector<std::string>& tasks,
                                  std::uint64_t global_task_seed);

// ---- replay ----

struct ReplayItem {
    std::string modality;
    std::string task;
    std::int64_t row = 0; // index into the source train split
    std::vector<float> input;
    int label = 0;
};

struct ReplaySet {
    double fraction = 0.0;
    std::vector<ReplayItem> items;

    std::int64_t count_for(const std::string& modality) const;
    std::int64_t count_for(const std::string& modality, const std::string& task) const;
};

// Samples fraction r of the pooled learned data. The budget
// T = ceil(r * total) is split across modalities by largest remainder, then
// across each modality's task datasets the same way, so every count sits
// within 1 of exact proportionality. A modality whose share would round to
// nothing still contributes one sample. Within a dataset the rows are drawn
// uniformly without replacement. include_current=false drops the newest
// dataset (the one being learned) from the pool.
ReplaySet sample_replay(const std::vector<const ModalityDataset*>& learned, double fraction,
                        std::uint64_t seed, bool include_current);

// Relabels floor(p * n) items, chosen uniformly without replacement, with a
// label drawn uniformly from the original labels of other items of the same
// task. Items with no donor stay unchanged.
ReplaySet corrupt_mispair(const ReplaySet& replay, double p, std::uint64_t seed);

} // namespace mera
