#pragma once

#include <map>
#include <string>
#include <vector>

#include "mera/data.hpp"
#include "mera/model.hpp"

namespace mera {

// Scores live in one table: expert reference scores per (modality, task)
// and continual scores per (stage, modality, task). Stages are 1-based and
// follow the learning order the table is constructed with.
class ScoreTable {
public:
    ScoreTable(std::vector<std::string> order, std::vector<std::string> tasks);

    const std::vector<std::string>& order() const { return order_; }
    const std::vector<std::string>& tasks() const { return tasks_; }
    int stages() const { return static_cast<int>(order_.size()); }

    void add_sup(const std::string& modality, const std::string& task, double score);
    void add_score(int stage, const std::string& modality, const std::string& task, double score);

    bool has_sup(const std::string& modality, const std::string& task) const;
    bool has_score(int stage, const std::string& modality, const std::string& task) const;
    double sup(const std::string& modality, const std::string& task) const;
    double score(int stage, const std::string& modality, const std::string& task) const;

private:
    std::vector<std::string> order_;
    std::vector<std::string> tasks_;
    std::map<std::string, double> sup_;
    std::map<std::string, double> scores_;
};

// percent of expert performance retained on modality j at stage i, averaged
// over tasks; above 100 stays above 100
double relative_gain(const ScoreTable& t, int stage, const std::string& modality);

// mean gain over the modalities learned before stage i; 100 by convention
// when there is nothing behind yet
double bw_relative_gain(const ScoreTable& t, int stage);

// gain on the modality stage i just learned
double fw_relative_gain(const ScoreTable& t, int stage);

struct GainReport {
    std::vector<double> bw; // index 0 is stage 1
    std::vector<double> fw;
    double bw_mean = 0.0;
    double bw_std = 0.0; // population, the stage-1 convention value included
    double fw_mean = 0.0;
    double fw_std = 0.0;
};

GainReport aggregate(const ScoreTable& t, int stages);

// argmax accuracy over a test split, ties to the lowest class index
double score_accuracy(const MultimodalModel& m, const std::string& modality,
                      const std::string& task, const SplitData& split);

} // namespace mera
