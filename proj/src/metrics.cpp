#include "mera/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "mera/error.hpp"
#include "mera/tensor.hpp"

namespace mera {

namespace {

std::string sup_key(const std::string& modality, const std::string& task) {
    return modality + "\x1f" + task;
}

std::string score_key(int stage, const std::string& modality, const std::string& task) {
    return std::to_string(stage) + "\x1f" + modality + "\x1f" + task;
}

} // namespace

ScoreTable::ScoreTable(std::vector<std::string> order, std::vector<std::string> tasks)
    : order_(std::move(order)), tasks_(std::move(tasks)) {
    if (order_.empty()) throw ArgumentError("score table needs a learning order");
    if (tasks_.empty()) throw ArgumentError("score table needs at least one task");
    for (std::size_t i = 0; i < order_.size(); ++i)
        for (std::size_t j = i + 1; j < order_.size(); ++j)
            if (order_[i] == order_[j])
                throw ArgumentError("learning order repeats modality '" + order_[i] + "'");
}

void ScoreTable::add_sup(const std::string& modality, const std::string& task, double score) {
    if (!std::isfinite(score)) throw ArgumentError("expert score must be finite");
    auto [it, fresh] = sup_.emplace(sup_key(modality, task), score);
    (void)it;
    if (!fresh)
        throw ArgumentError("expert score for " + modality + "/" + task + " already recorded");
}

void ScoreTable::add_score(int stage, const std::string& modality, const std::string& task,
                           double score) {
    if (stage < 1 || stage > stages())
        throw ArgumentError("stage " + std::to_string(stage) + " outside learning order");
    if (!std::isfinite(score)) throw ArgumentError("score must be finite");
    auto [it, fresh] = scores_.emplace(score_key(stage, modality, task), score);
    (void)it;
    if (!fresh)
        throw ArgumentError("score for stage " + std::to_string(stage) + " " + modality + "/" +
                            task + " already recorded");
}

bool ScoreTable::has_sup(const std::string& modality, const std::string& task) const {
    return sup_.count(sup_key(modality, task)) != 0;
}

bool ScoreTable::has_score(int stage, const std::string& modality, const std::string& task) const {
    return scores_.count(score_key(stage, modality, task)) != 0;
}

double ScoreTable::sup(const std::string& modality, const std::string& task) const {
    auto it = sup_.find(sup_key(modality, task));
    if (it == sup_.end())
        throw StateError("no expert score for " + modality + "/" + task);
    return it->second;
}

double ScoreTable::score(int stage, const std::string& modality, const std::string& task) const {
    auto it = scores_.find(score_key(stage, modality, task));
    if (it == scores_.end())
        throw StateError("no score for stage " + std::to_string(stage) + " " + modality + "/" +
                         task);
    return it->second;
}

double relative_gain(const ScoreTable& t, int stage, const std::string& modality) {
    if (stage < 1 || stage > t.stages())
        throw ArgumentError("stage " + std::to_string(stage) + " outside learning order");
    double acc = 0.0;
    for (const auto& task : t.tasks()) {
        double ref = t.sup(modality, task);
        if (ref == 0.0)
            throw NumericError("expert score for " + modality + "/" + task +
                               " is zero, relative gain undefined");
        acc += t.score(stage, modality, task) / ref;
    }
    return acc / static_cast<double>(t.tasks().size()) * 100.0;
}

double bw_relative_gain(const ScoreTable& t, int stage) {
    if (stage < 1 || stage > t.stages())
        throw ArgumentError("stage " + std::to_string(stage) + " outside learning order");
    if (stage == 1) return 100.0;
    double acc = 0.0;
    for (int j = 1; j < stage; ++j) acc += relative_gain(t, stage, t.order()[j - 1]);
    return acc / static_cast<double>(stage - 1);
}

double fw_relative_gain(const ScoreTable& t, int stage) {
    if (stage < 1 || stage > t.stages())
        throw ArgumentError("stage " + std::to_string(stage) + " outside learning order");
    return relative_gain(t, stage, t.order()[stage - 1]);
}

namespace {

void mean_std(const std::vector<double>& xs, double* mean, double* sd) {
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    v /= static_cast<double>(xs.size());
    *mean = m;
    *sd = std::sqrt(v);
}

} // namespace

GainReport aggregate(const ScoreTable& t, int stages) {
    if (stages < 1 || stages > t.stages())
        throw ArgumentError("aggregate needs between 1 and " + std::to_string(t.stages()) +
                            " stages");
    GainReport r;
    for (int i = 1; i <= stages; ++i) {
        r.bw.push_back(bw_relative_gain(t, i));
        r.fw.push_back(fw_relative_gain(t, i));
    }
    mean_std(r.bw, &r.bw_mean, &r.bw_std);
    mean_std(r.fw, &r.fw_mean, &r.fw_std);
    return r;
}

double score_accuracy(const MultimodalModel& m, const std::string& modality,
                      const std::string& task, const SplitData& split) {
    auto n = split.inputs.rows();
    if (n == 0) throw ArgumentError("cannot score an empty split");
    if (static_cast<std::int64_t>(split.labels.size()) != n)
        throw ArgumentError("split has " + std::to_string(n) + " inputs but " +
                            std::to_string(split.labels.size()) + " labels");
    Tensor logits = forward_eval(m, modality, task, split.inputs);
    std::int64_t hit = 0;
    for (std::int64_t i = 0; i < n; ++i)
        if (argmax_row(logits, i) == split.labels[static_cast<std::size_t>(i)]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(n);
}

} // namespace mera
