#pragma once

#include <functional>
#include <map>
#include <string>

#include "mera/params.hpp"

namespace mera {

enum class OptKind { sgd, adam };

OptKind opt_kind_from(const std::string& name);

// Linear warmup into cosine decay. scale(0) = 1/W with W = max(1,
// round(ratio * total)); after warmup the scale is non-increasing and decays
// to 0 at step total.
struct LrSchedule {
    int total_steps = 1;
    double warmup_ratio = 0.03;

    int warmup_steps() const;
    double scale(int step) const;
};

// One optimizer instance per training phase. Moments are created at
// configure() time for the entries that are trainable then; a step consumes
// whatever gradients backward populated and zeroes them. Entries the batch
// never touched keep their moments untouched, like a skipped sparse
// parameter.
class Optimizer {
public:
    Optimizer(OptKind kind, LrSchedule sched);

    // peak_lr_of maps a parameter name to its peak learning rate
    void configure(ParameterSet& ps, const std::function<double(const std::string&)>& peak_lr_of);

    void step(ParameterSet& ps);

    int steps_done() const { return step_; }
    double current_scale() const { return sched_.scale(step_); }

private:
    struct Slot {
        Tensor m, v;
        int steps = 0;
        double peak_lr = 0.0;
    };

    OptKind kind_;
    LrSchedule sched_;
    int step_ = 0;
    std::map<std::string, Slot> slots_;

    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double adam_eps = 1e-8;
};

} // namespace mera
