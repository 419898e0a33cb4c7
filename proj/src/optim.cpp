#include "mera/optim.hpp"

#include <cmath>
#include <numbers>

#include "mera/error.hpp"

namespace mera {

OptKind opt_kind_from(const std::string& name) {
    if (name == "sgd") return OptKind::sgd;
    if (name == "adam") return OptKind::adam;
    throw ArgumentError("unknown optimizer: " + name);
}

int LrSchedule::warmup_steps() const {
    int w = static_cast<int>(std::llround(warmup_ratio * static_cast<double>(total_steps)));
    return w < 1 ? 1 : w;
}

double LrSchedule::scale(int step) const {
    if (total_steps < 1) throw ArgumentError("schedule needs at least one step");
    int w = warmup_steps();
    if (step < w) return static_cast<double>(step + 1) / static_cast<double>(w);
    int span = total_steps - w;
    if (span < 1) return 1.0;
    double progress = static_cast<double>(step - w) / static_cast<double>(span);
    if (progress > 1.0) progress = 1.0;
    return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Optimizer::Optimizer(OptKind kind, LrSchedule sched) : kind_(kind), sched_(sched) {
    if (sched_.total_steps < 1) throw ArgumentError("schedule needs at least one step");
}

void Optimizer::configure(ParameterSet& ps, const std::function<double(const std::string&)>& peak_lr_of) {
    slots_.clear();
    step_ = 0;
    for (auto& [name, e] : ps) {
        if (!e.trainable) continue;
        Slot s;
        s.peak_lr = peak_lr_of ? peak_lr_of(name) : 0.0;
        if (s.peak_lr < 0.0) throw ArgumentError("negative learning rate for " + name);
        if (kind_ == OptKind::adam) {
            s.m = Tensor(e.value.shape);
            s.v = Tensor(e.value.shape);
        }
        slots_.emplace(name, std::move(s));
    }
}

void Optimizer::step(ParameterSet& ps) {
    double lr_scale = sched_.scale(step_);
    bool any = false;
    for (auto& [name, e] : ps) {
        if (!e.trainable || !e.has_grad) continue;
        auto it = slots_.find(name);
        if (it == slots_.end())
            throw StateError("gradient for unconfigured parameter: " + name);
        any = true;
        Slot& s = it->second;
        double lr = s.peak_lr * lr_scale;
        check_finite(e.grad, name.c_str());
        if (kind_ == OptKind::sgd) {
            for (std::size_t i = 0; i < e.value.data.size(); ++i)
                e.value.data[i] = static_cast<float>(
                    static_cast<double>(e.value.data[i]) - lr * static_cast<double>(e.grad.data[i]));
        } else {
            s.steps += 1;
            double bc1 = 1.0 - std::pow(beta1, s.steps);
            double bc2 = 1.0 - std::pow(beta2, s.steps);
            for (std::size_t i = 0; i < e.value.data.size(); ++i) {
                double g = e.grad.data[i];
                double m = beta1 * static_cast<double>(s.m.data[i]) + (1.0 - beta1) * g;
                double v = beta2 * static_cast<double>(s.v.data[i]) + (1.0 - beta2) * g * g;
                s.m.data[i] = static_cast<float>(m);
                s.v.data[i] = static_cast<float>(v);
                double update = (m / bc1) / (std::sqrt(v / bc2) + adam_eps);
                e.value.data[i] = static_cast<float>(static_cast<double>(e.value.data[i]) - lr * update);
            }
        }
        check_finite(e.value, name.c_str());
        std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0f);
        e.has_grad = false;
    }
    if (!any) throw StateError("optimizer step with no populated gradients");
    step_ += 1;
}

} // namespace mera
