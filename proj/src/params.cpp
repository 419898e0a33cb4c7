#include "mera/params.hpp"

#include <cstring>

#include "mera/error.hpp"

namespace mera {

ParamEntry& ParameterSet::add(const std::string& name, Tensor value) {
    if (name.empty()) throw ArgumentError("parameter name must not be empty");
    auto [it, inserted] = entries_.try_emplace(name);
    if (!inserted) throw ArgumentError("duplicate parameter name: " + name);
    it->second.value = std::move(value);
    it->second.grad = Tensor(it->second.value.shape);
    return it->second;
}

bool ParameterSet::has(const std::string& name) const {
    return entries_.count(name) != 0;
}

ParamEntry& ParameterSet::at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArgumentError("unknown parameter: " + name);
    return it->second;
}

const ParamEntry& ParameterSet::at(const std::string& name) const {
    return const_cast<ParameterSet*>(this)->at(name);
}

void ParameterSet::zero_grads() {
    for (auto& [name, e] : entries_) {
        std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0f);
        e.has_grad = false;
    }
}

std::uint64_t param_hash(const ParameterSet& ps,
                         const std::function<bool(const std::string&)>& filter) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const unsigned char* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& [name, e] : ps) {
        if (filter && !filter(name)) continue;
        mix(name.data(), name.size());
        for (std::int64_t d : e.value.shape) mix(&d, sizeof d);
        if (!e.value.data.empty())
            mix(e.value.data.data(), e.value.data.size() * sizeof(float));
    }
    return h;
}

} // namespace mera
