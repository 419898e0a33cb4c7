#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "mera/tensor.hpp"

namespace mera {

struct ParamEntry {
    Tensor value;
    Tensor grad;
    bool trainable = true;
    bool has_grad = false;
};

// Ordered name -> entry store. Names are dotted paths like
// "encoder.image.l1.w"; ordering is lexicographic and deterministic, which
// every hash, merge and checkpoint below relies on.
class ParameterSet {
public:
    ParamEntry& add(const std::string& name, Tensor value);
    bool has(const std::string& name) const;
    ParamEntry& at(const std::string& name);
    const ParamEntry& at(const std::string& name) const;

    void zero_grads();
    std::size_t size() const { return entries_.size(); }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::map<std::string, ParamEntry> entries_;
};

// fnv-1a over name, shape and value bits of every entry the filter admits.
// Bitwise-identical parameters give identical hashes, so freeze contracts can
// be asserted cheaply.
std::uint64_t param_hash(const ParameterSet& ps,
                         const std::function<bool(const std::string&)>& filter = nullptr);

} // namespace mera
