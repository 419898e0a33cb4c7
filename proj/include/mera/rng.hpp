#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mera {

// Seed derivation. Every random decision in the lab flows from a named seed
// through these helpers, so two processes that agree on the config agree on
// every draw.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t hash_str(std::string_view s);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t salt);

// Deterministic generator. mt19937_64 has a standard-mandated output
// sequence; the distributions here are hand-rolled because the std ones are
// implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    // uniform in [0, 1), 53-bit resolution
    double uniform();
    // uniform in [lo, hi)
    double uniform(double lo, double hi);
    // standard normal via Box-Muller, spare value cached
    double normal();
    // uniform integer in [0, n), rejection sampled, n > 0
    std::uint64_t uniform_index(std::uint64_t n);

    // Fisher-Yates
    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace mera
