#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace icf::grad {

// Seedable, splittable random stream. Algorithm identifier: "mt19937-split-v1".
// Splitting derives a child seed from the parent's root seed and a salt via
// SplitMix64, so child streams are independent of how much the parent has
// been consumed. Distributions are hand-rolled on top of the raw 32-bit draws
// so the byte-exact state round-trips through checkpoints.
class Rng {
  public:
    static constexpr const char* kAlgorithm = "mt19937-split-v1";

    explicit Rng(std::uint64_t seed);

    Rng split(std::uint64_t salt) const;
    Rng split(std::string_view name) const;

    std::uint32_t next_u32();

    // Uniform on [0, 1).
    float uniform();
    // Uniform on [lo, hi).
    float uniform(float lo, float hi);
    // Uniform integer in [0, n). Requires n > 0.
    int uniform_int(int n);
    // Standard normal via Box-Muller (two raw draws, no cached spare).
    float normal();

    // Engine-state serialization for checkpoints. Round-trips exactly.
    std::string state() const;
    void set_state(const std::string& s);

    std::uint64_t root_seed() const { return root_seed_; }

  private:
    std::uint64_t root_seed_;
    std::mt19937 engine_;
};

// SplitMix64 mixing step, also used to hash names into salts.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t hash_name(std::string_view name);

}  // namespace icf::grad
