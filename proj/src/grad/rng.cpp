#include "icf/grad/rng.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace icf::grad {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t hash_name(std::string_view name) {
    // FNV-1a 64-bit.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

Rng::Rng(std::uint64_t seed) : root_seed_(seed), engine_(static_cast<std::uint32_t>(splitmix64(seed) >> 16)) {}

Rng Rng::split(std::uint64_t salt) const { return Rng(splitmix64(root_seed_ ^ splitmix64(salt))); }

Rng Rng::split(std::string_view name) const { return split(hash_name(name)); }

std::uint32_t Rng::next_u32() { return engine_(); }

float Rng::uniform() {
    // 24 high bits -> exactly representable in float, uniform on [0,1).
    return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f);
}

float Rng::uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    return static_cast<int>(next_u32() % static_cast<std::uint32_t>(n));
}

float Rng::normal() {
    // Box-Muller; u1 kept away from 0.
    float u1 = (static_cast<float>(next_u32() >> 8) + 1.0f) * (1.0f / 16777217.0f);
    float u2 = static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f);
    float r = std::sqrt(-2.0f * std::log(u1));
    return r * std::cos(6.28318530717958647692f * u2);
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw std::runtime_error("Rng::set_state: malformed engine state");
}

}  // namespace icf::grad
