#pragma once

#include <cstdint>
#include <vector>

#include "icf/grad/tape.hpp"

namespace icf::grad {

struct AdamConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Standard Adam with bias correction over a fixed parameter group. One shared
// step count per group; moment buffers are shaped like their parameters.
class Adam {
  public:
    struct Moments {
        NdBuffer m;
        NdBuffer v;
    };

    Adam(AdamConfig cfg, std::vector<Parameter*> params);

    // Applies one update from each parameter's accumulated gradient.
    // Throws if a managed parameter's gradient is missing or mis-shaped.
    void step();

    std::uint64_t step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }
    void set_lr(float lr) { cfg_.lr = lr; }
    const std::vector<Parameter*>& params() const { return params_; }

    // Checkpoint access; `moments` indexes parallel to params().
    std::vector<Moments>& moments() { return moments_; }
    void set_step_count(std::uint64_t s) { step_ = s; }

  private:
    AdamConfig cfg_;
    std::vector<Parameter*> params_;
    std::vector<Moments> moments_;
    std::uint64_t step_ = 0;
};

}  // namespace icf::grad
