#pragma once

#include <string>

#include "icf/grad/rng.hpp"
#include "icf/grad/tape.hpp"

namespace icf::grad {

// Glorot-uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
NdBuffer glorot_uniform(Rng& rng, std::vector<int> shape, int fan_in, int fan_out);

struct Dense {
    Parameter* w = nullptr;  // [in, out]
    Parameter* b = nullptr;  // [out]
    static Dense create(ParamStore& store, Rng& rng, const std::string& name, int in, int out);
    Value operator()(Tape& t, Value x) const { return t.fully_connected(x, t.param(*w), t.param(*b)); }
};

struct Conv2d {
    Parameter* w = nullptr;  // [out_c, in_c, k, k]
    Parameter* b = nullptr;  // [out_c]
    static Conv2d create(ParamStore& store, Rng& rng, const std::string& name, int in_c, int out_c, int k);
    Value operator()(Tape& t, Value x) const { return t.conv2d_s2(x, t.param(*w), t.param(*b)); }
};

struct Deconv2d {
    Parameter* w = nullptr;  // [in_c, out_c, k, k]
    Parameter* b = nullptr;  // [out_c]
    static Deconv2d create(ParamStore& store, Rng& rng, const std::string& name, int in_c, int out_c, int k);
    Value operator()(Tape& t, Value x, int out_h, int out_w) const {
        return t.deconv2d_s2(x, t.param(*w), t.param(*b), out_h, out_w);
    }
};

// Batchnorm layer owning its scale/shift parameters. Running statistics live
// in a separate buffer store so optimizers never touch them but checkpoints
// still capture them.
struct BatchNorm {
    Parameter* gamma = nullptr;
    Parameter* beta = nullptr;
    Parameter* run_mean = nullptr;
    Parameter* run_var = nullptr;
    float momentum = 0.99f;

    static BatchNorm create(ParamStore& params, ParamStore& buffers, const std::string& name, int channels,
                            float momentum = 0.99f);
    Value operator()(Tape& t, Value x) const {
        return t.batchnorm(x, t.param(*gamma), t.param(*beta), run_mean->value, run_var->value, momentum);
    }
};

}  // namespace icf::grad
