#include "icf/grad/layers.hpp"

#include <cmath>

namespace icf::grad {

NdBuffer glorot_uniform(Rng& rng, std::vector<int> shape, int fan_in, int fan_out) {
    NdBuffer out(std::move(shape));
    float a = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
    for (float& v : out.data) v = rng.uniform(-a, a);
    return out;
}

Dense Dense::create(ParamStore& store, Rng& rng, const std::string& name, int in, int out) {
    Dense d;
    d.w = store.create(name + ".w", glorot_uniform(rng, {in, out}, in, out));
    d.b = store.create(name + ".b", NdBuffer({out}, 0.0f));
    return d;
}

Conv2d Conv2d::create(ParamStore& store, Rng& rng, const std::string& name, int in_c, int out_c, int k) {
    Conv2d c;
    c.w = store.create(name + ".w", glorot_uniform(rng, {out_c, in_c, k, k}, in_c * k * k, out_c * k * k));
    c.b = store.create(name + ".b", NdBuffer({out_c}, 0.0f));
    return c;
}

Deconv2d Deconv2d::create(ParamStore& store, Rng& rng, const std::string& name, int in_c, int out_c, int k) {
    Deconv2d c;
    c.w = store.create(name + ".w", glorot_uniform(rng, {in_c, out_c, k, k}, in_c * k * k, out_c * k * k));
    c.b = store.create(name + ".b", NdBuffer({out_c}, 0.0f));
    return c;
}

BatchNorm BatchNorm::create(ParamStore& params, ParamStore& buffers, const std::string& name, int channels,
                            float momentum) {
    BatchNorm bn;
    bn.gamma = params.create(name + ".gamma", NdBuffer({channels}, 1.0f));
    bn.beta = params.create(name + ".beta", NdBuffer({channels}, 0.0f));
    bn.run_mean = buffers.create(name + ".run_mean", NdBuffer({channels}, 0.0f));
    bn.run_var = buffers.create(name + ".run_var", NdBuffer({channels}, 1.0f));
    bn.momentum = momentum;
    return bn;
}

}  // namespace icf::grad
