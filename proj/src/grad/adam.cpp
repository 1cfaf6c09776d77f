#include "icf/grad/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace icf::grad {

Adam::Adam(AdamConfig cfg, std::vector<Parameter*> params) : cfg_(cfg), params_(std::move(params)) {
    moments_.reserve(params_.size());
    for (Parameter* p : params_) {
        moments_.push_back(Moments{NdBuffer(p->value.shape, 0.0f), NdBuffer(p->value.shape, 0.0f)});
    }
}

void Adam::step() {
    ++step_;
    float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(step_));
    float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(step_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Parameter& p = *params_[pi];
        if (!p.grad.same_shape(p.value)) {
            throw std::runtime_error("adam: missing or mis-shaped gradient for parameter '" + p.name + "'");
        }
        Moments& mo = moments_[pi];
        for (int i = 0; i < p.value.numel(); ++i) {
            float g = p.grad[i];
            mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0f - cfg_.beta1) * g;
            mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0f - cfg_.beta2) * g * g;
            float mhat = mo.m[i] / bc1;
            float vhat = mo.v[i] / bc2;
            p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace icf::grad
