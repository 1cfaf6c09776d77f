#pragma once

#include <string>
#include <vector>

namespace icf::grad {

// Dense row-major array of 32-bit reals. The invariant product(shape) ==
// data.size() is established at construction and preserved by every op.
struct NdBuffer {
    std::vector<int> shape;
    std::vector<float> data;

    NdBuffer() = default;
    explicit NdBuffer(std::vector<int> s, float fill = 0.0f);
    NdBuffer(std::vector<int> s, std::vector<float> d);

    static NdBuffer scalar(float v);

    int numel() const { return static_cast<int>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    bool same_shape(const NdBuffer& o) const { return shape == o.shape; }
    bool all_finite() const;

    // Requires numel() == 1.
    float scalar_value() const;

    float& operator[](int i) { return data[static_cast<size_t>(i)]; }
    float operator[](int i) const { return data[static_cast<size_t>(i)]; }
};

std::string shape_str(const std::vector<int>& shape);
int shape_numel(const std::vector<int>& shape);

}  // namespace icf::grad
