#include "icf/grad/ndbuffer.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace icf::grad {

int shape_numel(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("NdBuffer: non-positive extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

NdBuffer::NdBuffer(std::vector<int> s, float fill)
    : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

NdBuffer::NdBuffer(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<int>(data.size())) {
        throw std::invalid_argument("NdBuffer: shape " + shape_str(shape) + " does not match data length " +
                                    std::to_string(data.size()));
    }
}

NdBuffer NdBuffer::scalar(float v) { return NdBuffer({1}, {v}); }

bool NdBuffer::all_finite() const {
    for (float v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

float NdBuffer::scalar_value() const {
    if (numel() != 1) throw std::logic_error("scalar_value: buffer has shape " + shape_str(shape));
    return data[0];
}

}  // namespace icf::grad
