#include "icf/grad/tape.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>

namespace icf::grad {

Parameter::Parameter(std::string n, NdBuffer v) : name(std::move(n)), value(std::move(v)), grad(value.shape, 0.0f) {}

void Parameter::zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0f); }

Parameter* ParamStore::create(const std::string& name, NdBuffer init) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    items_.push_back(std::make_unique<Parameter>(name, std::move(init)));
    index_[name] = items_.size() - 1;
    return items_.back().get();
}

Parameter* ParamStore::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
}

Parameter& ParamStore::at(const std::string& name) {
    Parameter* p = find(name);
    if (!p) throw std::out_of_range("ParamStore: no parameter named '" + name + "'");
    return *p;
}

void ParamStore::zero_grad() {
    for (auto& p : items_) p->zero_grad();
}

struct Tape::Node {
    enum class Op {
        Input,
        Param,
        Add,
        Sub,
        Mul,
        Div,
        Scale,
        AddScalar,
        Abs,
        Max0,
        LeakyRelu,
        Tanh,
        Exp,
        Log,
        Softmax,
        MatMul,
        FullyConnected,
        Conv2dS2,
        Deconv2dS2,
        BatchNorm,
        Mse,
        SquareNorm,
        SquareNormLast,
        SumLast,
        SumAll,
        MeanAll,
        Pick,
        ConcatCols,
        SliceRow,
        TileRows,
        Reshape,
    };

    Op op;
    int a = -1, b = -1, c = -1;
    NdBuffer val;
    NdBuffer grad;
    bool needs_grad = false;
    bool touched = false;
    float scalar = 0.0f;
    std::vector<int> idx;    // pick indices, deconv output size, slice row
    std::vector<float> aux;  // batchnorm saved statistics
    Parameter* parameter = nullptr;
};

namespace {

using Op = Tape::Node::Op;

int conv_out_extent(int in, int k) { return (in + 2 - k) / 2 + 1; }

inline float sign_of(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

}  // namespace

Tape::Tape(bool train_mode) : train_mode_(train_mode) { nodes_.reserve(64); }

Value Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(Value v) {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw std::logic_error("Tape: invalid value handle");
    return nodes_[static_cast<size_t>(v.id)];
}

const Tape::Node& Tape::node(Value v) const { return const_cast<Tape*>(this)->node(v); }

const NdBuffer& Tape::val(Value v) const { return node(v).val; }

const NdBuffer& Tape::grad(Value v) const { return node(v).grad; }

void Tape::check_same_shape(const char* op, Value a, Value b) const {
    const NdBuffer& va = val(a);
    const NdBuffer& vb = val(b);
    if (!va.same_shape(vb)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(va.shape) + " vs " +
                                    shape_str(vb.shape));
    }
}

Value Tape::input(NdBuffer v) {
    Node n;
    n.op = Op::Input;
    n.val = std::move(v);
    return push(std::move(n));
}

Value Tape::param(Parameter& p) {
    Node n;
    n.op = Op::Param;
    n.val = p.value;
    n.parameter = &p;
    n.needs_grad = true;
    return push(std::move(n));
}

Value Tape::detach(Value a) { return input(val(a)); }

// ---------------------------------------------------------------------------
// Elementwise ops

Value Tape::add(Value a, Value b) {
    check_same_shape("add", a, b);
    Node n;
    n.op = Op::Add;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = val(a);
    const NdBuffer& vb = val(b);
    for (int i = 0; i < n.val.numel(); ++i) n.val[i] += vb[i];
    return push(std::move(n));
}

Value Tape::sub(Value a, Value b) {
    check_same_shape("sub", a, b);
    Node n;
    n.op = Op::Sub;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = val(a);
    const NdBuffer& vb = val(b);
    for (int i = 0; i < n.val.numel(); ++i) n.val[i] -= vb[i];
    return push(std::move(n));
}

Value Tape::mul(Value a, Value b) {
    check_same_shape("mul", a, b);
    Node n;
    n.op = Op::Mul;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = val(a);
    const NdBuffer& vb = val(b);
    for (int i = 0; i < n.val.numel(); ++i) n.val[i] *= vb[i];
    return push(std::move(n));
}

Value Tape::div(Value a, Value b) {
    check_same_shape("div", a, b);
    Node n;
    n.op = Op::Div;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = val(a);
    const NdBuffer& vb = val(b);
    for (int i = 0; i < n.val.numel(); ++i) {
        float d = vb[i];
        if (std::fabs(d) < kEps) d = d < 0.0f ? -kEps : kEps;
        n.val[i] /= d;
    }
    return push(std::move(n));
}

Value Tape::scale(Value a, float c) {
    Node n;
    n.op = Op::Scale;
    n.a = a.id;
    n.scalar = c;
    n.needs_grad = node(a).needs_grad;
    n.val = val(a);
    for (float& v : n.val.data) v *= c;
    return push(std::move(n));
}

Value Tape::add_scalar(Value a, float c) {
    Node n;
    n.op = Op::AddScalar;
    n.a = a.id;
    n.scalar = c;
    n.needs_grad = node(a).needs_grad;
    n.val = val(a);
    for (float& v : n.val.data) v += c;
    return push(std::move(n));
}

Value Tape::abs(Value a) {
    Node n;
    n.op = Op::Abs;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = val(a);
    for (float& v : n.val.data) v = std::fabs(v);
    return push(std::move(n));
}

Value Tape::max0(Value a) {
    Node n;
    n.op = Op::Max0;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = val(a);
    for (float& v : n.val.data) v = v > 0.0f ? v : 0.0f;
    return push(std::move(n));
}

Value Tape::leaky_relu(Value a, float slope) {
    Node n;
    n.op = Op::LeakyRelu;
    n.a = a.id;
    n.scalar = slope;
    n.needs_grad = node(a).needs_grad;
    n.val = val(a);
    for (float& v : n.val.data) v = v > 0.0f ? v : v * slope;
    return push(std::move(n));
}

Value Tape::tanh(Value a) {
    Node n;
    n.op = Op::Tanh;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = val(a);
    for (float& v : n.val.data) v = std::tanh(v);
    return push(std::move(n));
}

Value Tape::exp(Value a) {
    Node n;
    n.op = Op::Exp;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = val(a);
    for (float& v : n.val.data) v = std::exp(v);
    return push(std::move(n));
}

Value Tape::log(Value a) {
    Node n;
    n.op = Op::Log;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = val(a);
    for (float& v : n.val.data) v = std::log(v < kEps ? kEps : v);
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Layers

Value Tape::softmax(Value a) {
    const NdBuffer& x = val(a);
    if (x.ndim() != 2) throw std::invalid_argument("softmax: expected [N,A], got " + shape_str(x.shape));
    int rows = x.dim(0), cols = x.dim(1);
    Node n;
    n.op = Op::Softmax;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = NdBuffer(x.shape);
    for (int r = 0; r < rows; ++r) {
        const float* xr = x.data.data() + static_cast<size_t>(r) * cols;
        float* yr = n.val.data.data() + static_cast<size_t>(r) * cols;
        float mx = xr[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double sum = 0.0;
        for (int c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        float inv = static_cast<float>(1.0 / sum);
        for (int c = 0; c < cols; ++c) yr[c] *= inv;
    }
    return push(std::move(n));
}

Value Tape::matmul(Value a, Value b) {
    const NdBuffer& A = val(a);
    const NdBuffer& B = val(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(A.shape) + " x " + shape_str(B.shape));
    }
    int m = A.dim(0), k = A.dim(1), p = B.dim(1);
    Node n;
    n.op = Op::MatMul;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = NdBuffer({m, p});
    for (int i = 0; i < m; ++i) {
        const float* arow = A.data.data() + static_cast<size_t>(i) * k;
        float* yrow = n.val.data.data() + static_cast<size_t>(i) * p;
        for (int t = 0; t < k; ++t) {
            float av = arow[t];
            if (av == 0.0f) continue;
            const float* brow = B.data.data() + static_cast<size_t>(t) * p;
            for (int j = 0; j < p; ++j) yrow[j] += av * brow[j];
        }
    }
    return push(std::move(n));
}

Value Tape::fully_connected(Value x, Value w, Value b) {
    const NdBuffer& X = val(x);
    const NdBuffer& W = val(w);
    const NdBuffer& B = val(b);
    if (X.ndim() != 2 || W.ndim() != 2 || X.dim(1) != W.dim(0)) {
        throw std::invalid_argument("fully_connected: incompatible shapes " + shape_str(X.shape) + " x " +
                                    shape_str(W.shape));
    }
    if (B.ndim() != 1 || B.dim(0) != W.dim(1)) {
        throw std::invalid_argument("fully_connected: bias shape " + shape_str(B.shape) + " does not match output " +
                                    std::to_string(W.dim(1)));
    }
    int m = X.dim(0), k = X.dim(1), p = W.dim(1);
    Node n;
    n.op = Op::FullyConnected;
    n.a = x.id;
    n.b = w.id;
    n.c = b.id;
    n.needs_grad = node(x).needs_grad || node(w).needs_grad || node(b).needs_grad;
    n.val = NdBuffer({m, p});
    for (int i = 0; i < m; ++i) {
        float* yrow = n.val.data.data() + static_cast<size_t>(i) * p;
        for (int j = 0; j < p; ++j) yrow[j] = B[j];
        const float* xrow = X.data.data() + static_cast<size_t>(i) * k;
        for (int t = 0; t < k; ++t) {
            float xv = xrow[t];
            if (xv == 0.0f) continue;
            const float* wrow = W.data.data() + static_cast<size_t>(t) * p;
            for (int j = 0; j < p; ++j) yrow[j] += xv * wrow[j];
        }
    }
    return push(std::move(n));
}

Value Tape::conv2d_s2(Value x, Value w, Value b) {
    const NdBuffer& X = val(x);
    const NdBuffer& W = val(w);
    const NdBuffer& B = val(b);
    if (X.ndim() != 4 || W.ndim() != 4 || W.dim(1) != X.dim(1)) {
        throw std::invalid_argument("conv2d_s2: incompatible shapes x=" + shape_str(X.shape) +
                                    " w=" + shape_str(W.shape));
    }
    int N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    int F = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    if (B.ndim() != 1 || B.dim(0) != F) {
        throw std::invalid_argument("conv2d_s2: bias shape " + shape_str(B.shape) + " does not match filters " +
                                    std::to_string(F));
    }
    int OH = conv_out_extent(H, kh), OW = conv_out_extent(Wd, kw);
    if (OH < 1 || OW < 1) throw std::invalid_argument("conv2d_s2: input too small: " + shape_str(X.shape));
    Node n;
    n.op = Op::Conv2dS2;
    n.a = x.id;
    n.b = w.id;
    n.c = b.id;
    n.needs_grad = node(x).needs_grad || node(w).needs_grad || node(b).needs_grad;
    n.val = NdBuffer({N, F, OH, OW});
    for (int img = 0; img < N; ++img) {
        for (int f = 0; f < F; ++f) {
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = B[f];
                    for (int c = 0; c < C; ++c) {
                        const float* xc = X.data.data() + ((static_cast<size_t>(img) * C + c) * H) * Wd;
                        const float* wc = W.data.data() + ((static_cast<size_t>(f) * C + c) * kh) * kw;
                        for (int i = 0; i < kh; ++i) {
                            int ih = oh * 2 + i - 1;
                            if (ih < 0 || ih >= H) continue;
                            for (int j = 0; j < kw; ++j) {
                                int iw = ow * 2 + j - 1;
                                if (iw < 0 || iw >= Wd) continue;
                                acc += static_cast<double>(xc[ih * Wd + iw]) * wc[i * kw + j];
                            }
                        }
                    }
                    n.val[((img * F + f) * OH + oh) * OW + ow] = static_cast<float>(acc);
                }
            }
        }
    }
    return push(std::move(n));
}

Value Tape::deconv2d_s2(Value x, Value w, Value b, int out_h, int out_w) {
    const NdBuffer& X = val(x);
    const NdBuffer& W = val(w);
    const NdBuffer& B = val(b);
    if (X.ndim() != 4 || W.ndim() != 4 || W.dim(0) != X.dim(1)) {
        throw std::invalid_argument("deconv2d_s2: incompatible shapes x=" + shape_str(X.shape) +
                                    " w=" + shape_str(W.shape));
    }
    int N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    int F = W.dim(1), kh = W.dim(2), kw = W.dim(3);
    if (B.ndim() != 1 || B.dim(0) != F) {
        throw std::invalid_argument("deconv2d_s2: bias shape " + shape_str(B.shape) + " does not match filters " +
                                    std::to_string(F));
    }
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("deconv2d_s2: non-positive output size");
    Node n;
    n.op = Op::Deconv2dS2;
    n.a = x.id;
    n.b = w.id;
    n.c = b.id;
    n.idx = {out_h, out_w};
    n.needs_grad = node(x).needs_grad || node(w).needs_grad || node(b).needs_grad;
    n.val = NdBuffer({N, F, out_h, out_w});
    // Gather form of the stride-2 pad-1 transposed convolution:
    // contribution exists where oh == 2*ih + i - 1 for kernel row i.
    for (int img = 0; img < N; ++img) {
        for (int f = 0; f < F; ++f) {
            for (int oh = 0; oh < out_h; ++oh) {
                for (int ow = 0; ow < out_w; ++ow) {
                    double acc = B[f];
                    for (int c = 0; c < C; ++c) {
                        const float* xc = X.data.data() + ((static_cast<size_t>(img) * C + c) * H) * Wd;
                        const float* wc = W.data.data() + ((static_cast<size_t>(c) * F + f) * kh) * kw;
                        for (int i = 0; i < kh; ++i) {
                            int num_h = oh + 1 - i;
                            if (num_h < 0 || (num_h & 1)) continue;
                            int ih = num_h / 2;
                            if (ih >= H) continue;
                            for (int j = 0; j < kw; ++j) {
                                int num_w = ow + 1 - j;
                                if (num_w < 0 || (num_w & 1)) continue;
                                int iw = num_w / 2;
                                if (iw >= Wd) continue;
                                acc += static_cast<double>(xc[ih * Wd + iw]) * wc[i * kw + j];
                            }
                        }
                    }
                    n.val[((img * F + f) * out_h + oh) * out_w + ow] = static_cast<float>(acc);
                }
            }
        }
    }
    return push(std::move(n));
}

Value Tape::batchnorm(Value x, Value gamma, Value beta, NdBuffer& run_mean, NdBuffer& run_var, float momentum) {
    const NdBuffer& X = val(x);
    if (X.ndim() != 2 && X.ndim() != 4) {
        throw std::invalid_argument("batchnorm: expected [N,D] or [N,C,H,W], got " + shape_str(X.shape));
    }
    int N = X.dim(0);
    int C = X.dim(1);
    int spatial = X.ndim() == 4 ? X.dim(2) * X.dim(3) : 1;
    int m = N * spatial;
    const NdBuffer& G = val(gamma);
    const NdBuffer& Bt = val(beta);
    if (G.numel() != C || Bt.numel() != C) {
        throw std::invalid_argument("batchnorm: gamma/beta must have " + std::to_string(C) + " channels");
    }
    if (run_mean.numel() != C || run_var.numel() != C) {
        throw std::invalid_argument("batchnorm: running stats not sized for " + std::to_string(C) + " channels");
    }
    if (train_mode_ && m < 2) {
        throw std::invalid_argument("batchnorm: train mode requires batch size >= 2, got " + shape_str(X.shape));
    }

    Node n;
    n.op = Op::BatchNorm;
    n.a = x.id;
    n.b = gamma.id;
    n.c = beta.id;
    n.needs_grad = node(x).needs_grad || node(gamma).needs_grad || node(beta).needs_grad;
    n.val = NdBuffer(X.shape);
    n.scalar = train_mode_ ? 1.0f : 0.0f;
    n.aux.resize(static_cast<size_t>(2 * C));

    auto index_of = [&](int img, int c, int s) {
        return (static_cast<size_t>(img) * C + c) * spatial + static_cast<size_t>(s);
    };

    for (int c = 0; c < C; ++c) {
        float mean, var;
        if (train_mode_) {
            double sum = 0.0;
            for (int img = 0; img < N; ++img)
                for (int s = 0; s < spatial; ++s) sum += X.data[index_of(img, c, s)];
            mean = static_cast<float>(sum / m);
            double sq = 0.0;
            for (int img = 0; img < N; ++img)
                for (int s = 0; s < spatial; ++s) {
                    double d = X.data[index_of(img, c, s)] - mean;
                    sq += d * d;
                }
            var = static_cast<float>(sq / m);
            run_mean[c] = momentum * run_mean[c] + (1.0f - momentum) * mean;
            run_var[c] = momentum * run_var[c] + (1.0f - momentum) * var;
        } else {
            mean = run_mean[c];
            var = run_var[c];
        }
        float istd = 1.0f / std::sqrt(var + kBnEps);
        n.aux[static_cast<size_t>(c)] = mean;
        n.aux[static_cast<size_t>(C + c)] = istd;
        float g = G[c], bt = Bt[c];
        for (int img = 0; img < N; ++img) {
            for (int s = 0; s < spatial; ++s) {
                size_t i = index_of(img, c, s);
                n.val.data[i] = g * (X.data[i] - mean) * istd + bt;
            }
        }
    }
    return push(std::move(n));
}

Value Tape::mse(Value a, Value b) {
    check_same_shape("mse", a, b);
    const NdBuffer& A = val(a);
    const NdBuffer& B = val(b);
    int batch = A.ndim() >= 1 ? A.dim(0) : 1;
    Node n;
    n.op = Op::Mse;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    double acc = 0.0;
    for (int i = 0; i < A.numel(); ++i) {
        double d = static_cast<double>(A[i]) - B[i];
        acc += d * d;
    }
    n.scalar = static_cast<float>(batch);
    n.val = NdBuffer::scalar(static_cast<float>(0.5 * acc / batch));
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Reductions / indexing

Value Tape::square_norm(Value a) {
    Node n;
    n.op = Op::SquareNorm;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    double acc = 0.0;
    for (float v : val(a).data) acc += static_cast<double>(v) * v;
    n.val = NdBuffer::scalar(static_cast<float>(acc));
    return push(std::move(n));
}

Value Tape::square_norm_last(Value a) {
    const NdBuffer& X = val(a);
    if (X.ndim() != 2) throw std::invalid_argument("square_norm_last: expected [N,K], got " + shape_str(X.shape));
    int rows = X.dim(0), cols = X.dim(1);
    Node n;
    n.op = Op::SquareNormLast;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = NdBuffer({rows});
    for (int r = 0; r < rows; ++r) {
        double acc = 0.0;
        const float* xr = X.data.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) acc += static_cast<double>(xr[c]) * xr[c];
        n.val[r] = static_cast<float>(acc);
    }
    return push(std::move(n));
}

Value Tape::sum_last(Value a) {
    const NdBuffer& X = val(a);
    if (X.ndim() != 2) throw std::invalid_argument("sum_last: expected [N,K], got " + shape_str(X.shape));
    int rows = X.dim(0), cols = X.dim(1);
    Node n;
    n.op = Op::SumLast;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = NdBuffer({rows});
    for (int r = 0; r < rows; ++r) {
        double acc = 0.0;
        const float* xr = X.data.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) acc += xr[c];
        n.val[r] = static_cast<float>(acc);
    }
    return push(std::move(n));
}

Value Tape::sum_all(Value a) {
    Node n;
    n.op = Op::SumAll;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    double acc = 0.0;
    for (float v : val(a).data) acc += v;
    n.val = NdBuffer::scalar(static_cast<float>(acc));
    return push(std::move(n));
}

Value Tape::mean_all(Value a) {
    Node n;
    n.op = Op::MeanAll;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    double acc = 0.0;
    for (float v : val(a).data) acc += v;
    n.scalar = static_cast<float>(val(a).numel());
    n.val = NdBuffer::scalar(static_cast<float>(acc / n.scalar));
    return push(std::move(n));
}

Value Tape::pick(Value a, std::vector<int> idx) {
    const NdBuffer& X = val(a);
    if (X.ndim() != 2) throw std::invalid_argument("pick: expected [N,A], got " + shape_str(X.shape));
    int rows = X.dim(0), cols = X.dim(1);
    if (static_cast<int>(idx.size()) != rows) {
        throw std::invalid_argument("pick: need one index per row, got " + std::to_string(idx.size()) + " for " +
                                    std::to_string(rows) + " rows");
    }
    Node n;
    n.op = Op::Pick;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = NdBuffer({rows});
    for (int r = 0; r < rows; ++r) {
        if (idx[static_cast<size_t>(r)] < 0 || idx[static_cast<size_t>(r)] >= cols) {
            throw std::invalid_argument("pick: index " + std::to_string(idx[static_cast<size_t>(r)]) +
                                        " out of range for " + std::to_string(cols) + " columns");
        }
        n.val[r] = X[r * cols + idx[static_cast<size_t>(r)]];
    }
    n.idx = std::move(idx);
    return push(std::move(n));
}

Value Tape::concat_cols(Value a, Value b) {
    const NdBuffer& A = val(a);
    const NdBuffer& B = val(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(0) != B.dim(0)) {
        throw std::invalid_argument("concat_cols: shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
    }
    int rows = A.dim(0), p = A.dim(1), q = B.dim(1);
    Node n;
    n.op = Op::ConcatCols;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    n.val = NdBuffer({rows, p + q});
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < p; ++c) n.val[r * (p + q) + c] = A[r * p + c];
        for (int c = 0; c < q; ++c) n.val[r * (p + q) + p + c] = B[r * q + c];
    }
    return push(std::move(n));
}

Value Tape::slice_row(Value a, int row) {
    const NdBuffer& X = val(a);
    if (X.ndim() != 2 || row < 0 || row >= X.dim(0)) {
        throw std::invalid_argument("slice_row: row " + std::to_string(row) + " of " + shape_str(X.shape));
    }
    int cols = X.dim(1);
    Node n;
    n.op = Op::SliceRow;
    n.a = a.id;
    n.idx = {row};
    n.needs_grad = node(a).needs_grad;
    n.val = NdBuffer({1, cols});
    for (int c = 0; c < cols; ++c) n.val[c] = X[row * cols + c];
    return push(std::move(n));
}

Value Tape::tile_rows(Value a, int nrows) {
    const NdBuffer& X = val(a);
    if (X.ndim() != 2 || X.dim(0) != 1) throw std::invalid_argument("tile_rows: expected [1,D], got " + shape_str(X.shape));
    if (nrows < 1) throw std::invalid_argument("tile_rows: non-positive row count");
    int cols = X.dim(1);
    Node n;
    n.op = Op::TileRows;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = NdBuffer({nrows, cols});
    for (int r = 0; r < nrows; ++r)
        for (int c = 0; c < cols; ++c) n.val[r * cols + c] = X[c];
    return push(std::move(n));
}

Value Tape::reshape(Value a, std::vector<int> shape) {
    const NdBuffer& X = val(a);
    if (shape_numel(shape) != X.numel()) {
        throw std::invalid_argument("reshape: " + shape_str(X.shape) + " -> " + shape_str(shape) +
                                    " changes element count");
    }
    Node n;
    n.op = Op::Reshape;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    n.val = NdBuffer(std::move(shape), X.data);
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward

void Tape::backward(Value loss) {
    Node& ln = node(loss);
    if (ln.val.numel() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(ln.val.shape));
    }
    if (!ln.needs_grad) return;  // loss does not depend on any parameter

    // Reset per-call node gradients; Parameter::grad accumulates across calls.
    for (auto& n : nodes_) n.touched = false;

    auto touch = [&](int id) -> Node& {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.touched) {
            n.grad = NdBuffer(n.val.shape, 0.0f);
            n.touched = true;
        }
        return n;
    };

    touch(loss.id).grad[0] = 1.0f;

    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.touched || !n.needs_grad) continue;
        const NdBuffer& g = n.grad;

        auto want = [&](int child) { return child >= 0 && nodes_[static_cast<size_t>(child)].needs_grad; };

        switch (n.op) {
            case Op::Input:
                break;
            case Op::Param: {
                NdBuffer& pg = n.parameter->grad;
                for (int i = 0; i < g.numel(); ++i) pg[i] += g[i];
                break;
            }
            case Op::Add: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += g[i];
                }
                if (want(n.b)) {
                    Node& bn = touch(n.b);
                    for (int i = 0; i < g.numel(); ++i) bn.grad[i] += g[i];
                }
                break;
            }
            case Op::Sub: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += g[i];
                }
                if (want(n.b)) {
                    Node& bn = touch(n.b);
                    for (int i = 0; i < g.numel(); ++i) bn.grad[i] -= g[i];
                }
                break;
            }
            case Op::Mul: {
                const NdBuffer& va = nodes_[static_cast<size_t>(n.a)].val;
                const NdBuffer& vb = nodes_[static_cast<size_t>(n.b)].val;
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += g[i] * vb[i];
                }
                if (want(n.b)) {
                    Node& bn = touch(n.b);
                    for (int i = 0; i < g.numel(); ++i) bn.grad[i] += g[i] * va[i];
                }
                break;
            }
            case Op::Div: {
                const NdBuffer& va = nodes_[static_cast<size_t>(n.a)].val;
                const NdBuffer& vb = nodes_[static_cast<size_t>(n.b)].val;
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < g.numel(); ++i) {
                        float d = vb[i];
                        if (std::fabs(d) < kEps) d = d < 0.0f ? -kEps : kEps;
                        an.grad[i] += g[i] / d;
                    }
                }
                if (want(n.b)) {
                    Node& bn = touch(n.b);
                    for (int i = 0; i < g.numel(); ++i) {
                        float d = vb[i];
                        if (std::fabs(d) < kEps) continue;  // clamped: locally constant
                        bn.grad[i] -= g[i] * va[i] / (d * d);
                    }
                }
                break;
            }
            case Op::Scale: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += g[i] * n.scalar;
                }
                break;
            }
            case Op::AddScalar: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += g[i];
                }
                break;
            }
            case Op::Abs: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    const NdBuffer& va = an.val;
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += g[i] * sign_of(va[i]);
                }
                break;
            }
            case Op::Max0: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    const NdBuffer& va = an.val;
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += va[i] > 0.0f ? g[i] : 0.0f;
                }
                break;
            }
            case Op::LeakyRelu: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    const NdBuffer& va = an.val;
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += va[i] > 0.0f ? g[i] : g[i] * n.scalar;
                }
                break;
            }
            case Op::Tanh: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += g[i] * (1.0f - n.val[i] * n.val[i]);
                }
                break;
            }
            case Op::Exp: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += g[i] * n.val[i];
                }
                break;
            }
            case Op::Log: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    const NdBuffer& va = an.val;
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += g[i] / (va[i] < kEps ? kEps : va[i]);
                }
                break;
            }
            case Op::Softmax: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    int rows = n.val.dim(0), cols = n.val.dim(1);
                    for (int r = 0; r < rows; ++r) {
                        const float* yr = n.val.data.data() + static_cast<size_t>(r) * cols;
                        const float* gr = g.data.data() + static_cast<size_t>(r) * cols;
                        double dot = 0.0;
                        for (int c = 0; c < cols; ++c) dot += static_cast<double>(gr[c]) * yr[c];
                        float* ar = an.grad.data.data() + static_cast<size_t>(r) * cols;
                        for (int c = 0; c < cols; ++c) ar[c] += yr[c] * (gr[c] - static_cast<float>(dot));
                    }
                }
                break;
            }
            case Op::MatMul: {
                const NdBuffer& A = nodes_[static_cast<size_t>(n.a)].val;
                const NdBuffer& B = nodes_[static_cast<size_t>(n.b)].val;
                int m = A.dim(0), k = A.dim(1), p = B.dim(1);
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < m; ++i)
                        for (int t = 0; t < k; ++t) {
                            double acc = 0.0;
                            const float* grow = g.data.data() + static_cast<size_t>(i) * p;
                            const float* brow = B.data.data() + static_cast<size_t>(t) * p;
                            for (int j = 0; j < p; ++j) acc += static_cast<double>(grow[j]) * brow[j];
                            an.grad[i * k + t] += static_cast<float>(acc);
                        }
                }
                if (want(n.b)) {
                    Node& bn = touch(n.b);
                    for (int t = 0; t < k; ++t)
                        for (int j = 0; j < p; ++j) {
                            double acc = 0.0;
                            for (int i = 0; i < m; ++i) acc += static_cast<double>(A[i * k + t]) * g[i * p + j];
                            bn.grad[t * p + j] += static_cast<float>(acc);
                        }
                }
                break;
            }
            case Op::FullyConnected: {
                const NdBuffer& X = nodes_[static_cast<size_t>(n.a)].val;
                const NdBuffer& W = nodes_[static_cast<size_t>(n.b)].val;
                int m = X.dim(0), k = X.dim(1), p = W.dim(1);
                if (want(n.a)) {
                    Node& xn = touch(n.a);
                    for (int i = 0; i < m; ++i)
                        for (int t = 0; t < k; ++t) {
                            double acc = 0.0;
                            const float* grow = g.data.data() + static_cast<size_t>(i) * p;
                            const float* wrow = W.data.data() + static_cast<size_t>(t) * p;
                            for (int j = 0; j < p; ++j) acc += static_cast<double>(grow[j]) * wrow[j];
                            xn.grad[i * k + t] += static_cast<float>(acc);
                        }
                }
                if (want(n.b)) {
                    Node& wn = touch(n.b);
                    for (int t = 0; t < k; ++t)
                        for (int j = 0; j < p; ++j) {
                            double acc = 0.0;
                            for (int i = 0; i < m; ++i) acc += static_cast<double>(X[i * k + t]) * g[i * p + j];
                            wn.grad[t * p + j] += static_cast<float>(acc);
                        }
                }
                if (want(n.c)) {
                    Node& bn2 = touch(n.c);
                    for (int j = 0; j < p; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i) acc += g[i * p + j];
                        bn2.grad[j] += static_cast<float>(acc);
                    }
                }
                break;
            }
            case Op::Conv2dS2: {
                const NdBuffer& X = nodes_[static_cast<size_t>(n.a)].val;
                const NdBuffer& W = nodes_[static_cast<size_t>(n.b)].val;
                int N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
                int F = W.dim(0), kh = W.dim(2), kw = W.dim(3);
                int OH = n.val.dim(2), OW = n.val.dim(3);
                if (want(n.a)) {
                    Node& xn = touch(n.a);
                    for (int img = 0; img < N; ++img)
                        for (int c = 0; c < C; ++c)
                            for (int ih = 0; ih < H; ++ih)
                                for (int iw = 0; iw < Wd; ++iw) {
                                    double acc = 0.0;
                                    for (int f = 0; f < F; ++f) {
                                        const float* gout =
                                            g.data.data() + ((static_cast<size_t>(img) * F + f) * OH) * OW;
                                        const float* wc =
                                            W.data.data() + ((static_cast<size_t>(f) * C + c) * kh) * kw;
                                        for (int i = 0; i < kh; ++i) {
                                            int num = ih + 1 - i;
                                            if (num < 0 || (num & 1)) continue;
                                            int oh = num / 2;
                                            if (oh >= OH) continue;
                                            for (int j = 0; j < kw; ++j) {
                                                int numw = iw + 1 - j;
                                                if (numw < 0 || (numw & 1)) continue;
                                                int ow = numw / 2;
                                                if (ow >= OW) continue;
                                                acc += static_cast<double>(gout[oh * OW + ow]) * wc[i * kw + j];
                                            }
                                        }
                                    }
                                    xn.grad[((img * C + c) * H + ih) * Wd + iw] += static_cast<float>(acc);
                                }
                }
                if (want(n.b)) {
                    Node& wn = touch(n.b);
                    for (int f = 0; f < F; ++f)
                        for (int c = 0; c < C; ++c)
                            for (int i = 0; i < kh; ++i)
                                for (int j = 0; j < kw; ++j) {
                                    double acc = 0.0;
                                    for (int img = 0; img < N; ++img) {
                                        const float* gout =
                                            g.data.data() + ((static_cast<size_t>(img) * F + f) * OH) * OW;
                                        const float* xc =
                                            X.data.data() + ((static_cast<size_t>(img) * C + c) * H) * Wd;
                                        for (int oh = 0; oh < OH; ++oh) {
                                            int ih = oh * 2 + i - 1;
                                            if (ih < 0 || ih >= H) continue;
                                            for (int ow = 0; ow < OW; ++ow) {
                                                int iw = ow * 2 + j - 1;
                                                if (iw < 0 || iw >= Wd) continue;
                                                acc += static_cast<double>(gout[oh * OW + ow]) * xc[ih * Wd + iw];
                                            }
                                        }
                                    }
                                    wn.grad[((f * C + c) * kh + i) * kw + j] += static_cast<float>(acc);
                                }
                }
                if (want(n.c)) {
                    Node& bn2 = touch(n.c);
                    for (int f = 0; f < F; ++f) {
                        double acc = 0.0;
                        for (int img = 0; img < N; ++img) {
                            const float* gout = g.data.data() + ((static_cast<size_t>(img) * F + f) * OH) * OW;
                            for (int s = 0; s < OH * OW; ++s) acc += gout[s];
                        }
                        bn2.grad[f] += static_cast<float>(acc);
                    }
                }
                break;
            }
            case Op::Deconv2dS2: {
                const NdBuffer& X = nodes_[static_cast<size_t>(n.a)].val;
                const NdBuffer& W = nodes_[static_cast<size_t>(n.b)].val;
                int N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
                int F = W.dim(1), kh = W.dim(2), kw = W.dim(3);
                int OH = n.val.dim(2), OW = n.val.dim(3);
                if (want(n.a)) {
                    Node& xn = touch(n.a);
                    for (int img = 0; img < N; ++img)
                        for (int c = 0; c < C; ++c)
                            for (int ih = 0; ih < H; ++ih)
                                for (int iw = 0; iw < Wd; ++iw) {
                                    double acc = 0.0;
                                    for (int f = 0; f < F; ++f) {
                                        const float* gout =
                                            g.data.data() + ((static_cast<size_t>(img) * F + f) * OH) * OW;
                                        const float* wc =
                                            W.data.data() + ((static_cast<size_t>(c) * F + f) * kh) * kw;
                                        for (int i = 0; i < kh; ++i) {
                                            int oh = ih * 2 + i - 1;
                                            if (oh < 0 || oh >= OH) continue;
                                            for (int j = 0; j < kw; ++j) {
                                                int ow = iw * 2 + j - 1;
                                                if (ow < 0 || ow >= OW) continue;
                                                acc += static_cast<double>(gout[oh * OW + ow]) * wc[i * kw + j];
                                            }
                                        }
                                    }
                                    xn.grad[((img * C + c) * H + ih) * Wd + iw] += static_cast<float>(acc);
                                }
                }
                if (want(n.b)) {
                    Node& wn = touch(n.b);
                    for (int c = 0; c < C; ++c)
                        for (int f = 0; f < F; ++f)
                            for (int i = 0; i < kh; ++i)
                                for (int j = 0; j < kw; ++j) {
                                    double acc = 0.0;
                                    for (int img = 0; img < N; ++img) {
                                        const float* gout =
                                            g.data.data() + ((static_cast<size_t>(img) * F + f) * OH) * OW;
                                        const float* xc =
                                            X.data.data() + ((static_cast<size_t>(img) * C + c) * H) * Wd;
                                        for (int ih = 0; ih < H; ++ih) {
                                            int oh = ih * 2 + i - 1;
                                            if (oh < 0 || oh >= OH) continue;
                                            for (int iw = 0; iw < Wd; ++iw) {
                                                int ow = iw * 2 + j - 1;
                                                if (ow < 0 || ow >= OW) continue;
                                                acc += static_cast<double>(xc[ih * Wd + iw]) * gout[oh * OW + ow];
                                            }
                                        }
                                    }
                                    wn.grad[((c * F + f) * kh + i) * kw + j] += static_cast<float>(acc);
                                }
                }
                if (want(n.c)) {
                    Node& bn2 = touch(n.c);
                    for (int f = 0; f < F; ++f) {
                        double acc = 0.0;
                        for (int img = 0; img < N; ++img) {
                            const float* gout = g.data.data() + ((static_cast<size_t>(img) * F + f) * OH) * OW;
                            for (int s = 0; s < OH * OW; ++s) acc += gout[s];
                        }
                        bn2.grad[f] += static_cast<float>(acc);
                    }
                }
                break;
            }
            case Op::BatchNorm: {
                const NdBuffer& X = nodes_[static_cast<size_t>(n.a)].val;
                const NdBuffer& G = nodes_[static_cast<size_t>(n.b)].val;
                int N = X.dim(0), C = X.dim(1);
                int spatial = X.ndim() == 4 ? X.dim(2) * X.dim(3) : 1;
                int m = N * spatial;
                bool trained = n.scalar != 0.0f;
                auto index_of = [&](int img, int c, int s) {
                    return (static_cast<size_t>(img) * C + c) * spatial + static_cast<size_t>(s);
                };
                for (int c = 0; c < C; ++c) {
                    float mean = n.aux[static_cast<size_t>(c)];
                    float istd = n.aux[static_cast<size_t>(C + c)];
                    float gam = G[c];
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int img = 0; img < N; ++img)
                        for (int s = 0; s < spatial; ++s) {
                            size_t i = index_of(img, c, s);
                            float xhat = (X.data[i] - mean) * istd;
                            sum_g += g.data[i];
                            sum_gx += static_cast<double>(g.data[i]) * xhat;
                        }
                    if (want(n.b)) touch(n.b).grad[c] += static_cast<float>(sum_gx);
                    if (want(n.c)) touch(n.c).grad[c] += static_cast<float>(sum_g);
                    if (want(n.a)) {
                        Node& xn = touch(n.a);
                        if (trained) {
                            for (int img = 0; img < N; ++img)
                                for (int s = 0; s < spatial; ++s) {
                                    size_t i = index_of(img, c, s);
                                    float xhat = (X.data[i] - mean) * istd;
                                    double t = m * static_cast<double>(g.data[i]) - sum_g - xhat * sum_gx;
                                    xn.grad.data[i] += static_cast<float>(gam * istd * t / m);
                                }
                        } else {
                            for (int img = 0; img < N; ++img)
                                for (int s = 0; s < spatial; ++s) {
                                    size_t i = index_of(img, c, s);
                                    xn.grad.data[i] += gam * istd * g.data[i];
                                }
                        }
                    }
                }
                break;
            }
            case Op::Mse: {
                const NdBuffer& A = nodes_[static_cast<size_t>(n.a)].val;
                const NdBuffer& B = nodes_[static_cast<size_t>(n.b)].val;
                float gs = g[0] / n.scalar;
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < A.numel(); ++i) an.grad[i] += gs * (A[i] - B[i]);
                }
                if (want(n.b)) {
                    Node& bn = touch(n.b);
                    for (int i = 0; i < A.numel(); ++i) bn.grad[i] -= gs * (A[i] - B[i]);
                }
                break;
            }
            case Op::SquareNorm: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    const NdBuffer& va = an.val;
                    float gs = 2.0f * g[0];
                    for (int i = 0; i < va.numel(); ++i) an.grad[i] += gs * va[i];
                }
                break;
            }
            case Op::SquareNormLast: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    const NdBuffer& va = an.val;
                    int rows = va.dim(0), cols = va.dim(1);
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < cols; ++c) an.grad[r * cols + c] += 2.0f * g[r] * va[r * cols + c];
                }
                break;
            }
            case Op::SumLast: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    int rows = an.val.dim(0), cols = an.val.dim(1);
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < cols; ++c) an.grad[r * cols + c] += g[r];
                }
                break;
            }
            case Op::SumAll: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < an.val.numel(); ++i) an.grad[i] += g[0];
                }
                break;
            }
            case Op::MeanAll: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    float gs = g[0] / n.scalar;
                    for (int i = 0; i < an.val.numel(); ++i) an.grad[i] += gs;
                }
                break;
            }
            case Op::Pick: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    int cols = an.val.dim(1);
                    for (size_t r = 0; r < n.idx.size(); ++r)
                        an.grad[static_cast<int>(r) * cols + n.idx[r]] += g[static_cast<int>(r)];
                }
                break;
            }
            case Op::ConcatCols: {
                const NdBuffer& A = nodes_[static_cast<size_t>(n.a)].val;
                const NdBuffer& B = nodes_[static_cast<size_t>(n.b)].val;
                int rows = A.dim(0), p = A.dim(1), q = B.dim(1);
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < p; ++c) an.grad[r * p + c] += g[r * (p + q) + c];
                }
                if (want(n.b)) {
                    Node& bn = touch(n.b);
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < q; ++c) bn.grad[r * q + c] += g[r * (p + q) + p + c];
                }
                break;
            }
            case Op::SliceRow: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    int cols = an.val.dim(1);
                    int row = n.idx[0];
                    for (int c = 0; c < cols; ++c) an.grad[row * cols + c] += g[c];
                }
                break;
            }
            case Op::TileRows: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    int rows = n.val.dim(0), cols = n.val.dim(1);
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < cols; ++c) an.grad[c] += g[r * cols + c];
                }
                break;
            }
            case Op::Reshape: {
                if (want(n.a)) {
                    Node& an = touch(n.a);
                    for (int i = 0; i < g.numel(); ++i) an.grad[i] += g[i];
                }
                break;
            }
        }
    }
}

}  // namespace icf::grad
