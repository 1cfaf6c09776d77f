#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "icf/grad/ndbuffer.hpp"

namespace icf::grad {

// A named trainable buffer paired with a persistent gradient accumulator.
// backward() adds into grad; it is only cleared by zero_grad().
struct Parameter {
    std::string name;
    NdBuffer value;
    NdBuffer grad;

    Parameter(std::string n, NdBuffer v);
    void zero_grad();
};

// Owns parameters. Iteration order is insertion order so checkpoints and
// optimizer walks are reproducible.
class ParamStore {
  public:
    Parameter* create(const std::string& name, NdBuffer init);
    Parameter* find(const std::string& name);
    Parameter& at(const std::string& name);
    const std::vector<std::unique_ptr<Parameter>>& items() const { return items_; }
    void zero_grad();

  private:
    std::vector<std::unique_ptr<Parameter>> items_;
    std::unordered_map<std::string, size_t> index_;
};

struct Value {
    int id = -1;
};

// Reverse-mode tape over NdBuffer. Ops evaluate eagerly and record one node
// each; backward() walks the records in reverse. Nodes are appended in
// creation order, so every node's inputs precede it. One tape per training
// step; parameters outlive tapes.
class Tape {
  public:
    explicit Tape(bool train_mode = true);

    static constexpr float kEps = 1e-8f;     // log / division guard
    static constexpr float kBnEps = 1e-5f;   // batchnorm variance guard

    Value input(NdBuffer v);
    Value param(Parameter& p);

    // Elementwise (same shape unless noted).
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value div(Value a, Value b);  // |denominator| clamped to kEps, sign kept
    Value scale(Value a, float c);
    Value add_scalar(Value a, float c);
    Value abs(Value a);
    Value max0(Value a);
    Value relu(Value a) { return max0(a); }
    Value leaky_relu(Value a, float slope);
    Value tanh(Value a);
    Value exp(Value a);
    Value log(Value a);  // input clamped to kEps

    // Layers.
    Value softmax(Value a);  // rows of [N,A]
    Value matmul(Value a, Value b);
    Value fully_connected(Value x, Value w, Value b);  // x[N,in] w[in,out] b[out]
    // x[N,C,H,W], w[F,C,kh,kw], b[F]; stride 2, padding 1.
    Value conv2d_s2(Value x, Value w, Value b);
    // x[N,C,H,W], w[C,F,kh,kw], b[F]; stride 2, padding 1, explicit output size.
    Value deconv2d_s2(Value x, Value w, Value b, int out_h, int out_w);
    // x[N,D] or x[N,C,H,W]; gamma/beta shaped [D] or [C]. Train mode uses
    // batch statistics (batch >= 2) and momentum-updates the running buffers;
    // eval mode normalizes with the running statistics.
    Value batchnorm(Value x, Value gamma, Value beta, NdBuffer& run_mean, NdBuffer& run_var, float momentum);
    // 0.5 * sum((a-b)^2) / batch where batch = a.shape[0]. Scalar output.
    Value mse(Value a, Value b);

    // Reductions / indexing.
    Value square_norm(Value a);       // scalar: sum of squares over all elements
    Value square_norm_last(Value a);  // [N,K] -> [N]
    Value sum_last(Value a);          // [N,K] -> [N]
    Value sum_all(Value a);           // scalar
    Value mean_all(Value a);          // scalar
    Value pick(Value a, std::vector<int> idx);  // [N,A] -> [N], one column per row
    Value concat_cols(Value a, Value b);        // [N,p] + [N,q] -> [N,p+q]
    Value slice_row(Value a, int row);          // [N,D] -> [1,D]
    Value tile_rows(Value a, int n);            // [1,D] -> [n,D]
    Value reshape(Value a, std::vector<int> shape);
    // Value copy with no backward connection.
    Value detach(Value a);

    // Accumulates into Parameter::grad for every parameter reachable from
    // `loss`. Throws if loss is not scalar. Calling twice accumulates.
    void backward(Value loss);

    const NdBuffer& val(Value v) const;
    // Gradient of the last backward() at this node (for tests / inspection).
    const NdBuffer& grad(Value v) const;
    bool train_mode() const { return train_mode_; }
    size_t size() const { return nodes_.size(); }

  private:
    struct Node;
    Value push(Node n);
    Node& node(Value v);
    const Node& node(Value v) const;
    void check_same_shape(const char* op, Value a, Value b) const;

    std::vector<Node> nodes_;
    bool train_mode_;
};

}  // namespace icf::grad
