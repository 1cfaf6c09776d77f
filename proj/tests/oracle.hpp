#pragma once

// Double-precision scalar-loop reference implementations used as the
// independent oracle for gradient and forward checks. Deliberately naive and
// kept free of any dependency on the tape engine.

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

using vec = std::vector<double>;

inline vec matmul(const vec& A, int m, int k, const vec& B, int p) {
    vec y(static_cast<size_t>(m) * p, 0.0);
    for (int i = 0; i < m; ++i)
        for (int t = 0; t < k; ++t)
            for (int j = 0; j < p; ++j) y[i * p + j] += A[i * k + t] * B[t * p + j];
    return y;
}

inline vec fully_connected(const vec& X, int m, int k, const vec& W, int p, const vec& b) {
    vec y = matmul(X, m, k, W, p);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < p; ++j) y[i * p + j] += b[j];
    return y;
}

// stride 2, padding 1
inline vec conv2d_s2(const vec& x, int N, int C, int H, int W, const vec& w, int F, int kh, int kw, const vec& bias,
                     int& OH, int& OW) {
    OH = (H + 2 - kh) / 2 + 1;
    OW = (W + 2 - kw) / 2 + 1;
    vec y(static_cast<size_t>(N) * F * OH * OW, 0.0);
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = bias[f];
                    for (int c = 0; c < C; ++c)
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j) {
                                int ih = oh * 2 + i - 1, iw = ow * 2 + j - 1;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x[((n * C + c) * H + ih) * W + iw] * w[((f * C + c) * kh + i) * kw + j];
                            }
                    y[((n * F + f) * OH + oh) * OW + ow] = acc;
                }
    return y;
}

// stride 2, padding 1, explicit output size; weight layout [C,F,kh,kw]
inline vec deconv2d_s2(const vec& x, int N, int C, int H, int W, const vec& w, int F, int kh, int kw, const vec& bias,
                       int OH, int OW) {
    vec y(static_cast<size_t>(N) * F * OH * OW, 0.0);
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) y[((n * F + f) * OH + oh) * OW + ow] = bias[f];
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int ih = 0; ih < H; ++ih)
                for (int iw = 0; iw < W; ++iw) {
                    double xv = x[((n * C + c) * H + ih) * W + iw];
                    for (int f = 0; f < F; ++f)
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j) {
                                int oh = ih * 2 + i - 1, ow = iw * 2 + j - 1;
                                if (oh < 0 || oh >= OH || ow < 0 || ow >= OW) continue;
                                y[((n * F + f) * OH + oh) * OW + ow] += xv * w[((c * F + f) * kh + i) * kw + j];
                            }
                }
    return y;
}

inline vec softmax(const vec& x, int rows, int cols) {
    vec y(x.size());
    for (int r = 0; r < rows; ++r) {
        double mx = x[r * cols];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, x[r * cols + c]);
        double sum = 0.0;
        for (int c = 0; c < cols; ++c) {
            y[r * cols + c] = std::exp(x[r * cols + c] - mx);
            sum += y[r * cols + c];
        }
        for (int c = 0; c < cols; ++c) y[r * cols + c] /= sum;
    }
    return y;
}

// train-mode batchnorm over [N,C,spatial]
inline vec batchnorm_train(const vec& x, int N, int C, int spatial, const vec& gamma, const vec& beta, double eps) {
    vec y(x.size());
    int m = N * spatial;
    for (int c = 0; c < C; ++c) {
        double mean = 0.0;
        for (int n = 0; n < N; ++n)
            for (int s = 0; s < spatial; ++s) mean += x[(n * C + c) * spatial + s];
        mean /= m;
        double var = 0.0;
        for (int n = 0; n < N; ++n)
            for (int s = 0; s < spatial; ++s) {
                double d = x[(n * C + c) * spatial + s] - mean;
                var += d * d;
            }
        var /= m;
        double istd = 1.0 / std::sqrt(var + eps);
        for (int n = 0; n < N; ++n)
            for (int s = 0; s < spatial; ++s) {
                size_t i = (n * C + c) * spatial + s;
                y[i] = gamma[c] * (x[i] - mean) * istd + beta[c];
            }
    }
    return y;
}

inline double mse(const vec& a, const vec& b, int batch) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return 0.5 * acc / batch;
}

inline vec relu(vec x) {
    for (double& v : x) v = v > 0.0 ? v : 0.0;
    return x;
}

inline vec leaky_relu(vec x, double slope) {
    for (double& v : x) v = v > 0.0 ? v : v * slope;
    return x;
}

inline vec tanh(vec x) {
    for (double& v : x) v = std::tanh(v);
    return x;
}

inline vec exp(vec x) {
    for (double& v : x) v = std::exp(v);
    return x;
}

inline vec log_clamped(vec x, double eps) {
    for (double& v : x) v = std::log(v < eps ? eps : v);
    return x;
}

inline vec abs(vec x) {
    for (double& v : x) v = std::fabs(v);
    return x;
}

inline double weighted_sum(const vec& x, const vec& w) {
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i) acc += x[i] * w[i];
    return acc;
}

}  // namespace oracle
