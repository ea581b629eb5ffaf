#ifndef NBNET_NN_HPP
#define NBNET_NN_HPP

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "nbnet/blas.hpp"
#include "nbnet/errors.hpp"
#include "nbnet/rng.hpp"
#include "nbnet/tensor.hpp"

namespace nbnet {

template <class T>
struct ParamRef {
    std::string name;
    Tensor<T>* value;
    Tensor<T>* grad;
};

template <class T>
using ParamList = std::vector<ParamRef<T>>;

template <class T>
void zero_grads(ParamList<T>& params) {
    for (auto& p : params) p.grad->zero();
}

namespace detail {

// col has layout [C*kh*kw, oH*oW] for a single image x[C,H,W].
template <class T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad,
            int oh, int ow, T* col) {
    for (int ch = 0; ch < c; ++ch) {
        for (int kr = 0; kr < kh; ++kr) {
            for (int kc = 0; kc < kw; ++kc) {
                T* dst = col + ((ch * kh + kr) * kw + kc) * (oh * ow);
                for (int r = 0; r < oh; ++r) {
                    int ir = r * stride - pad + kr;
                    if (ir < 0 || ir >= h) {
                        std::memset(dst + r * ow, 0, sizeof(T) * std::size_t(ow));
                        continue;
                    }
                    const T* src = x + (ch * h + ir) * w;
                    for (int q = 0; q < ow; ++q) {
                        int ic = q * stride - pad + kc;
                        dst[r * ow + q] = (ic >= 0 && ic < w) ? src[ic] : T(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates col back into x (caller zeroes x first).
template <class T>
void col2im(const T* col, int c, int h, int w, int kh, int kw, int stride, int pad,
            int oh, int ow, T* x) {
    for (int ch = 0; ch < c; ++ch) {
        for (int kr = 0; kr < kh; ++kr) {
            for (int kc = 0; kc < kw; ++kc) {
                const T* src = col + ((ch * kh + kr) * kw + kc) * (oh * ow);
                for (int r = 0; r < oh; ++r) {
                    int ir = r * stride - pad + kr;
                    if (ir < 0 || ir >= h) continue;
                    T* dst = x + (ch * h + ir) * w;
                    for (int q = 0; q < ow; ++q) {
                        int ic = q * stride - pad + kc;
                        if (ic >= 0 && ic < w) dst[ic] += src[r * ow + q];
                    }
                }
            }
        }
    }
}

inline int conv_out_size(int in, int k, int stride, int pad) {
    int num = in + 2 * pad - k;
    if (num < 0)
        throw ShapeError("convolution kernel larger than padded input: in=" + std::to_string(in) +
                         " k=" + std::to_string(k) + " pad=" + std::to_string(pad));
    return num / stride + 1;
}

inline int deconv_out_size(int in, int k, int stride, int pad) {
    int out = (in - 1) * stride - 2 * pad + k;
    if (out <= 0) throw ShapeError("de-convolution output size would be non-positive");
    return out;
}

}  // namespace detail

/** Convolution without bias; batch-norm always follows it in this library. */
template <class T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int k, int stride, int pad)
        : in_ch_(in_ch), out_ch_(out_ch), kh_(k), kw_(k), stride_(stride), pad_(pad),
          w_({std::size_t(out_ch), std::size_t(in_ch), std::size_t(k), std::size_t(k)}),
          dw_(w_.shape) {}

    void init_normal(Rng& rng, double stddev) {
        for (auto& x : w_.v) x = T(rng.normal(0.0, stddev));
    }
    void init_lecun(Rng& rng) {
        double stddev = 1.0 / std::sqrt(double(in_ch_) * kh_ * kw_);
        init_normal(rng, stddev);
    }

    int in_channels() const { return in_ch_; }
    int out_channels() const { return out_ch_; }
    int kernel() const { return kh_; }

    Tensor<T> forward(const Tensor<T>& x) { return run(x, &cols_); }

    Tensor<T> infer(const Tensor<T>& x) const {
        return const_cast<Conv2d*>(this)->run(x, nullptr);
    }

    // Returns dx; accumulates into dw_.
    Tensor<T> backward(const Tensor<T>& dy) {
        int n = int(x_shape_[0]), h = int(x_shape_[2]), w = int(x_shape_[3]);
        int oh = int(dy.shape[2]), ow = int(dy.shape[3]);
        int kdim = in_ch_ * kh_ * kw_, osz = oh * ow;
        Tensor<T> dx(x_shape_);
        std::vector<T> dcol(std::size_t(kdim) * osz);
        for (int i = 0; i < n; ++i) {
            const T* dyp = dy.data() + std::size_t(i) * out_ch_ * osz;
            const T* colp = cols_.data() + std::size_t(i) * kdim * osz;
            // dW += dy * col^T
            gemm(false, true, out_ch_, kdim, osz, T(1), dyp, osz, colp, osz, T(1),
                 dw_.data(), kdim);
            // dcol = W^T * dy, scattered back to dx
            gemm(true, false, kdim, osz, out_ch_, T(1), w_.data(), kdim, dyp, osz, T(0),
                 dcol.data(), osz);
            detail::col2im(dcol.data(), in_ch_, h, w, kh_, kw_, stride_, pad_, oh, ow,
                           dx.data() + std::size_t(i) * in_ch_ * h * w);
        }
        return dx;
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        out.push_back({prefix + ".w", &w_, &dw_});
    }

    Tensor<T>& weight() { return w_; }
    const Tensor<T>& weight() const { return w_; }

private:
    Tensor<T> run(const Tensor<T>& x, std::vector<T>* keep_cols) {
        if (x.rank() != 4 || int(x.shape[1]) != in_ch_)
            throw ShapeError("Conv2d: expected input (N," + std::to_string(in_ch_) +
                             ",H,W), got " + shape_str(x.shape));
        int n = int(x.shape[0]), h = int(x.shape[2]), w = int(x.shape[3]);
        int oh = detail::conv_out_size(h, kh_, stride_, pad_);
        int ow = detail::conv_out_size(w, kw_, stride_, pad_);
        int kdim = in_ch_ * kh_ * kw_, osz = oh * ow;
        Tensor<T> y({std::size_t(n), std::size_t(out_ch_), std::size_t(oh), std::size_t(ow)});
        std::vector<T> local;
        std::vector<T>* cols = keep_cols ? keep_cols : &local;
        cols->resize(std::size_t(n) * kdim * osz);
        if (keep_cols) x_shape_ = x.shape;
        for (int i = 0; i < n; ++i) {
            T* colp = cols->data() + std::size_t(i) * kdim * osz;
            detail::im2col(x.data() + std::size_t(i) * in_ch_ * h * w, in_ch_, h, w, kh_, kw_,
                           stride_, pad_, oh, ow, colp);
            gemm(false, false, out_ch_, osz, kdim, T(1), w_.data(), kdim, colp, osz, T(0),
                 y.data() + std::size_t(i) * out_ch_ * osz, osz);
        }
        return y;
    }

    int in_ch_ = 0, out_ch_ = 0, kh_ = 0, kw_ = 0, stride_ = 1, pad_ = 0;
    Tensor<T> w_, dw_;
    std::vector<T> cols_;
    Shape x_shape_;
};

/**
 * Transposed convolution (de-convolution), no bias. Weight layout
 * [in_ch, out_ch, kh, kw]; output size (in-1)*stride - 2*pad + k.
 */
template <class T>
class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(int in_ch, int out_ch, int k, int stride, int pad)
        : in_ch_(in_ch), out_ch_(out_ch), kh_(k), kw_(k), stride_(stride), pad_(pad),
          w_({std::size_t(in_ch), std::size_t(out_ch), std::size_t(k), std::size_t(k)}),
          dw_(w_.shape) {}

    void init_normal(Rng& rng, double stddev) {
        for (auto& x : w_.v) x = T(rng.normal(0.0, stddev));
    }
    void init_lecun(Rng& rng) {
        double stddev = 1.0 / std::sqrt(double(in_ch_));
        init_normal(rng, stddev);
    }

    int in_channels() const { return in_ch_; }
    int out_channels() const { return out_ch_; }
    int kernel() const { return kh_; }
    int out_size(int in) const { return detail::deconv_out_size(in, kh_, stride_, pad_); }

    Tensor<T> forward(const Tensor<T>& x) {
        x_cache_ = x;
        return run(x);
    }

    Tensor<T> infer(const Tensor<T>& x) const { return run(x); }

    Tensor<T> backward(const Tensor<T>& dy) {
        const Tensor<T>& x = x_cache_;
        int n = int(x.shape[0]), h = int(x.shape[2]), w = int(x.shape[3]);
        int oh = int(dy.shape[2]), ow = int(dy.shape[3]);
        int kdim = out_ch_ * kh_ * kw_, isz = h * w;
        Tensor<T> dx(x.shape);
        std::vector<T> col(std::size_t(kdim) * isz);
        for (int i = 0; i < n; ++i) {
            // both grads need im2col of dy over the *output* image
            detail::im2col(dy.data() + std::size_t(i) * out_ch_ * oh * ow, out_ch_, oh, ow,
                           kh_, kw_, stride_, pad_, h, w, col.data());
            const T* xp = x.data() + std::size_t(i) * in_ch_ * isz;
            // dW += x * col^T
            gemm(false, true, in_ch_, kdim, isz, T(1), xp, isz, col.data(), isz, T(1),
                 dw_.data(), kdim);
            // dx = W * col
            gemm(false, false, in_ch_, isz, kdim, T(1), w_.data(), kdim, col.data(), isz,
                 T(0), dx.data() + std::size_t(i) * in_ch_ * isz, isz);
        }
        return dx;
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        out.push_back({prefix + ".w", &w_, &dw_});
    }

    Tensor<T>& weight() { return w_; }
    const Tensor<T>& weight() const { return w_; }

private:
    Tensor<T> run(const Tensor<T>& x) const {
        if (x.rank() != 4 || int(x.shape[1]) != in_ch_)
            throw ShapeError("ConvTranspose2d: expected input (N," + std::to_string(in_ch_) +
                             ",h,w), got " + shape_str(x.shape));
        int n = int(x.shape[0]), h = int(x.shape[2]), w = int(x.shape[3]);
        int oh = detail::deconv_out_size(h, kh_, stride_, pad_);
        int ow = detail::deconv_out_size(w, kw_, stride_, pad_);
        int kdim = out_ch_ * kh_ * kw_, isz = h * w;
        Tensor<T> y({std::size_t(n), std::size_t(out_ch_), std::size_t(oh), std::size_t(ow)});
        std::vector<T> col(std::size_t(kdim) * isz);
        for (int i = 0; i < n; ++i) {
            gemm(true, false, kdim, isz, in_ch_, T(1), w_.data(), kdim,
                 x.data() + std::size_t(i) * in_ch_ * isz, isz, T(0), col.data(), isz);
            detail::col2im(col.data(), out_ch_, oh, ow, kh_, kw_, stride_, pad_, h, w,
                           y.data() + std::size_t(i) * out_ch_ * oh * ow);
        }
        return y;
    }

    int in_ch_ = 0, out_ch_ = 0, kh_ = 0, kw_ = 0, stride_ = 1, pad_ = 0;
    Tensor<T> w_, dw_;
    Tensor<T> x_cache_;
};

/** Per-channel batch normalization over (N,H,W). */
template <class T>
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1)
        : c_(channels), eps_(eps), momentum_(momentum),
          gamma_({std::size_t(channels)}, T(1)), beta_({std::size_t(channels)}, T(0)),
          dgamma_({std::size_t(channels)}), dbeta_({std::size_t(channels)}),
          run_mean_({std::size_t(channels)}, T(0)), run_var_({std::size_t(channels)}, T(1)) {}

    int channels() const { return c_; }

    Tensor<T> forward(const Tensor<T>& x) {
        check(x);
        int n = int(x.shape[0]), h = int(x.shape[2]), w = int(x.shape[3]);
        std::size_t plane = std::size_t(h) * w;
        double m = double(n) * double(plane);
        mean_.assign(c_, 0.0);
        var_.assign(c_, 0.0);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c_; ++ch) {
                const T* p = x.data() + (std::size_t(i) * c_ + ch) * plane;
                double s = 0;
                for (std::size_t q = 0; q < plane; ++q) s += double(p[q]);
                mean_[ch] += s;
            }
        for (int ch = 0; ch < c_; ++ch) mean_[ch] /= m;
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c_; ++ch) {
                const T* p = x.data() + (std::size_t(i) * c_ + ch) * plane;
                double s = 0;
                for (std::size_t q = 0; q < plane; ++q) {
                    double d = double(p[q]) - mean_[ch];
                    s += d * d;
                }
                var_[ch] += s;
            }
        for (int ch = 0; ch < c_; ++ch) var_[ch] /= m;
        for (int ch = 0; ch < c_; ++ch) {
            run_mean_[ch] = T((1.0 - momentum_) * double(run_mean_[ch]) + momentum_ * mean_[ch]);
            run_var_[ch] = T((1.0 - momentum_) * double(run_var_[ch]) + momentum_ * var_[ch]);
        }
        xhat_ = Tensor<T>(x.shape);
        Tensor<T> y(x.shape);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c_; ++ch) {
                const T* p = x.data() + (std::size_t(i) * c_ + ch) * plane;
                T* xh = xhat_.data() + (std::size_t(i) * c_ + ch) * plane;
                T* yp = y.data() + (std::size_t(i) * c_ + ch) * plane;
                T inv = T(1.0 / std::sqrt(var_[ch] + eps_));
                T mu = T(mean_[ch]), g = gamma_[ch], b = beta_[ch];
                for (std::size_t q = 0; q < plane; ++q) {
                    xh[q] = (p[q] - mu) * inv;
                    yp[q] = g * xh[q] + b;
                }
            }
        return y;
    }

    Tensor<T> infer(const Tensor<T>& x) const {
        check(x);
        int n = int(x.shape[0]), h = int(x.shape[2]), w = int(x.shape[3]);
        std::size_t plane = std::size_t(h) * w;
        Tensor<T> y(x.shape);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c_; ++ch) {
                const T* p = x.data() + (std::size_t(i) * c_ + ch) * plane;
                T* yp = y.data() + (std::size_t(i) * c_ + ch) * plane;
                T inv = T(1.0 / std::sqrt(double(run_var_[ch]) + eps_));
                T mu = run_mean_[ch], g = gamma_[ch], b = beta_[ch];
                for (std::size_t q = 0; q < plane; ++q) yp[q] = g * (p[q] - mu) * inv + b;
            }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        int n = int(dy.shape[0]), h = int(dy.shape[2]), w = int(dy.shape[3]);
        std::size_t plane = std::size_t(h) * w;
        double m = double(n) * double(plane);
        Tensor<T> dx(dy.shape);
        for (int ch = 0; ch < c_; ++ch) {
            double sum_dy = 0, sum_dy_xhat = 0;
            for (int i = 0; i < n; ++i) {
                const T* d = dy.data() + (std::size_t(i) * c_ + ch) * plane;
                const T* xh = xhat_.data() + (std::size_t(i) * c_ + ch) * plane;
                for (std::size_t q = 0; q < plane; ++q) {
                    sum_dy += double(d[q]);
                    sum_dy_xhat += double(d[q]) * double(xh[q]);
                }
            }
            dgamma_[ch] += T(sum_dy_xhat);
            dbeta_[ch] += T(sum_dy);
            double inv = 1.0 / std::sqrt(var_[ch] + eps_);
            double g = double(gamma_[ch]);
            double mean_dy = sum_dy / m, mean_dy_xhat = sum_dy_xhat / m;
            for (int i = 0; i < n; ++i) {
                const T* d = dy.data() + (std::size_t(i) * c_ + ch) * plane;
                const T* xh = xhat_.data() + (std::size_t(i) * c_ + ch) * plane;
                T* dxp = dx.data() + (std::size_t(i) * c_ + ch) * plane;
                for (std::size_t q = 0; q < plane; ++q)
                    dxp[q] = T(g * inv *
                               (double(d[q]) - mean_dy - double(xh[q]) * mean_dy_xhat));
            }
        }
        return dx;
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        out.push_back({prefix + ".gamma", &gamma_, &dgamma_});
        out.push_back({prefix + ".beta", &beta_, &dbeta_});
    }

    Tensor<T>& running_mean() { return run_mean_; }
    Tensor<T>& running_var() { return run_var_; }
    const Tensor<T>& running_mean() const { return run_mean_; }
    const Tensor<T>& running_var() const { return run_var_; }

private:
    void check(const Tensor<T>& x) const {
        if (x.rank() != 4 || int(x.shape[1]) != c_)
            throw ShapeError("BatchNorm2d(" + std::to_string(c_) + "): got " +
                             shape_str(x.shape));
    }

    int c_ = 0;
    double eps_ = 1e-5, momentum_ = 0.1;
    Tensor<T> gamma_, beta_, dgamma_, dbeta_, run_mean_, run_var_;
    std::vector<double> mean_, var_;
    Tensor<T> xhat_;
};

template <class T>
struct ReLU {
    Tensor<T> forward(const Tensor<T>& x) {
        y_ = infer(x);
        return y_;
    }
    Tensor<T> infer(const Tensor<T>& x) const {
        Tensor<T> y(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) const {
        Tensor<T> dx(dy.shape);
        for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] = y_[i] > T(0) ? dy[i] : T(0);
        return dx;
    }
    Tensor<T> y_;
};

template <class T>
struct Tanh {
    Tensor<T> forward(const Tensor<T>& x) {
        y_ = infer(x);
        return y_;
    }
    Tensor<T> infer(const Tensor<T>& x) const {
        Tensor<T> y(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) y[i] = std::tanh(x[i]);
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) const {
        Tensor<T> dx(dy.shape);
        for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * (T(1) - y_[i] * y_[i]);
        return dx;
    }
    Tensor<T> y_;
};

// Self-normalizing activation; the published constants.
constexpr double kSeluLambda = 1.0507009873554804934193349852946;
constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

template <class T>
struct SeLU {
    Tensor<T> forward(const Tensor<T>& x) {
        y_ = infer(x);
        return y_;
    }
    Tensor<T> infer(const Tensor<T>& x) const {
        const T l = T(kSeluLambda), a = T(kSeluAlpha);
        Tensor<T> y(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i)
            y[i] = x[i] > T(0) ? l * x[i] : l * a * (std::exp(x[i]) - T(1));
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) const {
        const T l = T(kSeluLambda), a = T(kSeluAlpha);
        Tensor<T> dx(dy.shape);
        for (std::size_t i = 0; i < dy.numel(); ++i)
            dx[i] = dy[i] * (y_[i] > T(0) ? l : y_[i] + l * a);
        return dx;
    }
    Tensor<T> y_;
};

/** Fully connected layer with bias. Input (N, in), output (N, out). */
template <class T>
class Dense {
public:
    Dense() = default;
    Dense(int in, int out)
        : in_(in), out_(out), w_({std::size_t(out), std::size_t(in)}), dw_(w_.shape),
          b_({std::size_t(out)}), db_(b_.shape) {}

    void init_normal(Rng& rng, double stddev) {
        for (auto& x : w_.v) x = T(rng.normal(0.0, stddev));
        b_.zero();
    }
    void init_he(Rng& rng) { init_normal(rng, std::sqrt(2.0 / double(in_))); }

    Tensor<T> forward(const Tensor<T>& x) {
        x_ = x;
        return infer(x);
    }

    Tensor<T> infer(const Tensor<T>& x) const {
        if (x.rank() != 2 || int(x.shape[1]) != in_)
            throw ShapeError("Dense: expected (N," + std::to_string(in_) + "), got " +
                             shape_str(x.shape));
        int n = int(x.shape[0]);
        Tensor<T> y({std::size_t(n), std::size_t(out_)});
        for (int i = 0; i < n; ++i)
            std::memcpy(y.data() + std::size_t(i) * out_, b_.data(), sizeof(T) * out_);
        gemm(false, true, n, out_, in_, T(1), x.data(), in_, w_.data(), in_, T(1),
             y.data(), out_);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        int n = int(dy.shape[0]);
        gemm(true, false, out_, in_, n, T(1), dy.data(), out_, x_.data(), in_, T(1),
             dw_.data(), in_);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out_; ++j) db_[j] += dy.data()[std::size_t(i) * out_ + j];
        Tensor<T> dx({std::size_t(n), std::size_t(in_)});
        gemm(false, false, n, in_, out_, T(1), dy.data(), out_, w_.data(), in_, T(0),
             dx.data(), in_);
        return dx;
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        out.push_back({prefix + ".w", &w_, &dw_});
        out.push_back({prefix + ".b", &b_, &db_});
    }

    Tensor<T>& weight() { return w_; }
    Tensor<T>& bias() { return b_; }

private:
    int in_ = 0, out_ = 0;
    Tensor<T> w_, dw_, b_, db_, x_;
};

template <class T>
struct GlobalAvgPool {
    Tensor<T> forward(const Tensor<T>& x) {
        shape_ = x.shape;
        return infer(x);
    }
    Tensor<T> infer(const Tensor<T>& x) const {
        int n = int(x.shape[0]), c = int(x.shape[1]);
        std::size_t plane = x.shape[2] * x.shape[3];
        Tensor<T> y({std::size_t(n), std::size_t(c)});
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const T* p = x.data() + (std::size_t(i) * c + ch) * plane;
                double s = 0;
                for (std::size_t q = 0; q < plane; ++q) s += double(p[q]);
                y.at2(i, ch) = T(s / double(plane));
            }
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) const {
        int n = int(shape_[0]), c = int(shape_[1]);
        std::size_t plane = shape_[2] * shape_[3];
        Tensor<T> dx(shape_);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                T g = dy.at2(i, ch) / T(double(plane));
                T* p = dx.data() + (std::size_t(i) * c + ch) * plane;
                for (std::size_t q = 0; q < plane; ++q) p[q] = g;
            }
        return dx;
    }
    Shape shape_;
};

/** Row-wise L2 normalization of (N, C). */
template <class T>
struct L2Normalize {
    Tensor<T> forward(const Tensor<T>& x) {
        y_ = infer(x);
        norms_.resize(x.shape[0]);
        int c = int(x.shape[1]);
        for (std::size_t i = 0; i < x.shape[0]; ++i) {
            double s = 0;
            for (int j = 0; j < c; ++j) s += double(x.at2(i, j)) * double(x.at2(i, j));
            norms_[i] = std::max(std::sqrt(s), 1e-12);
        }
        return y_;
    }
    Tensor<T> infer(const Tensor<T>& x) const {
        int c = int(x.shape[1]);
        Tensor<T> y(x.shape);
        for (std::size_t i = 0; i < x.shape[0]; ++i) {
            double s = 0;
            for (int j = 0; j < c; ++j) s += double(x.at2(i, j)) * double(x.at2(i, j));
            T inv = T(1.0 / std::max(std::sqrt(s), 1e-12));
            for (int j = 0; j < c; ++j) y.at2(i, j) = x.at2(i, j) * inv;
        }
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) const {
        int c = int(dy.shape[1]);
        Tensor<T> dx(dy.shape);
        for (std::size_t i = 0; i < dy.shape[0]; ++i) {
            double dot = 0;
            for (int j = 0; j < c; ++j) dot += double(y_.at2(i, j)) * double(dy.at2(i, j));
            for (int j = 0; j < c; ++j)
                dx.at2(i, j) = T((double(dy.at2(i, j)) - double(y_.at2(i, j)) * dot) / norms_[i]);
        }
        return dx;
    }
    Tensor<T> y_;
    std::vector<double> norms_;
};

/** Adam with bias correction. Moment buffers align with the param list. */
template <class T>
class Adam {
public:
    Adam() = default;
    Adam(double beta1, double beta2, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void attach(const ParamList<T>& params) {
        m_.clear();
        v_.clear();
        for (auto& p : params) {
            m_.emplace_back(p.value->shape);
            v_.emplace_back(p.value->shape);
        }
        t_ = 0;
    }

    void step(ParamList<T>& params, double lr) {
        if (m_.size() != params.size())
            throw ValidationError("Adam: optimizer not attached to this parameter list");
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, double(t_));
        double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            T* w = params[k].value->data();
            const T* g = params[k].grad->data();
            T* m = m_[k].data();
            T* v = v_[k].data();
            std::size_t n = params[k].value->numel();
            for (std::size_t i = 0; i < n; ++i) {
                double gi = double(g[i]);
                double mi = beta1_ * double(m[i]) + (1.0 - beta1_) * gi;
                double vi = beta2_ * double(v[i]) + (1.0 - beta2_) * gi * gi;
                m[i] = T(mi);
                v[i] = T(vi);
                double mhat = mi / bc1, vhat = vi / bc2;
                w[i] = T(double(w[i]) - lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    long step_count() const { return t_; }
    void set_step_count(long t) { t_ = t; }
    std::vector<Tensor<T>>& m() { return m_; }
    std::vector<Tensor<T>>& v() { return v_; }

private:
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    long t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

// Channel concatenation of NCHW tensors with equal N,H,W.
template <class T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
    if (parts.empty()) throw ValidationError("concat_channels: no inputs");
    std::size_t n = parts[0]->shape[0], h = parts[0]->shape[2], w = parts[0]->shape[3];
    std::size_t ctot = 0;
    for (auto* p : parts) {
        if (p->shape[0] != n || p->shape[2] != h || p->shape[3] != w)
            throw ShapeError("concat_channels: mismatched shapes");
        ctot += p->shape[1];
    }
    Tensor<T> y({n, ctot, h, w});
    std::size_t plane = h * w;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t coff = 0;
        for (auto* p : parts) {
            std::size_t c = p->shape[1];
            std::memcpy(y.data() + (i * ctot + coff) * plane,
                        p->data() + i * c * plane, sizeof(T) * c * plane);
            coff += c;
        }
    }
    return y;
}

// Slices channels [c0, c0+c) out of an NCHW tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t c0, std::size_t c) {
    std::size_t n = x.shape[0], ctot = x.shape[1], h = x.shape[2], w = x.shape[3];
    if (c0 + c > ctot) throw ShapeError("slice_channels: out of range");
    Tensor<T> y({n, c, h, w});
    std::size_t plane = h * w;
    for (std::size_t i = 0; i < n; ++i)
        std::memcpy(y.data() + i * c * plane, x.data() + (i * ctot + c0) * plane,
                    sizeof(T) * c * plane);
    return y;
}

// y += x
template <class T>
void add_inplace(Tensor<T>& y, const Tensor<T>& x) {
    check_same_shape(y, x, "add_inplace");
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += x[i];
}

}

#endif
