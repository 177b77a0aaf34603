#include "gci/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "gci/errors.hpp"

namespace gci {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t p = 1;
    for (std::size_t e : shape) p *= e;
    return p;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {
    if (shape_.empty()) throw std::invalid_argument("Tensor: shape must have >= 1 dimensions");
}

Tensor::Tensor(std::initializer_list<std::size_t> shape)
    : Tensor(std::vector<std::size_t>(shape)) {}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape.empty()) throw std::invalid_argument("Tensor: shape must have >= 1 dimensions");
    if (shape_product(shape) != data.size()) {
        std::ostringstream os;
        os << "Tensor: shape product " << shape_product(shape) << " != data length "
           << data.size();
        throw std::invalid_argument(os.str());
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    ensure_finite(t, "Tensor::from_data");
    return t;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
    if (!same_shape(other))
        throw std::invalid_argument("Tensor+=: shape mismatch " + shape_str() + " vs " +
                                    other.shape_str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    if (!same_shape(other))
        throw std::invalid_argument("Tensor-=: shape mismatch " + shape_str() + " vs " +
                                    other.shape_str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

void Tensor::axpy(double a, const Tensor& x) {
    if (!same_shape(x))
        throw std::invalid_argument("Tensor::axpy: shape mismatch " + shape_str() + " vs " +
                                    x.shape_str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * x.data_[i];
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

void ensure_finite(const Tensor& t, const char* context) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(t[i])) {
            std::ostringstream os;
            os << context << ": non-finite value (" << t[i] << ") at flat index " << i;
            throw NumericError(os.str());
        }
    }
}

void ensure_finite(double v, const char* context) {
    if (!std::isfinite(v)) {
        std::ostringstream os;
        os << context << ": non-finite value (" << v << ")";
        throw NumericError(os.str());
    }
}

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

void gemm_accum(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d via im2col + GEMM
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    std::size_t cin, h, w, cout, k;
    int stride, pad;
    std::size_t oh, ow;
};

ConvDims check_conv_args(const Tensor& input, const Tensor& kernel, int stride, int pad,
                         const char* op) {
    std::ostringstream os;
    if (input.rank() != 3) {
        os << op << ": input must be rank 3 [Cin,H,W], got " << input.shape_str();
        throw std::invalid_argument(os.str());
    }
    if (kernel.rank() != 4) {
        os << op << ": kernel must be rank 4 [Cout,Cin,k,k], got " << kernel.shape_str();
        throw std::invalid_argument(os.str());
    }
    ConvDims d;
    d.cin = input.extent(0);
    d.h = input.extent(1);
    d.w = input.extent(2);
    d.cout = kernel.extent(0);
    d.k = kernel.extent(2);
    d.stride = stride;
    d.pad = pad;
    if (kernel.extent(1) != d.cin) {
        os << op << ": kernel input-channel dim " << kernel.extent(1)
           << " != input channel dim " << d.cin;
        throw std::invalid_argument(os.str());
    }
    if (kernel.extent(3) != d.k) {
        os << op << ": kernel must be square, got " << kernel.extent(2) << "x"
           << kernel.extent(3);
        throw std::invalid_argument(os.str());
    }
    if (d.k % 2 == 0) {
        os << op << ": kernel size " << d.k << " must be odd";
        throw std::invalid_argument(os.str());
    }
    if (stride < 1) {
        os << op << ": stride " << stride << " must be >= 1";
        throw std::invalid_argument(os.str());
    }
    if (pad < 0) {
        os << op << ": pad " << pad << " must be >= 0";
        throw std::invalid_argument(os.str());
    }
    if (d.h + 2 * static_cast<std::size_t>(pad) < d.k) {
        os << op << ": padded height " << d.h + 2 * pad << " smaller than kernel size " << d.k;
        throw std::invalid_argument(os.str());
    }
    if (d.w + 2 * static_cast<std::size_t>(pad) < d.k) {
        os << op << ": padded width " << d.w + 2 * pad << " smaller than kernel size " << d.k;
        throw std::invalid_argument(os.str());
    }
    d.oh = (d.h + 2 * pad - d.k) / stride + 1;
    d.ow = (d.w + 2 * pad - d.k) / stride + 1;
    return d;
}

// Column matrix: rows indexed by (cin, ky, kx) matching the row-major kernel
// flattening, columns by output position.
void im2col(const Tensor& input, const ConvDims& d, std::vector<double>& col) {
    const std::size_t ncols = d.oh * d.ow;
    col.assign(d.cin * d.k * d.k * ncols, 0.0);
    const double* in = input.data();
    for (std::size_t c = 0; c < d.cin; ++c) {
        const double* inc = in + c * d.h * d.w;
        for (std::size_t ky = 0; ky < d.k; ++ky) {
            for (std::size_t kx = 0; kx < d.k; ++kx) {
                double* crow = col.data() + ((c * d.k + ky) * d.k + kx) * ncols;
                for (std::size_t oy = 0; oy < d.oh; ++oy) {
                    const long iy = static_cast<long>(oy) * d.stride + static_cast<long>(ky) -
                                    d.pad;
                    if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
                    const double* irow = inc + static_cast<std::size_t>(iy) * d.w;
                    double* orow = crow + oy * d.ow;
                    for (std::size_t ox = 0; ox < d.ow; ++ox) {
                        const long ix = static_cast<long>(ox) * d.stride +
                                        static_cast<long>(kx) - d.pad;
                        if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
                        orow[ox] = irow[ix];
                    }
                }
            }
        }
    }
}

void col2im_accum(const std::vector<double>& col, const ConvDims& d, Tensor& grad_input) {
    const std::size_t ncols = d.oh * d.ow;
    double* out = grad_input.data();
    for (std::size_t c = 0; c < d.cin; ++c) {
        double* outc = out + c * d.h * d.w;
        for (std::size_t ky = 0; ky < d.k; ++ky) {
            for (std::size_t kx = 0; kx < d.k; ++kx) {
                const double* crow = col.data() + ((c * d.k + ky) * d.k + kx) * ncols;
                for (std::size_t oy = 0; oy < d.oh; ++oy) {
                    const long iy = static_cast<long>(oy) * d.stride + static_cast<long>(ky) -
                                    d.pad;
                    if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
                    double* irow = outc + static_cast<std::size_t>(iy) * d.w;
                    const double* orow = crow + oy * d.ow;
                    for (std::size_t ox = 0; ox < d.ow; ++ox) {
                        const long ix = static_cast<long>(ox) * d.stride +
                                        static_cast<long>(kx) - d.pad;
                        if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
                        irow[ix] += orow[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad) {
    const ConvDims d = check_conv_args(input, kernel, stride, pad, "conv2d");
    std::vector<double> col;
    im2col(input, d, col);
    Tensor out({d.cout, d.oh, d.ow});
    gemm_accum(kernel.data(), col.data(), out.data(), d.cout, d.cin * d.k * d.k, d.oh * d.ow);
    ensure_finite(out, "conv2d");
    return out;
}

Tensor conv2d_grad_kernel(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                          int stride, int pad) {
    const ConvDims d = check_conv_args(input, kernel, stride, pad, "conv2d_grad_kernel");
    if (upstream.rank() != 3 || upstream.extent(0) != d.cout || upstream.extent(1) != d.oh ||
        upstream.extent(2) != d.ow) {
        throw std::invalid_argument("conv2d_grad_kernel: upstream shape " +
                                    upstream.shape_str() + " does not match output");
    }
    std::vector<double> col;
    im2col(input, d, col);
    // dK = upstream [Cout, OHW] x col^T [OHW, CinKK]
    const std::size_t ckk = d.cin * d.k * d.k;
    const std::size_t ncols = d.oh * d.ow;
    Tensor grad({d.cout, d.cin, d.k, d.k});
    std::vector<double> colT(col.size());
    for (std::size_t r = 0; r < ckk; ++r)
        for (std::size_t cidx = 0; cidx < ncols; ++cidx)
            colT[cidx * ckk + r] = col[r * ncols + cidx];
    gemm_accum(upstream.data(), colT.data(), grad.data(), d.cout, ncols, ckk);
    ensure_finite(grad, "conv2d_grad_kernel");
    return grad;
}

Tensor conv2d_grad_input(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                         int stride, int pad) {
    const ConvDims d = check_conv_args(input, kernel, stride, pad, "conv2d_grad_input");
    if (upstream.rank() != 3 || upstream.extent(0) != d.cout || upstream.extent(1) != d.oh ||
        upstream.extent(2) != d.ow) {
        throw std::invalid_argument("conv2d_grad_input: upstream shape " +
                                    upstream.shape_str() + " does not match output");
    }
    // dcol = K^T [CinKK, Cout] x upstream [Cout, OHW], then scatter back.
    const std::size_t ckk = d.cin * d.k * d.k;
    const std::size_t ncols = d.oh * d.ow;
    std::vector<double> kt(ckk * d.cout);
    const double* kd = kernel.data();
    for (std::size_t o = 0; o < d.cout; ++o)
        for (std::size_t r = 0; r < ckk; ++r) kt[r * d.cout + o] = kd[o * ckk + r];
    std::vector<double> dcol(ckk * ncols, 0.0);
    gemm_accum(kt.data(), upstream.data(), dcol.data(), ckk, d.cout, ncols);
    Tensor grad({d.cin, d.h, d.w});
    col2im_accum(dcol, d, grad);
    ensure_finite(grad, "conv2d_grad_input");
    return grad;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 3)
        throw std::invalid_argument("global_avg_pool: input must be rank 3 [C,H,W], got " +
                                    x.shape_str());
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    if (h == 0 || w == 0)
        throw std::invalid_argument("global_avg_pool: empty spatial extent " + x.shape_str());
    Tensor out({c});
    const double inv = 1.0 / static_cast<double>(h * w);
    for (std::size_t ci = 0; ci < c; ++ci) {
        double s = 0.0;
        const double* p = x.data() + ci * h * w;
        for (std::size_t i = 0; i < h * w; ++i) s += p[i];
        out[ci] = s * inv;
    }
    ensure_finite(out, "global_avg_pool");
    return out;
}

Tensor global_avg_pool_grad(const Tensor& x, const Tensor& upstream) {
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    if (upstream.rank() != 1 || upstream.extent(0) != c)
        throw std::invalid_argument("global_avg_pool_grad: upstream shape " +
                                    upstream.shape_str() + " != [C]");
    Tensor grad({c, h, w});
    const double inv = 1.0 / static_cast<double>(h * w);
    for (std::size_t ci = 0; ci < c; ++ci) {
        const double g = upstream[ci] * inv;
        double* p = grad.data() + ci * h * w;
        for (std::size_t i = 0; i < h * w; ++i) p[i] = g;
    }
    return grad;
}

Tensor max_pool2x2(const Tensor& x, std::vector<std::size_t>* argmax) {
    if (x.rank() != 3)
        throw std::invalid_argument("max_pool2x2: input must be rank 3 [C,H,W], got " +
                                    x.shape_str());
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0)
        throw std::invalid_argument("max_pool2x2: spatial extent " + x.shape_str() +
                                    " too small to pool");
    Tensor out({c, oh, ow});
    if (argmax) argmax->assign(c * oh * ow, 0);
    for (std::size_t ci = 0; ci < c; ++ci) {
        const double* in = x.data() + ci * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (2 * oy) * w + 2 * ox;
                double bv = in[best];
                const std::size_t cands[3] = {(2 * oy) * w + 2 * ox + 1,
                                              (2 * oy + 1) * w + 2 * ox,
                                              (2 * oy + 1) * w + 2 * ox + 1};
                for (std::size_t idx : cands) {
                    if (in[idx] > bv) {
                        bv = in[idx];
                        best = idx;
                    }
                }
                out.at(ci, oy, ox) = bv;
                if (argmax) (*argmax)[(ci * oh + oy) * ow + ox] = ci * h * w + best;
            }
        }
    }
    return out;
}

Tensor max_pool2x2_grad(const Tensor& x, const Tensor& upstream,
                        const std::vector<std::size_t>& argmax) {
    Tensor grad(x.shape());
    if (upstream.size() != argmax.size())
        throw std::invalid_argument("max_pool2x2_grad: upstream/argmax size mismatch");
    for (std::size_t i = 0; i < argmax.size(); ++i) grad[argmax[i]] += upstream[i];
    return grad;
}

Tensor temporal_max(const Tensor& feat, std::vector<std::size_t>* argmax) {
    if (feat.rank() != 4)
        throw std::invalid_argument("temporal_max: input must be rank 4 [T,C,H,W], got " +
                                    feat.shape_str());
    const std::size_t t = feat.extent(0);
    if (t == 0) throw std::invalid_argument("temporal_max: empty time axis");
    const std::size_t cell = feat.size() / t;
    Tensor out({feat.extent(1), feat.extent(2), feat.extent(3)});
    if (argmax) argmax->assign(cell, 0);
    const double* in = feat.data();
    for (std::size_t i = 0; i < cell; ++i) out[i] = in[i];
    for (std::size_t ti = 1; ti < t; ++ti) {
        const double* frame = in + ti * cell;
        for (std::size_t i = 0; i < cell; ++i) {
            if (frame[i] > out[i]) {
                out[i] = frame[i];
                if (argmax) (*argmax)[i] = ti;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

namespace {

// Keep probabilities strictly inside (0,1): saturated exponentials would
// otherwise round to exactly 0 or 1 and break the open-interval contract.
double clamp_open_unit(double p) {
    constexpr double lo = std::numeric_limits<double>::min();
    const double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
    return std::min(std::max(p, lo), hi);
}

}  // namespace

Tensor softmax(const Tensor& v) {
    ensure_finite(v, "softmax input");
    if (v.rank() != 1 || v.size() == 0)
        throw std::invalid_argument("softmax: input must be a non-empty vector, got " +
                                    v.shape_str());
    double m = v[0];
    for (std::size_t i = 1; i < v.size(); ++i) m = std::max(m, v[i]);
    Tensor out(v.shape());
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - m);
        s += out[i];
    }
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = clamp_open_unit(out[i] / s);
    return out;
}

Tensor softmax_grad(const Tensor& y, const Tensor& upstream) {
    if (!y.same_shape(upstream))
        throw std::invalid_argument("softmax_grad: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += upstream[i] * y[i];
    Tensor grad(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) grad[i] = y[i] * (upstream[i] - acc);
    return grad;
}

double sigmoid(double x) { return clamp_open_unit(1.0 / (1.0 + std::exp(-x))); }

Tensor sigmoid(const Tensor& v) {
    ensure_finite(v, "sigmoid input");
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = sigmoid(v[i]);
    return out;
}

Tensor leaky_relu(const Tensor& v, double slope) {
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : slope * v[i];
    return out;
}

Tensor leaky_relu_grad(const Tensor& pre, const Tensor& upstream, double slope) {
    if (!pre.same_shape(upstream))
        throw std::invalid_argument("leaky_relu_grad: shape mismatch");
    Tensor grad(pre.shape());
    for (std::size_t i = 0; i < pre.size(); ++i)
        grad[i] = pre[i] > 0.0 ? upstream[i] : slope * upstream[i];
    return grad;
}

// ---------------------------------------------------------------------------
// Matrix helpers
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
        throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() + " x " +
                                    b.shape_str());
    Tensor c({a.extent(0), b.extent(1)});
    gemm_accum(a.data(), b.data(), c.data(), a.extent(0), a.extent(1), b.extent(1));
    return c;
}

Tensor matvec(const Tensor& a, const Tensor& x) {
    if (a.rank() != 2 || x.rank() != 1 || a.extent(1) != x.extent(0))
        throw std::invalid_argument("matvec: incompatible shapes " + a.shape_str() + " x " +
                                    x.shape_str());
    Tensor y({a.extent(0)});
    for (std::size_t i = 0; i < a.extent(0); ++i) {
        double s = 0.0;
        const double* row = a.data() + i * a.extent(1);
        for (std::size_t j = 0; j < a.extent(1); ++j) s += row[j] * x[j];
        y[i] = s;
    }
    return y;
}

Tensor matvec_t(const Tensor& a, const Tensor& x) {
    if (a.rank() != 2 || x.rank() != 1 || a.extent(0) != x.extent(0))
        throw std::invalid_argument("matvec_t: incompatible shapes " + a.shape_str() + "^T x " +
                                    x.shape_str());
    Tensor y({a.extent(1)});
    for (std::size_t i = 0; i < a.extent(0); ++i) {
        const double* row = a.data() + i * a.extent(1);
        const double xi = x[i];
        for (std::size_t j = 0; j < a.extent(1); ++j) y[j] += row[j] * xi;
    }
    return y;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: input must be rank 2");
    Tensor t({a.extent(1), a.extent(0)});
    for (std::size_t i = 0; i < a.extent(0); ++i)
        for (std::size_t j = 0; j < a.extent(1); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

Tensor outer(const Tensor& u, const Tensor& v) {
    if (u.rank() != 1 || v.rank() != 1)
        throw std::invalid_argument("outer: inputs must be vectors");
    Tensor m({u.extent(0), v.extent(0)});
    for (std::size_t i = 0; i < u.extent(0); ++i)
        for (std::size_t j = 0; j < v.extent(0); ++j) m.at(i, j) = u[i] * v[j];
    return m;
}

double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace gci
