#ifndef GCI_TENSOR_HPP_
#define GCI_TENSOR_HPP_

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace gci {

/// Dense n-dimensional array of doubles, row-major. The universal value type of
/// the library. Values are expected to stay finite; ops that can produce
/// non-finite values verify their output and throw NumericError instead of
/// propagating NaN/Inf.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::initializer_list<std::size_t> shape);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    // Validates product(shape) == data.size() and finiteness of every entry.
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t dim) const { return shape_[dim]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Unchecked multi-index accessors for the common ranks.
    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

    void fill(double value);
    // Elementwise in-place arithmetic; shapes must match.
    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double s);
    void axpy(double a, const Tensor& x);  // this += a * x

    double max_abs() const;
    double sum() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// Throws NumericError naming `context` if any entry of t is NaN or Inf.
void ensure_finite(const Tensor& t, const char* context);
void ensure_finite(double v, const char* context);

// ---------------------------------------------------------------------------
// Numerical primitives. All pure functions; inputs are never mutated.
// ---------------------------------------------------------------------------

/// 2-D cross-correlation (deep-learning convention, no kernel flip) with zero
/// padding. input [Cin,H,W], kernel [Cout,Cin,k,k], square odd k.
/// Output [Cout,H',W'] with H' = floor((H + 2*pad - k)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad);

/// Gradient of <upstream, conv2d(input, kernel)> w.r.t. the kernel.
Tensor conv2d_grad_kernel(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                          int stride, int pad);

/// Gradient of <upstream, conv2d(input, kernel)> w.r.t. the input.
Tensor conv2d_grad_input(const Tensor& input, const Tensor& kernel, const Tensor& upstream,
                         int stride, int pad);

/// Per-channel spatial mean. X [C,H,W] -> [C].
Tensor global_avg_pool(const Tensor& x);
/// Spreads d(pool)/d(out) back over the spatial cells: upstream [C] -> [C,H,W].
Tensor global_avg_pool_grad(const Tensor& x, const Tensor& upstream);

/// 2x2 max pooling, stride 2, trailing odd row/column dropped. Records the
/// flat input index of each winner in argmax (same shape as the output).
Tensor max_pool2x2(const Tensor& x, std::vector<std::size_t>* argmax);
Tensor max_pool2x2_grad(const Tensor& x, const Tensor& upstream,
                        const std::vector<std::size_t>& argmax);

/// Elementwise max over the leading (time) axis. feat [T,C,H,W] -> [C,H,W].
/// argmax records the winning frame per output cell (first max wins ties).
Tensor temporal_max(const Tensor& feat, std::vector<std::size_t>* argmax);

/// Numerically stable softmax (max subtraction). 1-D input.
Tensor softmax(const Tensor& v);
/// J^T * upstream for y = softmax(v): dv = y .* (upstream - <upstream, y>).
Tensor softmax_grad(const Tensor& y, const Tensor& upstream);

double sigmoid(double x);
Tensor sigmoid(const Tensor& v);

Tensor leaky_relu(const Tensor& v, double slope);
Tensor leaky_relu_grad(const Tensor& pre, const Tensor& upstream, double slope);

// Dense row-major matrix helpers (rank-2 tensors).
Tensor matmul(const Tensor& a, const Tensor& b);             // [m,k]x[k,n] -> [m,n]
Tensor matvec(const Tensor& a, const Tensor& x);             // [m,n]x[n]   -> [m]
Tensor matvec_t(const Tensor& a, const Tensor& x);           // A^T x: [m,n],[m] -> [n]
Tensor transpose(const Tensor& a);                           // [m,n] -> [n,m]
Tensor outer(const Tensor& u, const Tensor& v);              // [m],[n] -> [m,n]
double dot(const Tensor& a, const Tensor& b);

// C[m,n] += A[m,k] * B[k,n], raw row-major buffers. The one hot loop in the
// library; everything convolution-shaped funnels through it.
void gemm_accum(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n);

}  // namespace gci

#endif  // GCI_TENSOR_HPP_
