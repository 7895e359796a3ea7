#pragma once

#include <cstddef>

namespace pmdet::kernels {

// Dense numeric kernels behind the tensor/autodiff layers. Each kernel is
// OpenMP-parallel over independent output elements with a fixed serial
// accumulation order per element, so results are bit-identical for any
// thread count. The kernels::serial namespace keeps plain reference
// implementations; tests compare the two and tools/bench_kernels times them.

// c[m,n] = a[m,k] * b[k,n]; accumulate adds into c instead of overwriting.
void mm_nn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate = false);

// c[m,n] = a[m,k] * b[n,k]^T
void mm_nt(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate = false);

// c[m,n] = a[k,m]^T * b[k,n]
void mm_tn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate = false);

// Row-wise numerically stable softmax: y[r,:] = softmax(x[r,:]).
void softmax_rows(const double* x, double* y, std::size_t rows,
                  std::size_t cols);

// Layer norm over the last dimension; writes normalized output plus the
// per-row mean and reciprocal standard deviation needed by the backward pass.
void layer_norm(const double* x, const double* gamma, const double* beta,
                double* y, double* mean, double* rstd, std::size_t rows,
                std::size_t cols, double eps);

// y = max(x, 0)
void relu(const double* x, double* y, std::size_t n);

// Patch extraction for convolution. Input is (channels, h, w); output column
// matrix is (channels*kh*kw, out_h*out_w). Out-of-bounds taps read zero.
void im2col(const double* x, double* cols, std::size_t channels,
            std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad);

// Adjoint of im2col: scatter-adds columns back into the (channels, h, w)
// image. The image buffer must be zeroed by the caller.
void col2im(const double* cols, double* x, std::size_t channels,
            std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad);

// y[i] += s * x[i]
void axpy(double s, const double* x, double* y, std::size_t n);

namespace serial {

void mm_nn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate = false);
void mm_nt(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate = false);
void mm_tn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate = false);
void softmax_rows(const double* x, double* y, std::size_t rows,
                  std::size_t cols);
void layer_norm(const double* x, const double* gamma, const double* beta,
                double* y, double* mean, double* rstd, std::size_t rows,
                std::size_t cols, double eps);
void relu(const double* x, double* y, std::size_t n);
void im2col(const double* x, double* cols, std::size_t channels,
            std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad);
void col2im(const double* cols, double* x, std::size_t channels,
            std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad);
void axpy(double s, const double* x, double* y, std::size_t n);

}  // namespace serial

}  // namespace pmdet::kernels
