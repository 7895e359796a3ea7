#include "pmdet/kernels.hpp"

#include <algorithm>
#include <vector>
#include <cmath>
#include <cstddef>

namespace pmdet::kernels {

namespace serial {

void mm_nn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = ai[l];
      const double* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
}

void mm_nt(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

void mm_tn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    for (std::size_t l = 0; l < k; ++l) {
      const double ali = a[l * m + i];
      const double* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
    }
  }
}

void softmax_rows(const double* x, double* y, std::size_t rows,
                  std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    double mx = xr[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

void layer_norm(const double* x, const double* gamma, const double* beta,
                double* y, double* mean, double* rstd, std::size_t rows,
                std::size_t cols, double eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (std::size_t j = 0; j < cols; ++j)
      yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
  }
}

void relu(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void im2col(const double* x, double* cols, std::size_t channels,
            std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad) {
  const std::size_t out_h = (h + 2 * pad - kh) / stride + 1;
  const std::size_t out_w = (w + 2 * pad - kw) / stride + 1;
  const std::size_t out_n = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = cols + ((c * kh + ki) * kw + kj) * out_n;
        for (std::size_t oi = 0; oi < out_h; ++oi) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * stride + ki) -
              static_cast<std::ptrdiff_t>(pad);
          for (std::size_t oj = 0; oj < out_w; ++oj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * stride + kj) -
                static_cast<std::ptrdiff_t>(pad);
            double v = 0.0;
            if (ii >= 0 && ii < static_cast<std::ptrdiff_t>(h) && jj >= 0 &&
                jj < static_cast<std::ptrdiff_t>(w))
              v = x[(c * h + ii) * w + jj];
            row[oi * out_w + oj] = v;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, double* x, std::size_t channels,
            std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad) {
  const std::size_t out_h = (h + 2 * pad - kh) / stride + 1;
  const std::size_t out_w = (w + 2 * pad - kw) / stride + 1;
  const std::size_t out_n = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* row = cols + ((c * kh + ki) * kw + kj) * out_n;
        for (std::size_t oi = 0; oi < out_h; ++oi) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * stride + ki) -
              static_cast<std::ptrdiff_t>(pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t oj = 0; oj < out_w; ++oj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * stride + kj) -
                static_cast<std::ptrdiff_t>(pad);
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
            x[(c * h + ii) * w + jj] += row[oi * out_w + oj];
          }
        }
      }
    }
  }
}

void axpy(double s, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += s * x[i];
}

}  // namespace serial

// Parallel variants. Work is split over rows / channels so every output
// element has exactly one writer and a fixed accumulation order. Small
// shapes dispatch straight to the serial path: entering an OpenMP region
// costs more than the loop itself at matrices this size.

void mm_nn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate) {
  if (m * k * n <= 262144 || m < 2)
    return serial::mm_nn(a, b, c, m, k, n, accumulate);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = ai[l];
      const double* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
}

void mm_nt(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate) {
  if (m * k * n <= 32768) return serial::mm_nt(a, b, c, m, k, n, accumulate);
  // The dot-product form cannot vectorize without reassociation, so
  // transpose b once and run the vectorizable kernel instead.
  static thread_local std::vector<double> scratch;
  scratch.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t l = 0; l < k; ++l) scratch[l * n + j] = b[j * k + l];
  mm_nn(a, scratch.data(), c, m, k, n, accumulate);
}

void mm_tn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate) {
  if (m * k * n <= 262144 || m < 2)
    return serial::mm_tn(a, b, c, m, k, n, accumulate);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    for (std::size_t l = 0; l < k; ++l) {
      const double ali = a[l * m + i];
      const double* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
    }
  }
}

void softmax_rows(const double* x, double* y, std::size_t rows,
                  std::size_t cols) {
  if (rows * cols <= 16384 || rows < 2)
    return serial::softmax_rows(x, y, rows, cols);
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r)
    serial::softmax_rows(x + r * cols, y + r * cols, 1, cols);
}

void layer_norm(const double* x, const double* gamma, const double* beta,
                double* y, double* mean, double* rstd, std::size_t rows,
                std::size_t cols, double eps) {
  if (rows * cols <= 16384 || rows < 2)
    return serial::layer_norm(x, gamma, beta, y, mean, rstd, rows, cols, eps);
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r)
    serial::layer_norm(x + r * cols, gamma, beta, y + r * cols, mean + r,
                       rstd + r, 1, cols, eps);
}

void relu(const double* x, double* y, std::size_t n) {
  if (n <= 65536) return serial::relu(x, y, n);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void im2col(const double* x, double* cols, std::size_t channels,
            std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad) {
  if (channels * h * w <= 16384)
    return serial::im2col(x, cols, channels, h, w, kh, kw, stride, pad);
  const std::size_t out_h = (h + 2 * pad - kh) / stride + 1;
  const std::size_t out_w = (w + 2 * pad - kw) / stride + 1;
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < channels; ++c)
    serial::im2col(x + c * h * w, cols + c * kh * kw * out_h * out_w, 1, h, w,
                   kh, kw, stride, pad);
}

void col2im(const double* cols, double* x, std::size_t channels,
            std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad) {
  if (channels * h * w <= 16384)
    return serial::col2im(cols, x, channels, h, w, kh, kw, stride, pad);
  const std::size_t out_h = (h + 2 * pad - kh) / stride + 1;
  const std::size_t out_w = (w + 2 * pad - kw) / stride + 1;
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < channels; ++c)
    serial::col2im(cols + c * kh * kw * out_h * out_w, x + c * h * w, 1, h, w,
                   kh, kw, stride, pad);
}

void axpy(double s, const double* x, double* y, std::size_t n) {
  if (n <= 65536) return serial::axpy(s, x, y, n);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] += s * x[i];
}

}  // namespace pmdet::kernels
