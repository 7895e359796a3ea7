// Times the OpenMP kernels against their serial references on the shapes the
// training loop actually runs.

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include <omp.h>

#include "pmdet/kernels.hpp"
#include "pmdet/rng.hpp"
#include "pmdet/tensor.hpp"

using namespace pmdet;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, RngStream& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

double time_us(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::micro>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_us, double parallel_us) {
  std::printf("%-28s serial %9.1f us   omp %9.1f us   speedup %.2fx\n", name,
              serial_us, parallel_us, serial_us / parallel_us);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());
  RngStream rng(42);
  const int reps = 200;

  {  // encoder-shaped matmul: (96x64) x (64x64)
    Tensor a = random_tensor({96, 64}, rng), b = random_tensor({64, 64}, rng);
    Tensor c({96, 64});
    report("mm_nn 96x64x64",
           time_us([&] { kernels::serial::mm_nn(a.data(), b.data(), c.data(),
                                                96, 64, 64); },
                   reps),
           time_us([&] { kernels::mm_nn(a.data(), b.data(), c.data(), 96, 64,
                                        64); },
                   reps));
  }
  {  // ffn-shaped matmul: (96x64) x (256x64)^T
    Tensor a = random_tensor({96, 64}, rng), b = random_tensor({256, 64}, rng);
    Tensor c({96, 256});
    report("mm_nt 96x64x256",
           time_us([&] { kernels::serial::mm_nt(a.data(), b.data(), c.data(),
                                                96, 64, 256); },
                   reps),
           time_us([&] { kernels::mm_nt(a.data(), b.data(), c.data(), 96, 64,
                                        256); },
                   reps));
  }
  {  // attention scores softmax
    Tensor x = random_tensor({4 * 96, 96}, rng), y({4 * 96, 96});
    report("softmax_rows 384x96",
           time_us([&] { kernels::serial::softmax_rows(x.data(), y.data(),
                                                       384, 96); },
                   reps),
           time_us([&] { kernels::softmax_rows(x.data(), y.data(), 384, 96); },
                   reps));
  }
  {  // backbone im2col: 3x64x64, 3x3 s2
    Tensor x = random_tensor({3, 64, 64}, rng);
    Tensor cols({3 * 9, 32 * 32});
    report("im2col 3x64x64",
           time_us([&] { kernels::serial::im2col(x.data(), cols.data(), 3, 64,
                                                 64, 3, 3, 2, 1); },
                   reps),
           time_us([&] { kernels::im2col(x.data(), cols.data(), 3, 64, 64, 3,
                                         3, 2, 1); },
                   reps));
  }
  {  // layer norm over the encoder sequence
    Tensor x = random_tensor({96, 64}, rng), y({96, 64});
    Tensor gamma = Tensor::full({64}, 1.0), beta({64});
    Tensor mean({96}), rstd({96});
    report("layer_norm 96x64",
           time_us([&] { kernels::serial::layer_norm(
                             x.data(), gamma.data(), beta.data(), y.data(),
                             mean.data(), rstd.data(), 96, 64, 1e-5); },
                   reps),
           time_us([&] { kernels::layer_norm(x.data(), gamma.data(),
                                             beta.data(), y.data(),
                                             mean.data(), rstd.data(), 96, 64,
                                             1e-5); },
                   reps));
  }
  {  // a big square matmul where threading should pay off
    Tensor a = random_tensor({512, 512}, rng), b = random_tensor({512, 512}, rng);
    Tensor c({512, 512});
    report("mm_nn 512x512x512",
           time_us([&] { kernels::serial::mm_nn(a.data(), b.data(), c.data(),
                                                512, 512, 512); },
                   10),
           time_us([&] { kernels::mm_nn(a.data(), b.data(), c.data(), 512,
                                        512, 512); },
                   10));
  }
  return 0;
}
