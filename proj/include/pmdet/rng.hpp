#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace pmdet {

// Deterministic random stream. The distribution transforms are written out
// explicitly (instead of std:: distributions, whose output is
// implementation-defined) so a stream replays identically from a saved state.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; consumes exactly two draws per call.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(eng_() % static_cast<std::uint64_t>(n));
  }

  std::string state() const;
  void set_state(const std::string& text);

 private:
  std::mt19937_64 eng_;
};

// Stream whose seed mixes a global seed with a name, so per-parameter
// initialization does not depend on construction order.
RngStream named_stream(std::uint64_t seed, const std::string& name);

}  // namespace pmdet
