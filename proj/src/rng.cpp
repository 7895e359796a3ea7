#include "pmdet/rng.hpp"

#include <cmath>
#include <sstream>

namespace pmdet {

std::string RngStream::state() const {
  std::ostringstream os;
  os << eng_;
  return os.str();
}

void RngStream::set_state(const std::string& text) {
  std::istringstream is(text);
  is >> eng_;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

RngStream named_stream(std::uint64_t seed, const std::string& name) {
  return RngStream(splitmix(seed ^ fnv1a(name)));
}

}  // namespace pmdet
