#pragma once

#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmdet {

// Error categories used across the project. Thrown conditions are
// unrecoverable for the current operation; survivable degenerate states go
// through the warning log instead.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Process-wide record of survivable degenerate conditions (zero-norm
// similarity vectors, empty ground truth, boundary-0 alignment terms).
class WarningLog {
 public:
  static WarningLog& instance();

  void emit(std::string message);
  std::size_t count() const;
  std::string last() const;
  void clear();

 private:
  mutable std::mutex mu_;
  std::vector<std::string> records_;
};

inline void warn(std::string message) {
  WarningLog::instance().emit(std::move(message));
}

}  // namespace pmdet
