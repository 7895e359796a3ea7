#include "pmdet/common.hpp"

namespace pmdet {

WarningLog& WarningLog::instance() {
  static WarningLog log;
  return log;
}

void WarningLog::emit(std::string message) {
  std::lock_guard<std::mutex> lock(mu_);
  records_.push_back(std::move(message));
}

std::size_t WarningLog::count() const {
  std::lock_guard<std::mutex> lock(mu_);
  return records_.size();
}

std::string WarningLog::last() const {
  std::lock_guard<std::mutex> lock(mu_);
  return records_.empty() ? std::string() : records_.back();
}

void WarningLog::clear() {
  std::lock_guard<std::mutex> lock(mu_);
  records_.clear();
}

}  // namespace pmdet
