#pragma once

#include <random>
#include <stdexcept>
#include <string>

namespace ndf {

// Error raised by malformed or unreadable external data (files, datasets).
struct data_error : std::runtime_error {
  explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

// Error raised when a numeric invariant breaks at runtime (non-finite
// gradients, invalid probability mass).
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

using Rng = std::mt19937_64;

enum class TaskMode { classification, regression };

inline const char* task_mode_name(TaskMode m) {
  return m == TaskMode::classification ? "classification" : "regression";
}

}  // namespace ndf
