#pragma once

#include <stdexcept>
#include <string>

namespace negctrl {

/// Input or configuration problem: bad file, bad schema, bad flag combination.
/// The CLI maps this to exit code 2.
class validation_error : public std::runtime_error {
public:
  explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure during fitting or evaluation: non-convergence, singular
/// system, density floor breach. The CLI maps this to exit code 3.
class numeric_error : public std::runtime_error {
public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw validation_error(msg);
}

inline void require_numeric(bool cond, const std::string& msg) {
  if (!cond) throw numeric_error(msg);
}

}  // namespace negctrl
