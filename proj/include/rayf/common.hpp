#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rayf {

// Error hierarchy. The CLI maps these onto process exit codes:
// config_error -> 2, everything else derived from error -> 3.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct config_error : error {
  using error::error;
};

// Shape mismatches between tensors that should agree.
struct dimension_error : error {
  using error::error;
};

// Degenerate poses, log-map branch cuts, out-of-bounds pixels.
struct geometry_error : error {
  using error::error;
};

// NaNs, contract violations (negative density, non-canonical layouts).
struct numeric_error : error {
  using error::error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw numeric_error(msg);
}

inline void require_config(bool cond, const std::string& msg) {
  if (!cond) throw config_error(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
  if (!cond) throw dimension_error(msg);
}

}  // namespace rayf
