// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lorasafe/parallel.hpp"

#include <cstdlib>
#include <string>

namespace lorasafe {

std::size_t default_workers() {
  const char* env = std::getenv("LORASAFE_WORKERS");
  if (env == nullptr || *env == '\0') return 1;
  try {
    const long v = std::stol(env);
    return v >= 1 ? static_cast<std::size_t>(v) : 1;
  } catch (...) {
    return 1;
  }
}

}  // namespace lorasafe
