#pragma once

#include <malloc.h>

#include <Eigen/Core>

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace decloud {

/// Keeps large activation buffers on the heap instead of fresh mmap'd pages;
/// the training loop allocates and frees the same sizes every iteration.
inline void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

/// DECLOUD_DEVICE selects the compute device; only "cpu" exists in this build.
/// DECLOUD_THREADS caps matrix-product threads (effective only in OpenMP builds).
inline std::string select_device() {
  const char* dev = std::getenv("DECLOUD_DEVICE");
  std::string d = dev && *dev ? dev : "cpu";
  if (d != "cpu") throw std::invalid_argument("DECLOUD_DEVICE=" + d + " is not available (supported: cpu)");
  if (const char* t = std::getenv("DECLOUD_THREADS"); t && *t) {
    int n = std::atoi(t);
    if (n < 1) throw std::invalid_argument("DECLOUD_THREADS must be a positive integer");
    Eigen::setNbThreads(n);
  }
  return d;
}

}  // namespace decloud
