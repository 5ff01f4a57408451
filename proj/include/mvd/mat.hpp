#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace mvd::nn {

// Dense row-major double matrix. All model math runs in 64-bit precision;
// 32-bit floats appear only in the on-disk formats.
struct Mat {
  long rows = 0;
  long cols = 0;
  std::vector<double> d;

  Mat() = default;
  Mat(long r, long c) : rows(r), cols(c), d(static_cast<std::size_t>(r * c), 0.0) {}
  Mat(long r, long c, std::vector<double> data) : rows(r), cols(c), d(std::move(data)) {
    assert(static_cast<long>(d.size()) == r * c);
  }

  double& at(long r, long c) { return d[static_cast<std::size_t>(r * cols + c)]; }
  double at(long r, long c) const { return d[static_cast<std::size_t>(r * cols + c)]; }
  long size() const { return rows * cols; }

  static Mat zeros(long r, long c) { return Mat(r, c); }
  static Mat full(long r, long c, double v) {
    Mat m(r, c);
    for (auto& x : m.d) x = v;
    return m;
  }
};

}  // namespace mvd::nn
