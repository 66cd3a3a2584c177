#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace stillsplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

// Dense H x W grid, row-major.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int height, int width, T fill = T{})
      : height_(height), width_(width), data_(checked_size(height, width), fill) {}

  int height() const { return height_; }
  int width() const { return width_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& at(int r, int c) { return data_[static_cast<size_t>(r) * width_ + c]; }
  const T& at(int r, int c) const { return data_[static_cast<size_t>(r) * width_ + c]; }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  bool same_shape(const Grid& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

  void fill(const T& v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  static size_t checked_size(int height, int width) {
    if (height < 0 || width < 0) throw std::invalid_argument("Grid: negative shape");
    return static_cast<size_t>(height) * width;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

using GridF = Grid<double>;
using Image = Grid<Vec3>;  // RGB in [0,1]

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Deterministic RNG. mt19937_64 has a standard-mandated sequence; the
// distributions below avoid std::*_distribution, whose output is
// implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi] inclusive
  int uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(gen_() % span);
  }

  // Box-Muller, one sample per call
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 gen_;
};

inline int thread_count() {
  if (const char* env = std::getenv("STILLSPLAT_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// Runs fn(chunk_index, begin, end) over [0, n) split into fixed-size chunks.
// The chunk layout depends only on n, so per-chunk partial results reduced in
// chunk order give identical answers for any thread count.
inline void parallel_chunks(int n, int chunk_size,
                            const std::function<void(int, int, int)>& fn) {
  if (n <= 0) return;
  int num_chunks = (n + chunk_size - 1) / chunk_size;
  int threads = std::min(thread_count(), num_chunks);
  if (threads <= 1) {
    for (int c = 0; c < num_chunks; ++c)
      fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        int c = next.fetch_add(1);
        if (c >= num_chunks) break;
        fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
      }
    });
  }
  for (auto& th : pool) th.join();
}

// Rotation matrix for a possibly unnormalized quaternion (w,x,y,z).
inline Mat3 quat_to_matrix(const Vec4& q_raw) {
  Vec4 q = q_raw / q_raw.norm();
  double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

// d vec(R) / d q_raw, rows in row-major R order, including the gradient of the
// internal normalization. Needed so analytic gradients match finite
// differences taken on the raw stored quaternion.
inline Eigen::Matrix<double, 9, 4> quat_to_matrix_jacobian(const Vec4& q_raw) {
  double norm = q_raw.norm();
  Vec4 q = q_raw / norm;
  double w = q[0], x = q[1], y = q[2], z = q[3];

  // dR/d(unit q), one 3x3 slice per component
  Mat3 dRdw, dRdx, dRdy, dRdz;
  dRdw << 0, -2 * z, 2 * y,
          2 * z, 0, -2 * x,
          -2 * y, 2 * x, 0;
  dRdx << 0, 2 * y, 2 * z,
          2 * y, -4 * x, -2 * w,
          2 * z, 2 * w, -4 * x;
  dRdy << -4 * y, 2 * x, 2 * w,
          2 * x, 0, 2 * z,
          -2 * w, 2 * z, -4 * y;
  dRdz << -4 * z, -2 * w, 2 * x,
          2 * w, -4 * z, 2 * y,
          2 * x, 2 * y, 0;

  Eigen::Matrix<double, 9, 4> J_unit;
  const Mat3* slices[4] = {&dRdw, &dRdx, &dRdy, &dRdz};
  for (int k = 0; k < 4; ++k)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) J_unit(i * 3 + j, k) = (*slices[k])(i, j);

  // normalization: d(unit)/d(raw) = (I - q q^T) / |q_raw|
  Eigen::Matrix4d N = (Eigen::Matrix4d::Identity() - q * q.transpose()) / norm;
  return J_unit * N;
}

}  // namespace stillsplat
