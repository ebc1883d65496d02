#pragma once

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "gradcast/rng.hpp"
#include "gradcast/video.hpp"

namespace testutil {

// Unique scratch directory under the system temp root, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    dir_ = std::filesystem::temp_directory_path() /
           ("gradcast_" + tag + "_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  const std::filesystem::path& path() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

inline gradcast::VideoTensor random_video(int t, int c, int h, int w, std::uint64_t seed) {
  gradcast::Rng rng(seed);
  auto v = gradcast::VideoTensor::zeros(t, c, h, w);
  for (float& x : v.data) x = static_cast<float>(rng.uniform());
  return v;
}

inline gradcast::GrayFrame random_gray(int h, int w, std::uint64_t seed) {
  gradcast::Rng rng(seed);
  auto g = gradcast::GrayFrame::zeros(h, w);
  for (float& x : g.data) x = static_cast<float>(rng.uniform());
  return g;
}

// Smooth band-limited texture in [0.05, 0.95]: a sum of random low-frequency
// sinusoids evaluated analytically, so shifted copies can be rendered at any
// offset without resampling error.
class SmoothTexture {
 public:
  SmoothTexture(std::uint64_t seed, int n_waves = 6, double min_period = 10.0,
                double max_period = 28.0) {
    gradcast::Rng rng(seed);
    for (int i = 0; i < n_waves; ++i) {
      Wave w;
      const double period = rng.uniform(min_period, max_period);
      const double angle = rng.uniform(0.0, 6.283185307179586);
      w.fx = std::cos(angle) / period;
      w.fy = std::sin(angle) / period;
      w.phase = rng.uniform(0.0, 6.283185307179586);
      w.amp = rng.uniform(0.5, 1.0);
      waves_.push_back(w);
      amp_sum_ += w.amp;
    }
  }

  double operator()(double x, double y) const {
    double acc = 0.0;
    for (const Wave& w : waves_)
      acc += w.amp * std::sin(6.283185307179586 * (w.fx * x + w.fy * y) + w.phase);
    return 0.5 + 0.45 * acc / amp_sum_;
  }

  gradcast::GrayFrame render(int h, int w, double shift_x = 0.0, double shift_y = 0.0) const {
    auto g = gradcast::GrayFrame::zeros(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        g.at(y, x) = static_cast<float>((*this)(x - shift_x, y - shift_y));
    return g;
  }

 private:
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves_;
  double amp_sum_ = 0.0;
};

}  // namespace testutil
