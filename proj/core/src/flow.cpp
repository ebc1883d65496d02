#include "gradcast/flow.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace gradcast {

namespace {

// Reflected index with edge duplication: -1 -> 0, -2 -> 1, n -> n-1.
inline int reflect(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

// Solves the symmetric positive-definite 6x6 system via Gauss-Jordan;
// returns the inverse. The basis Gram matrix is well conditioned for any
// odd window >= 3.
std::array<std::array<double, 6>, 6> invert6(std::array<std::array<double, 6>, 6> m) {
  std::array<std::array<double, 6>, 6> inv{};
  for (int i = 0; i < 6; ++i) inv[i][i] = 1.0;
  for (int col = 0; col < 6; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 6; ++r)
      if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
    if (std::abs(m[pivot][col]) < 1e-14)
      throw std::runtime_error("polynomial basis Gram matrix is singular");
    std::swap(m[col], m[pivot]);
    std::swap(inv[col], inv[pivot]);
    const double scale = 1.0 / m[col][col];
    for (int j = 0; j < 6; ++j) {
      m[col][j] *= scale;
      inv[col][j] *= scale;
    }
    for (int r = 0; r < 6; ++r) {
      if (r == col) continue;
      const double f = m[r][col];
      if (f == 0.0) continue;
      for (int j = 0; j < 6; ++j) {
        m[r][j] -= f * m[col][j];
        inv[r][j] -= f * inv[col][j];
      }
    }
  }
  return inv;
}

std::vector<double> gaussian_window_weights(int window, double sigma) {
  const int r = window / 2;
  std::vector<double> w(static_cast<std::size_t>(window) * window);
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      w[static_cast<std::size_t>(dy + r) * window + (dx + r)] =
          std::exp(-(static_cast<double>(dx) * dx + static_cast<double>(dy) * dy) /
                   (2.0 * sigma * sigma));
  return w;
}

inline void bilinear_at(const std::vector<float>& a, int h, int w, double y, double x,
                        double* out, int stride_count, const std::vector<float>* b) {
  // Shared edge-clamped bilinear sampler for one or two aligned fields.
  const double cx = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const double cy = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(std::floor(cx));
  const int y0 = static_cast<int>(std::floor(cy));
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = cx - x0;
  const double fy = cy - y0;
  const double w00 = (1.0 - fx) * (1.0 - fy);
  const double w01 = fx * (1.0 - fy);
  const double w10 = (1.0 - fx) * fy;
  const double w11 = fx * fy;
  const std::size_t i00 = static_cast<std::size_t>(y0) * w + x0;
  const std::size_t i01 = static_cast<std::size_t>(y0) * w + x1;
  const std::size_t i10 = static_cast<std::size_t>(y1) * w + x0;
  const std::size_t i11 = static_cast<std::size_t>(y1) * w + x1;
  out[0] = w00 * a[i00] + w01 * a[i01] + w10 * a[i10] + w11 * a[i11];
  if (stride_count == 2)
    out[1] = w00 * (*b)[i00] + w01 * (*b)[i01] + w10 * (*b)[i10] + w11 * (*b)[i11];
}

int shrink_odd_window(int window, int h, int w) {
  int limit = std::min(h, w);
  if (limit % 2 == 0) --limit;
  return std::min(window, std::max(1, limit));
}

}  // namespace

PolyCoeffs polynomial_expansion(const GrayFrame& g, double sigma, int window) {
  if (window % 2 == 0 || window < 1)
    throw std::invalid_argument("polynomial_expansion: window must be odd and positive");
  if (window > g.h || window > g.w)
    throw std::invalid_argument("polynomial_expansion: frame smaller than window");
  if (!(sigma > 0.0)) throw std::invalid_argument("polynomial_expansion: sigma must be > 0");

  const int r = window / 2;
  const std::vector<double> wts = gaussian_window_weights(window, sigma);

  // Basis per offset: [1, dx, dy, dx^2, dy^2, dx*dy]. The Gram matrix is the
  // same for every pixel, so invert it once.
  std::array<std::array<double, 6>, 6> gram{};
  std::vector<std::array<double, 6>> basis(wts.size());
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const std::size_t k = static_cast<std::size_t>(dy + r) * window + (dx + r);
      basis[k] = {1.0,
                  static_cast<double>(dx),
                  static_cast<double>(dy),
                  static_cast<double>(dx) * dx,
                  static_cast<double>(dy) * dy,
                  static_cast<double>(dx) * dy};
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) gram[i][j] += wts[k] * basis[k][i] * basis[k][j];
    }
  const auto gram_inv = invert6(gram);

  PolyCoeffs out;
  out.h = g.h;
  out.w = g.w;
  const std::size_t n = static_cast<std::size_t>(g.h) * g.w;
  out.a00.resize(n);
  out.a01.resize(n);
  out.a11.resize(n);
  out.bx.resize(n);
  out.by.resize(n);
  out.c.resize(n);

  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) {
      std::array<double, 6> rhs{};
      for (int dy = -r; dy <= r; ++dy) {
        const int sy = reflect(y + dy, g.h);
        for (int dx = -r; dx <= r; ++dx) {
          const int sx = reflect(x + dx, g.w);
          const std::size_t k = static_cast<std::size_t>(dy + r) * window + (dx + r);
          const double wi = wts[k] * g.at(sy, sx);
          for (int i = 0; i < 6; ++i) rhs[i] += wi * basis[k][i];
        }
      }
      std::array<double, 6> coef{};
      for (int i = 0; i < 6; ++i) {
        double acc = 0.0;
        for (int j = 0; j < 6; ++j) acc += gram_inv[i][j] * rhs[j];
        coef[i] = acc;
      }
      const std::size_t p = out.idx(y, x);
      out.c[p] = coef[0];
      out.bx[p] = coef[1];
      out.by[p] = coef[2];
      out.a00[p] = coef[3];
      out.a11[p] = coef[4];
      out.a01[p] = coef[5] * 0.5;  // q^T A q carries the cross term twice
    }
  }
  return out;
}

FlowField farneback_flow(const GrayFrame& prev, const GrayFrame& next, const FlowParams& params) {
  if (prev.h != next.h || prev.w != next.w)
    throw std::invalid_argument("farneback_flow: frame shapes differ");
  const int h = prev.h, w = prev.w;
  const int exp_window = shrink_odd_window(params.window, h, w);
  const int agg_window = shrink_odd_window(params.agg_window, h, w);

  const PolyCoeffs p1 = polynomial_expansion(prev, params.sigma, exp_window);
  const PolyCoeffs p2 = polynomial_expansion(next, params.sigma, exp_window);

  // Pointwise averaged A and half the b difference.
  const std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<double> a00(n), a01(n), a11(n), dbx(n), dby(n);
  for (std::size_t i = 0; i < n; ++i) {
    a00[i] = 0.5 * (p1.a00[i] + p2.a00[i]);
    a01[i] = 0.5 * (p1.a01[i] + p2.a01[i]);
    a11[i] = 0.5 * (p1.a11[i] + p2.a11[i]);
    dbx[i] = 0.5 * (p1.bx[i] - p2.bx[i]);
    dby[i] = 0.5 * (p1.by[i] - p2.by[i]);
  }

  const int r = agg_window / 2;
  const std::vector<double> wts = gaussian_window_weights(agg_window, params.agg_sigma);

  FlowField flow = FlowField::zeros(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double m00 = 0.0, m01 = 0.0, m11 = 0.0, r0 = 0.0, r1 = 0.0;
      for (int dy = -r; dy <= r; ++dy) {
        const int sy = reflect(y + dy, h);
        for (int dx = -r; dx <= r; ++dx) {
          const int sx = reflect(x + dx, w);
          const double wi = wts[static_cast<std::size_t>(dy + r) * agg_window + (dx + r)];
          const std::size_t q = static_cast<std::size_t>(sy) * w + sx;
          // A is symmetric, so A^T A = A^2 and A^T db = A db.
          m00 += wi * (a00[q] * a00[q] + a01[q] * a01[q]);
          m01 += wi * (a01[q] * (a00[q] + a11[q]));
          m11 += wi * (a01[q] * a01[q] + a11[q] * a11[q]);
          r0 += wi * (a00[q] * dbx[q] + a01[q] * dby[q]);
          r1 += wi * (a01[q] * dbx[q] + a11[q] * dby[q]);
        }
      }
      const double det = m00 * m11 - m01 * m01;
      const std::size_t p = flow.idx(y, x);
      if (det < 1e-9) continue;  // textureless: no motion evidence
      flow.du[p] = static_cast<float>((m11 * r0 - m01 * r1) / det);
      flow.dv[p] = static_cast<float>((m00 * r1 - m01 * r0) / det);
    }
  }
  return flow;
}

double flow_magnitude(const FlowField& f) {
  double acc = 0.0;
  const std::size_t n = f.du.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double u = f.du[i];
    const double v = f.dv[i];
    acc += std::sqrt(u * u + v * v);
  }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

FlowProfile max_flow_frame(const VideoTensor& v, const FlowParams& params) {
  if (v.t < 2) throw std::invalid_argument("max_flow_frame: need at least 2 frames");

  std::vector<GrayFrame> gray(static_cast<std::size_t>(v.t));
  for (int t = 0; t < v.t; ++t) gray[t] = downsample_half(to_grayscale(v.frame(t)));

  FlowProfile profile;
  profile.magnitudes.assign(static_cast<std::size_t>(v.t), 0.0);
  if (v.t == 2) {
    const double m = flow_magnitude(farneback_flow(gray[0], gray[1], params));
    profile.magnitudes[0] = m;
    profile.magnitudes[1] = m;
  } else {
    for (int t = 1; t <= v.t - 2; ++t)
      profile.magnitudes[t] = flow_magnitude(farneback_flow(gray[t - 1], gray[t], params));
    profile.magnitudes[0] = profile.magnitudes[1];
    profile.magnitudes[v.t - 1] = profile.magnitudes[v.t - 2];
  }

  profile.argmax_index = 0;
  for (int t = 1; t < v.t; ++t)
    if (profile.magnitudes[t] > profile.magnitudes[profile.argmax_index])
      profile.argmax_index = t;
  return profile;
}

GrayFrame warp_backward(const GrayFrame& frame, const FlowField& f) {
  if (frame.h != f.h || frame.w != f.w)
    throw std::invalid_argument("warp_backward: shapes differ");
  GrayFrame out = GrayFrame::zeros(frame.h, frame.w);
  for (int y = 0; y < frame.h; ++y)
    for (int x = 0; x < frame.w; ++x) {
      const std::size_t p = f.idx(y, x);
      double sample = 0.0;
      bilinear_at(frame.data, frame.h, frame.w, y + static_cast<double>(f.dv[p]),
                  x + static_cast<double>(f.du[p]), &sample, 1, nullptr);
      out.at(y, x) = static_cast<float>(sample);
    }
  return out;
}

std::string flow_profile_csv(const FlowProfile& profile) {
  std::string out = "frame_index,magnitude\n";
  char buf[64];
  for (std::size_t i = 0; i < profile.magnitudes.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, profile.magnitudes[i]);
    out += buf;
  }
  return out;
}

FlowMask occlusion_mask(const FlowField& fwd, const FlowField& bwd, double tol) {
  if (fwd.h != bwd.h || fwd.w != bwd.w)
    throw std::invalid_argument("occlusion_mask: shapes differ");
  FlowMask mask;
  mask.h = fwd.h;
  mask.w = fwd.w;
  mask.data.assign(static_cast<std::size_t>(fwd.h) * fwd.w, 0);
  for (int y = 0; y < fwd.h; ++y)
    for (int x = 0; x < fwd.w; ++x) {
      const std::size_t p = fwd.idx(y, x);
      double back[2] = {0.0, 0.0};
      bilinear_at(bwd.du, bwd.h, bwd.w, y + static_cast<double>(fwd.dv[p]),
                  x + static_cast<double>(fwd.du[p]), back, 2, &bwd.dv);
      const double ru = fwd.du[p] + back[0];
      const double rv = fwd.dv[p] + back[1];
      if (std::sqrt(ru * ru + rv * rv) <= tol) mask.data[p] = 1;
    }
  return mask;
}

}  // namespace gradcast
