#pragma once

#include <cstdint>
#include <vector>

#include "gradcast/video.hpp"

namespace gradcast {

// Per-pixel quadratic fit I(p + q) ~ q^T A q + b^T q + c in window-local
// coordinates. A is symmetric, stored as (a00, a01, a11).
struct PolyCoeffs {
  int h = 0, w = 0;
  std::vector<double> a00, a01, a11, bx, by, c;

  std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * w + x; }
};

// Dense displacement field in pixels; du horizontal (+x right), dv vertical
// (+y down).
struct FlowField {
  int h = 0, w = 0;
  std::vector<float> du, dv;

  static FlowField zeros(int h, int w) {
    FlowField f;
    f.h = h;
    f.w = w;
    f.du.assign(static_cast<std::size_t>(h) * w, 0.0f);
    f.dv.assign(static_cast<std::size_t>(h) * w, 0.0f);
    return f;
  }
  std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * w + x; }
};

// 0/1 per-pixel mask.
struct FlowMask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> data;

  std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * w + x; }
};

// Per-frame mean flow magnitude with both temporal ends padded from their
// neighbours, plus the argmax (ties broken by smallest index).
struct FlowProfile {
  std::vector<double> magnitudes;
  int argmax_index = 0;
};

struct FlowParams {
  double sigma = 1.2;     // polynomial-expansion Gaussian
  int window = 5;         // polynomial-expansion window (odd)
  double agg_sigma = 2.0; // aggregation Gaussian
  int agg_window = 11;    // aggregation window (odd)
};

// Weighted least-squares quadratic fit per pixel; reflected padding at the
// borders. Throws if the window exceeds the frame or is even.
PolyCoeffs polynomial_expansion(const GrayFrame& g, double sigma, int window);

// Single-scale displacement solve: per pixel A d = (b_prev - b_next)/2 with A
// averaged across the two frames, aggregated over agg_window via the weighted
// normal equations. Pixels whose aggregated normal matrix has determinant
// < 1e-9 get zero flow.
FlowField farneback_flow(const GrayFrame& prev, const GrayFrame& next,
                         const FlowParams& params = {});

// Mean Euclidean magnitude over all pixels.
double flow_magnitude(const FlowField& f);

// Grayscales and half-downsamples every frame, computes pairwise flow, and
// attributes each pair's magnitude to the later frame; m[0] and m[T-1] are
// padded copies of their neighbours. Requires T >= 2.
FlowProfile max_flow_frame(const VideoTensor& v, const FlowParams& params = {});

// output(p) = bilinear sample of frame at p + f(p), edge-clamped.
GrayFrame warp_backward(const GrayFrame& frame, const FlowField& f);

// Forward-backward consistency: 1 iff |fwd(p) + bwd(p + fwd(p))| <= tol.
FlowMask occlusion_mask(const FlowField& fwd, const FlowField& bwd, double tol);

// Debug dump: "frame_index,magnitude" rows.
std::string flow_profile_csv(const FlowProfile& profile);

}  // namespace gradcast
