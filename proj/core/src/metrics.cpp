#include "gradcast/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gradcast {

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // (0.01 * L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;

inline int reflect(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

std::vector<double> ssim_kernel() {
  std::vector<double> k(kSsimWindow * kSsimWindow);
  const int r = kSsimWindow / 2;
  double sum = 0.0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kSsimSigma * kSsimSigma));
      k[static_cast<std::size_t>(dy + r) * kSsimWindow + (dx + r)] = v;
      sum += v;
    }
  for (double& v : k) v /= sum;
  return k;
}

// Mean local SSIM of one channel plane pair.
double ssim_plane(const float* x, const float* y, int h, int w, const std::vector<double>& kern) {
  const int r = kSsimWindow / 2;
  double total = 0.0;
  for (int py = 0; py < h; ++py) {
    for (int px = 0; px < w; ++px) {
      double mux = 0.0, muy = 0.0, xx = 0.0, yy = 0.0, xy = 0.0;
      for (int dy = -r; dy <= r; ++dy) {
        const int sy = reflect(py + dy, h);
        for (int dx = -r; dx <= r; ++dx) {
          const int sx = reflect(px + dx, w);
          const double kv = kern[static_cast<std::size_t>(dy + r) * kSsimWindow + (dx + r)];
          const double a = x[static_cast<std::size_t>(sy) * w + sx];
          const double b = y[static_cast<std::size_t>(sy) * w + sx];
          mux += kv * a;
          muy += kv * b;
          xx += kv * a * a;
          yy += kv * b * b;
          xy += kv * a * b;
        }
      }
      const double vx = xx - mux * mux;
      const double vy = yy - muy * muy;
      const double cov = xy - mux * muy;
      const double num = (2.0 * mux * muy + kC1) * (2.0 * cov + kC2);
      const double den = (mux * mux + muy * muy + kC1) * (vx + vy + kC2);
      total += num / den;
    }
  }
  return total / (static_cast<double>(h) * w);
}

}  // namespace

double ssim(const VideoTensor& x, const VideoTensor& y) {
  if (x.t != y.t || x.c != y.c || x.h != y.h || x.w != y.w)
    throw std::invalid_argument("ssim: shapes differ");
  static const std::vector<double> kern = ssim_kernel();
  const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
  double frame_sum = 0.0;
  for (int t = 0; t < x.t; ++t) {
    double channel_sum = 0.0;
    for (int c = 0; c < x.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(t) * x.c + c) * plane;
      channel_sum += ssim_plane(x.data.data() + off, y.data.data() + off, x.h, x.w, kern);
    }
    frame_sum += channel_sum / x.c;
  }
  return frame_sum / x.t;
}

double psnr(const VideoTensor& x, const VideoTensor& y) {
  if (x.t != y.t || x.c != y.c || x.h != y.h || x.w != y.w)
    throw std::invalid_argument("psnr: shapes differ");
  double mse = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double d = 255.0 * (static_cast<double>(x.data[i]) - y.data[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(x.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double psnr_capped(double psnr_db) { return std::min(psnr_db, 100.0); }

namespace {

// Occlusion-weighted masked L1 error between frame t and frame m, per the
// warping residual: flow is computed both ways on grayscale planes, frame m
// is warped toward frame t, and masked-out pixels are excluded from the mean.
double warp_error(const VideoTensor& v, int t, int m, const FlowParams& params) {
  const Frame ft = v.frame(t);
  const Frame fm = v.frame(m);
  const GrayFrame gt = to_grayscale(ft);
  const GrayFrame gm = to_grayscale(fm);
  const FlowField fwd = farneback_flow(gt, gm, params);
  const FlowField bwd = farneback_flow(gm, gt, params);
  const FlowMask mask = occlusion_mask(fwd, bwd, 1.0);

  std::size_t visible = 0;
  for (std::uint8_t b : mask.data) visible += b;
  if (visible == 0) return 0.0;

  double err = 0.0;
  for (int c = 0; c < v.c; ++c) {
    GrayFrame chan = GrayFrame::zeros(v.h, v.w);
    for (int y = 0; y < v.h; ++y)
      for (int x = 0; x < v.w; ++x) chan.at(y, x) = fm.at(c, y, x);
    const GrayFrame warped = warp_backward(chan, fwd);
    for (int y = 0; y < v.h; ++y)
      for (int x = 0; x < v.w; ++x)
        if (mask.data[mask.idx(y, x)])
          err += std::abs(static_cast<double>(ft.at(c, y, x)) - warped.at(y, x));
  }
  return err / (static_cast<double>(visible) * v.c);
}

}  // namespace

double temporal_inconsistency(const VideoTensor& v, const FlowParams& params) {
  if (v.t < 2) throw std::invalid_argument("temporal_inconsistency: need at least 2 frames");
  double acc = 0.0;
  for (int t = 1; t < v.t; ++t) {
    acc += warp_error(v, t, 0, params);      // long-range: against the first frame
    acc += warp_error(v, t, t - 1, params);  // short-range: against the previous frame
  }
  return acc / (2.0 * (v.t - 1)) * 255.0;
}

CampaignStats attack_success_rate(const Model3D& victim,
                                  const std::vector<std::pair<LabeledClip, VideoTensor>>& pairs,
                                  const std::vector<std::string>* ids, bool with_quality,
                                  const FlowParams& flow) {
  if (ids && ids->size() != pairs.size())
    throw std::invalid_argument("attack_success_rate: id list size mismatch");
  CampaignStats stats;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& [clean, adv] = pairs[i];
    const std::string id = ids ? (*ids)[i] : "clip_" + std::to_string(i);
    const int clean_pred = predict(victim, clean.video);
    if (clean_pred != clean.label) {
      stats.excluded.push_back(id);
      continue;
    }
    PerVideoRecord rec;
    rec.id = id;
    rec.clean_pred = clean_pred;
    rec.adv_pred = predict(victim, adv);
    rec.success = rec.adv_pred != clean.label;
    if (with_quality) {
      rec.quality.ssim = ssim(clean.video, adv);
      rec.quality.psnr_db = psnr(clean.video, adv);
      rec.quality.ti = temporal_inconsistency(adv, flow);
    }
    stats.successes += rec.success ? 1 : 0;
    stats.per_video.push_back(std::move(rec));
  }
  stats.total = static_cast<int>(stats.per_video.size());
  stats.asr = stats.total > 0
                  ? static_cast<double>(stats.successes) / static_cast<double>(stats.total)
                  : 0.0;
  stats.queries_mean = 0.0;
  return stats;
}

}  // namespace gradcast
