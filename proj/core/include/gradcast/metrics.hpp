#pragma once

#include <string>
#include <vector>

#include "gradcast/flow.hpp"
#include "gradcast/net3d.hpp"
#include "gradcast/video.hpp"

namespace gradcast {

struct QualityReport {
  double ssim = 0.0;
  double psnr_db = 0.0;  // +inf sentinel for identical inputs
  double ti = 0.0;
};

struct PerVideoRecord {
  std::string id;
  QualityReport quality;
  bool success = false;
  int clean_pred = -1;
  int adv_pred = -1;
};

struct CampaignStats {
  double asr = 0.0;
  double queries_mean = 0.0;
  std::vector<PerVideoRecord> per_video;
  int successes = 0;
  int total = 0;
  // Clips dropped because the victim misclassified the clean input.
  std::vector<std::string> excluded;
};

// Frame-wise SSIM with an 11x11 Gaussian window (sigma 1.5), C1=(0.01L)^2,
// C2=(0.03L)^2 at dynamic range L=1; reflected borders, channels then frames
// averaged. ssim(x,x) == 1.0 exactly.
double ssim(const VideoTensor& x, const VideoTensor& y);

// 10 log10(255^2 / MSE) with MSE on the 0..255 scale. Returns +infinity for
// identical inputs; aggregate statistics cap the sentinel at 100 dB.
double psnr(const VideoTensor& x, const VideoTensor& y);
double psnr_capped(double psnr_db);

// Flow-warped, occlusion-masked L1 residual averaged over long-range (t vs 0)
// and short-range (t vs t-1) pairs, scaled by 255. 0 for a static video.
double temporal_inconsistency(const VideoTensor& v, const FlowParams& params = {});

// Success = victim prediction differs from the clean label. Clean clips the
// victim misclassifies violate the precondition and are excluded (logged in
// `excluded`). queries_mean is 0 for zero-query campaigns by construction.
CampaignStats attack_success_rate(
    const Model3D& victim,
    const std::vector<std::pair<LabeledClip, VideoTensor>>& pairs,
    const std::vector<std::string>* ids = nullptr, bool with_quality = true,
    const FlowParams& flow = {});

}  // namespace gradcast
