#include "gradcast/attack.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <variant>

#include "gradcast/rng.hpp"

namespace gradcast {

namespace {

int default_grad_cam_layer(const Model3D& m) {
  for (int i = static_cast<int>(m.layers.size()) - 1; i >= 0; --i)
    if (std::holds_alternative<Conv3d<float>>(m.layers[i])) return i;
  throw std::invalid_argument("grad-cam map requested but model has no Conv3d layer");
}

GradientMap extract_map(const VideoTensor& attack_vid, const Model3D& source,
                        const AttackConfig& cfg, int frame, int cls) {
  if (cfg.map_kind == MapKind::GradCam) {
    const int layer = cfg.layer >= 0 ? cfg.layer : default_grad_cam_layer(source);
    return grad_cam(source, attack_vid, layer, cls);
  }
  return guided_backprop(source, attack_vid, frame, cfg.layer, cls);
}

// Matches the map to the clean video's geometry: bilinear spatial resize plus
// single-channel replication when needed.
Frame fit_delta(Frame delta, int c, int h, int w) {
  if (delta.h != h || delta.w != w) delta = resize_bilinear(delta, h, w);
  if (delta.c == c) return delta;
  if (delta.c != 1)
    throw std::invalid_argument("attack: cannot adapt perturbation channel count");
  Frame out = Frame::zeros(c, h, w);
  for (int ci = 0; ci < c; ++ci)
    std::copy(delta.data.begin(), delta.data.end(),
              out.data.begin() + static_cast<std::size_t>(ci) * h * w);
  return out;
}

float apply_delta_frame(VideoTensor& adv, const VideoTensor& clean, int t, const Frame& delta) {
  float linf = 0.0f;
  for (int ci = 0; ci < clean.c; ++ci)
    for (int y = 0; y < clean.h; ++y)
      for (int x = 0; x < clean.w; ++x) {
        const float v = std::clamp(clean.at(t, ci, y, x) + delta.at(ci, y, x), 0.0f, 1.0f);
        adv.at(t, ci, y, x) = v;
        linf = std::max(linf, std::abs(v - clean.at(t, ci, y, x)));
      }
  return linf;
}

}  // namespace

Frame perturbation_from_map(const GradientMap& g, const PerturbationBudget& budget) {
  budget.validate();
  Frame delta = Frame::zeros(g.c, g.h, g.w);
  for (std::size_t i = 0; i < g.data.size(); ++i)
    delta.data[i] = std::clamp(budget.alpha * g.data[i], -budget.epsilon, budget.epsilon);
  return delta;
}

AdversarialResult craft_attack(const VideoTensor& clean, const VideoTensor& attack_vid,
                               const Model3D& source, const AttackConfig& cfg) {
  cfg.budget.validate();
  AdversarialResult result;
  result.adv = clean;
  result.queries = 0;

  const int cls = cfg.class_idx >= 0 ? cfg.class_idx : predict(source, attack_vid);

  if (cfg.variant == AttackVariant::FullFrames) {
    if (attack_vid.t != clean.t)
      throw std::invalid_argument("FullFrames attack requires equal frame counts");
    result.t_star.reserve(clean.t);
    result.deltas.reserve(clean.t);
    float linf = 0.0f;
    for (int t = 0; t < clean.t; ++t) {
      const GradientMap map = extract_map(attack_vid, source, cfg, t, cls);
      Frame delta = fit_delta(perturbation_from_map(map, cfg.budget), clean.c, clean.h, clean.w);
      linf = std::max(linf, apply_delta_frame(result.adv, clean, t, delta));
      result.t_star.push_back(t);
      result.deltas.push_back(std::move(delta));
    }
    result.delta_inf_norm = linf;
    return result;
  }

  int frame = 0;
  if (cfg.variant == AttackVariant::MaxFlow) {
    frame = attack_vid.t > 1 ? max_flow_frame(attack_vid, cfg.flow).argmax_index : 0;
  } else {
    Rng rng(cfg.seed);
    frame = rng.uniform_int(attack_vid.t);
  }

  const GradientMap map = extract_map(attack_vid, source, cfg, frame, cls);
  Frame delta = fit_delta(perturbation_from_map(map, cfg.budget), clean.c, clean.h, clean.w);

  float linf = 0.0f;
  for (int t = 0; t < clean.t; ++t)
    linf = std::max(linf, apply_delta_frame(result.adv, clean, t, delta));
  result.delta_inf_norm = linf;
  result.t_star.push_back(frame);
  result.deltas.push_back(std::move(delta));
  return result;
}

AdversarialResult random_noise_baseline(const VideoTensor& clean,
                                        const PerturbationBudget& budget, std::uint64_t seed) {
  budget.validate();
  Rng rng(seed);
  AdversarialResult result;
  result.adv = clean;
  result.queries = 0;
  float linf = 0.0f;
  for (std::size_t i = 0; i < clean.data.size(); ++i) {
    const float noise = static_cast<float>(rng.uniform(-budget.epsilon, budget.epsilon));
    const float v = std::clamp(clean.data[i] + noise, 0.0f, 1.0f);
    result.adv.data[i] = v;
    linf = std::max(linf, std::abs(v - clean.data[i]));
  }
  result.delta_inf_norm = linf;
  return result;
}

}  // namespace gradcast
