#pragma once

#include <cstdint>
#include <vector>

#include "gradcast/flow.hpp"
#include "gradcast/net3d.hpp"
#include "gradcast/video.hpp"

namespace gradcast {

enum class AttackVariant { MaxFlow, RandomFrame, FullFrames };
enum class MapKind { GuidedBackprop, GradCam };

struct AttackConfig {
  PerturbationBudget budget;
  AttackVariant variant = AttackVariant::MaxFlow;
  MapKind map_kind = MapKind::GuidedBackprop;
  // Backward start layer for guided maps (-1 = logits) or the Conv3d index
  // for grad-cam maps (-1 = last Conv3d).
  int layer = -1;
  // Class whose logit is backpropagated; -1 = the source model's prediction
  // on the attack video.
  int class_idx = -1;
  std::uint64_t seed = 0;
  FlowParams flow;
};

struct AdversarialResult {
  VideoTensor adv;
  float delta_inf_norm = 0.0f;
  // Source frame indices: one entry for the broadcast variants, one per
  // frame for FullFrames.
  std::vector<int> t_star;
  int clean_pred = -1;  // filled by the evaluation harness, not the attack
  int adv_pred = -1;
  long queries = 0;  // victim inferences spent building adv; always 0 here
  // Applied per-frame perturbations after budget clipping: size 1 for the
  // broadcast variants, size T for FullFrames.
  std::vector<Frame> deltas;
};

// delta = clip_[-eps,eps](alpha * g). Maps are rectified to [0,1], so the
// result lies in [0, min(alpha, eps)].
Frame perturbation_from_map(const GradientMap& g, const PerturbationBudget& budget);

// Builds an adversarial video from the gradient map of the attack video,
// never touching any victim model. MaxFlow extracts the map at the
// maximum-flow frame, RandomFrame at a seeded uniform frame, FullFrames at
// every frame (applied per frame instead of broadcast; requires equal frame
// counts). The map is bilinearly resized when the attack video's spatial
// size differs from the clean video's.
AdversarialResult craft_attack(const VideoTensor& clean, const VideoTensor& attack_vid,
                               const Model3D& source, const AttackConfig& cfg);

// Uniform noise in [-eps, eps] per pixel per frame, seeded; the comparison
// baseline evaluated alongside the gradient-map attack.
AdversarialResult random_noise_baseline(const VideoTensor& clean,
                                        const PerturbationBudget& budget, std::uint64_t seed);

}  // namespace gradcast
