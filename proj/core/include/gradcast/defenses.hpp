#pragma once

#include <cstdint>
#include <functional>
#include <variant>
#include <vector>

#include "gradcast/net3d.hpp"
#include "gradcast/video.hpp"

namespace gradcast {

// Learned additive pattern with an L-infinity budget kept by projection.
struct DefensePattern {
  VideoTensor d;
  int epochs = 0;
  double lr = 0.0;
  double budget = 0.1;
  std::uint64_t seed = 0;
  std::vector<double> loss_log;  // [0] before training, [e] after e epochs
};

struct ShuffleParams {
  int h1 = 4;  // window length in frames
  int h2 = 2;  // number of windows to permute
  std::uint64_t seed = 0;
};

using Defense = std::variant<DefensePattern, ShuffleParams>;

// Partitions frames into consecutive windows of h1 frames (last window may be
// shorter), picks h2 windows at random and permutes frames inside each picked
// window. Pixels are untouched, only frame order changes.
VideoTensor temporal_shuffle(const VideoTensor& x, const ShuffleParams& p);

// Full-batch gradient descent on d minimizing the victim's mean cross-entropy
// of clip_unit(adv + d) against the true labels, with d projected into
// ||d||_inf <= budget after every step. on_step, when set, observes d after
// each projection.
DefensePattern train_defense_pattern(
    const Model3D& victim, const std::vector<std::pair<VideoTensor, int>>& adv_train, int epochs,
    double lr, double budget, std::uint64_t seed,
    const std::function<void(int step, const VideoTensor& d)>& on_step = {});

// clip_unit(x + d) for patterns, temporal_shuffle for shuffle params.
VideoTensor apply_defense(const VideoTensor& x, const Defense& defense);

// Fraction of pairs still misclassified after the defense is applied to the
// adversarial video. Pairs are expected to come from successful attacks.
double residual_asr(const Model3D& victim, const Defense& defense,
                    const std::vector<std::pair<LabeledClip, VideoTensor>>& pairs);

void save_defense_pattern(const DefensePattern& p, const std::filesystem::path& vten_path,
                          const std::filesystem::path& meta_path);
DefensePattern load_defense_pattern(const std::filesystem::path& vten_path,
                                    const std::filesystem::path& meta_path);

}  // namespace gradcast
