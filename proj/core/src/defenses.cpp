#include "gradcast/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "gradcast/rng.hpp"
#include "json.hpp"

namespace gradcast {

VideoTensor temporal_shuffle(const VideoTensor& x, const ShuffleParams& p) {
  if (p.h1 < 1 || p.h1 > x.t)
    throw std::invalid_argument("temporal_shuffle: h1 must be in [1, T]");
  const int n_windows = (x.t + p.h1 - 1) / p.h1;
  if (p.h2 < 0 || p.h2 > n_windows)
    throw std::invalid_argument("temporal_shuffle: h2 must be in [0, ceil(T/h1)]");

  Rng rng(p.seed);
  std::vector<int> window_ids(n_windows);
  std::iota(window_ids.begin(), window_ids.end(), 0);
  rng.shuffle(window_ids);
  std::vector<int> selected(window_ids.begin(), window_ids.begin() + p.h2);
  std::sort(selected.begin(), selected.end());

  std::vector<int> perm(x.t);
  std::iota(perm.begin(), perm.end(), 0);
  for (int wid : selected) {
    const int lo = wid * p.h1;
    const int hi = std::min(x.t, lo + p.h1);
    // Fisher-Yates inside the window.
    for (int i = hi - lo; i > 1; --i) {
      const int j = rng.uniform_int(i);
      std::swap(perm[lo + i - 1], perm[lo + j]);
    }
  }

  VideoTensor out = VideoTensor::zeros(x.t, x.c, x.h, x.w);
  for (int t = 0; t < x.t; ++t) out.set_frame(t, x.frame(perm[t]));
  return out;
}

DefensePattern train_defense_pattern(
    const Model3D& victim, const std::vector<std::pair<VideoTensor, int>>& adv_train, int epochs,
    double lr, double budget, std::uint64_t seed,
    const std::function<void(int step, const VideoTensor& d)>& on_step) {
  if (adv_train.empty()) throw std::invalid_argument("train_defense_pattern: empty training set");
  if (!(budget >= 0.0)) throw std::invalid_argument("train_defense_pattern: negative budget");
  const VideoTensor& first = adv_train.front().first;
  for (const auto& [adv, label] : adv_train) {
    if (adv.t != first.t || adv.c != first.c || adv.h != first.h || adv.w != first.w)
      throw std::invalid_argument("train_defense_pattern: inconsistent shapes");
    if (label < 0 || label >= victim.num_classes)
      throw std::invalid_argument("train_defense_pattern: label out of range");
  }

  DefensePattern pattern;
  pattern.d = VideoTensor::zeros(first.t, first.c, first.h, first.w);
  pattern.epochs = epochs;
  pattern.lr = lr;
  pattern.budget = budget;
  pattern.seed = seed;

  const std::size_t n = pattern.d.size();
  const double inv_count = 1.0 / static_cast<double>(adv_train.size());

  auto defended = [&pattern](const VideoTensor& adv) {
    VideoTensor v = adv;
    for (std::size_t i = 0; i < v.data.size(); ++i)
      v.data[i] = std::clamp(v.data[i] + pattern.d.data[i], 0.0f, 1.0f);
    return v;
  };

  auto mean_loss = [&]() {
    double total = 0.0;
    for (const auto& [adv, label] : adv_train) {
      double loss = 0.0;
      (void)input_gradient_ce(victim, defended(adv), label, &loss);
      total += loss;
    }
    return total * inv_count;
  };

  // Evaluating the initial loss this way costs one extra backward per clip
  // but keeps the counter arithmetic identical across epochs.
  double initial = 0.0;
  for (const auto& [adv, label] : adv_train) {
    auto [logits, trace] = forward<float>(victim, defended(adv));
    (void)trace;
    double mx = logits[0];
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
    initial += -(static_cast<double>(logits[label]) - mx - std::log(sum));
  }
  pattern.loss_log.push_back(initial * inv_count);

  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::vector<double> grad(n, 0.0);
    double loss_acc = 0.0;
    for (const auto& [adv, label] : adv_train) {
      double loss = 0.0;
      const Tensor4<float> g = input_gradient_ce(victim, defended(adv), label, &loss);
      loss_acc += loss;
      // Gradient of the clip: zero where adv + d saturates outside (0,1).
      for (int t = 0; t < adv.t; ++t)
        for (int c = 0; c < adv.c; ++c)
          for (int y = 0; y < adv.h; ++y)
            for (int x = 0; x < adv.w; ++x) {
              const float pre = adv.at(t, c, y, x) + pattern.d.at(t, c, y, x);
              if (pre > 0.0f && pre < 1.0f) {
                const std::size_t di =
                    ((static_cast<std::size_t>(t) * adv.c + c) * adv.h + y) * adv.w + x;
                grad[di] += static_cast<double>(g.at(c, t, y, x));
              }
            }
    }
    if (!std::isfinite(loss_acc))
      throw std::runtime_error("train_defense_pattern: non-finite loss");
    const float cap = static_cast<float>(budget);
    for (std::size_t i = 0; i < n; ++i) {
      const double updated = static_cast<double>(pattern.d.data[i]) - lr * grad[i] * inv_count;
      pattern.d.data[i] = std::clamp(static_cast<float>(updated), -cap, cap);
    }
    if (on_step) on_step(epoch, pattern.d);
    pattern.loss_log.push_back(mean_loss());
  }
  return pattern;
}

VideoTensor apply_defense(const VideoTensor& x, const Defense& defense) {
  if (const auto* pattern = std::get_if<DefensePattern>(&defense)) {
    if (pattern->d.t != x.t || pattern->d.c != x.c || pattern->d.h != x.h || pattern->d.w != x.w)
      throw std::invalid_argument("apply_defense: pattern shape mismatch");
    VideoTensor out = x;
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = std::clamp(out.data[i] + pattern->d.data[i], 0.0f, 1.0f);
    return out;
  }
  return temporal_shuffle(x, std::get<ShuffleParams>(defense));
}

double residual_asr(const Model3D& victim, const Defense& defense,
                    const std::vector<std::pair<LabeledClip, VideoTensor>>& pairs) {
  if (pairs.empty()) return 0.0;
  int still = 0;
  for (const auto& [clean, adv] : pairs)
    if (predict(victim, apply_defense(adv, defense)) != clean.label) ++still;
  return static_cast<double>(still) / static_cast<double>(pairs.size());
}

void save_defense_pattern(const DefensePattern& p, const std::filesystem::path& vten_path,
                          const std::filesystem::path& meta_path) {
  save_video(p.d, vten_path);
  nlohmann::json meta;
  meta["epochs"] = p.epochs;
  meta["lr"] = p.lr;
  meta["budget"] = p.budget;
  meta["seed"] = p.seed;
  meta["loss_log"] = p.loss_log;
  std::ofstream out(meta_path);
  if (!out) throw std::runtime_error("cannot open " + meta_path.string() + " for writing");
  out << meta.dump(2) << "\n";
}

DefensePattern load_defense_pattern(const std::filesystem::path& vten_path,
                                    const std::filesystem::path& meta_path) {
  DefensePattern p;
  std::ifstream in(meta_path);
  if (!in) throw std::runtime_error("cannot open " + meta_path.string());
  nlohmann::json meta = nlohmann::json::parse(in);
  p.epochs = meta.value("epochs", 0);
  p.lr = meta.value("lr", 0.0);
  p.budget = meta.value("budget", 0.1);
  p.seed = meta.value("seed", std::uint64_t{0});
  if (meta.contains("loss_log")) p.loss_log = meta["loss_log"].get<std::vector<double>>();
  p.d = load_vten_raw(vten_path);
  return p;
}

}  // namespace gradcast
