#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <variant>
#include <vector>

#include "gradcast/video.hpp"

namespace gradcast {

// Channels-first activation volume C x T x H x W.
template <typename S>
struct Tensor4 {
  int c = 0, t = 0, h = 0, w = 0;
  std::vector<S> v;

  static Tensor4 zeros(int c, int t, int h, int w) {
    Tensor4 x;
    x.c = c;
    x.t = t;
    x.h = h;
    x.w = w;
    x.v.assign(static_cast<std::size_t>(c) * t * h * w, S(0));
    return x;
  }
  std::size_t size() const { return v.size(); }
  std::size_t idx(int ci, int ti, int y, int x) const {
    return ((static_cast<std::size_t>(ci) * t + ti) * h + y) * w + x;
  }
  S& at(int ci, int ti, int y, int x) { return v[idx(ci, ti, y, x)]; }
  S at(int ci, int ti, int y, int x) const { return v[idx(ci, ti, y, x)]; }
};

template <typename S>
struct Conv3d {
  int out_ch = 0, in_ch = 0;
  int kt = 1, kh = 1, kw = 1;
  int st = 1, sh = 1, sw = 1;
  int pt = 0, ph = 0, pw = 0;
  std::vector<S> weight;  // [out_ch][in_ch][kt][kh][kw]
  std::vector<S> bias;    // [out_ch]
};

struct Relu {};

struct MaxPool3d {
  int kt = 1, kh = 1, kw = 1;
  int st = 1, sh = 1, sw = 1;
};

struct Flatten {};

template <typename S>
struct Linear {
  int in_dim = 0, out_dim = 0;
  std::vector<S> weight;  // [out_dim][in_dim]
  std::vector<S> bias;    // [out_dim]
};

template <typename S>
using Layer = std::variant<Conv3d<S>, Relu, MaxPool3d, Flatten, Linear<S>>;

enum class ReluMode { Standard, Guided };

// Counts forward passes. Copyable so models stay value types.
class CallCounter {
 public:
  CallCounter() = default;
  CallCounter(const CallCounter& o) : n_(o.n_.load()) {}
  CallCounter& operator=(const CallCounter& o) {
    n_.store(o.n_.load());
    return *this;
  }
  void bump() const { n_.fetch_add(1, std::memory_order_relaxed); }
  std::uint64_t value() const { return n_.load(std::memory_order_relaxed); }

 private:
  mutable std::atomic<std::uint64_t> n_{0};
};

// Every intermediate activation of one forward pass: acts[0] is the input,
// acts[i+1] the output of layer i. Pool layers additionally record the
// linear input index of each window maximum.
template <typename S>
struct ForwardTraceT {
  std::vector<Tensor4<S>> acts;
  std::vector<std::vector<std::int64_t>> pool_argmax;
};

// Plain feed-forward 3D CNN. Parameters are immutable during inference;
// relu_mode is an evaluation flag that guided_backprop() swaps for the
// duration of a call and always restores. The backward implementation
// receives the mode per call, so concurrent standard-mode inferences are
// unaffected by a swap in progress.
template <typename S>
struct ModelT {
  std::vector<Layer<S>> layers;
  int num_classes = 0;
  int in_c = 0, in_t = 0, in_h = 0, in_w = 0;
  mutable ReluMode relu_mode = ReluMode::Standard;
  CallCounter calls;

  // Checks layer chain compatibility and that the last layer is a Linear
  // with out_dim == num_classes. Throws std::invalid_argument.
  void validate() const;
};

using Model3D = ModelT<float>;
using ForwardTrace = ForwardTraceT<float>;

// Rectified, max-normalized input-gradient image at one frame; values in
// [0,1] once produced by guided_backprop or grad_cam.
struct GradientMap {
  int c = 0, h = 0, w = 0;
  std::vector<float> data;
  int source_frame = -1;
  int source_layer = -1;

  float at(int ci, int y, int x) const {
    return data[(static_cast<std::size_t>(ci) * h + y) * w + x];
  }
};

struct LabeledClip {
  VideoTensor video;
  int label = 0;
};

template <typename S>
Tensor4<S> video_to_tensor(const VideoTensor& v);

// Runs the network, caching every activation. Bumps the model call counter.
template <typename S>
std::pair<std::vector<S>, ForwardTraceT<S>> forward(const ModelT<S>& m, const VideoTensor& v);

// Same, but on a pre-built activation volume (e.g. double-precision inputs
// for gradient checking).
template <typename S>
std::pair<std::vector<S>, ForwardTraceT<S>> forward_tensor(const ModelT<S>& m,
                                                           const Tensor4<S>& x);

// d(output_grad . output)/d(input), layer by layer in reverse. ReLU backward
// follows m.relu_mode: Standard passes gradient where the cached input is
// positive, Guided additionally requires the incoming gradient to be
// positive. Throws on a trace that does not match the model.
template <typename S>
Tensor4<S> backward_input(const ModelT<S>& m, const ForwardTraceT<S>& trace,
                          const std::vector<S>& output_grad);

// Guided-mode input gradient at frame t_star, post-processed to [0,1] by
// max-normalization, rectification and clipping. layer == -1 (default) seeds
// the backward pass with a one-hot at class_idx on the logits; an
// intermediate layer index seeds with the mean-of-activations gradient at
// that layer's output. relu_mode is restored on every exit path.
GradientMap guided_backprop(const Model3D& m, const VideoTensor& v_att, int t_star,
                            int layer = -1, int class_idx = 0);

struct GuidedGradient {
  GradientMap map;
  double raw_l2 = 0.0;  // L2 norm of the frame gradient before normalization
};
GuidedGradient guided_backprop_ex(const Model3D& m, const VideoTensor& v_att, int t_star,
                                  int layer = -1, int class_idx = 0);

// Channel-weighted activation heatmap at a Conv3d layer: global-average
// gradient weights, ReLU combination, temporal mean, bilinear upsample to the
// input plane, max-normalized. Replicated across the input channel count.
GradientMap grad_cam(const Model3D& m, const VideoTensor& v, int conv_layer, int class_idx);

// Argmax of the logits, smallest index on ties. Bumps the call counter.
int predict(const Model3D& m, const VideoTensor& v);

std::vector<float> logits_of(const Model3D& m, const VideoTensor& v);

struct TrainOptions {
  int epochs = 30;
  double lr = 0.01;
  std::uint64_t seed = 0;
  int batch_size = 8;
  // Stop after any epoch whose full-set training accuracy reaches this value
  // (disabled when <= 0).
  double target_accuracy = -1.0;
};

// loss[0] / accuracy[0] describe the model before any update; entry e the
// model after e epochs. epochs_run <= opts.epochs when early stopping fires.
struct TrainLog {
  std::vector<double> loss;
  std::vector<double> accuracy;
  int epochs_run = 0;
};

// Seeded minibatch SGD on softmax cross-entropy. Throws on non-finite loss.
TrainLog train(Model3D& m, const std::vector<LabeledClip>& data, const TrainOptions& opts);

double evaluate_accuracy(const Model3D& m, const std::vector<LabeledClip>& data);

// Mean cross-entropy of the model over labeled clips.
double evaluate_loss(const Model3D& m, const std::vector<LabeledClip>& data);

// Cross-entropy gradient with respect to the input pixels for one clip.
// Returns d(CE(logits, label))/d(input) and optionally the loss value.
Tensor4<float> input_gradient_ce(const Model3D& m, const VideoTensor& v, int label,
                                 double* loss_out = nullptr);

// Conv3d(8,3x3x3,pad 1) -> ReLU -> MaxPool(1,2,2) -> Conv3d(16,3x3x3,pad 1)
// -> ReLU -> MaxPool(2,2,2) -> Flatten -> Linear. Kaiming fan-in init.
Model3D make_micro_c3d(int num_classes, std::uint64_t seed, int in_t = 8, int in_c = 1,
                       int in_h = 32, int in_w = 32);

// "M3DC" checkpoint: version u32, shape header, layer descriptor table, then
// all parameters as little-endian 32-bit floats.
void save_model(const Model3D& m, const std::filesystem::path& path);
Model3D load_model(const std::filesystem::path& path);

}  // namespace gradcast
