#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace gradcast {

// Single frame, channels-first C x H x W, values in [0,1].
struct Frame {
  int c = 0, h = 0, w = 0;
  std::vector<float> data;

  static Frame zeros(int c, int h, int w) {
    Frame f;
    f.c = c;
    f.h = h;
    f.w = w;
    f.data.assign(static_cast<std::size_t>(c) * h * w, 0.0f);
    return f;
  }
  float& at(int ci, int y, int x) {
    return data[(static_cast<std::size_t>(ci) * h + y) * w + x];
  }
  float at(int ci, int y, int x) const {
    return data[(static_cast<std::size_t>(ci) * h + y) * w + x];
  }
  std::size_t size() const { return data.size(); }
};

// Single-channel H x W frame in [0,1].
struct GrayFrame {
  int h = 0, w = 0;
  std::vector<float> data;

  static GrayFrame zeros(int h, int w) {
    GrayFrame g;
    g.h = h;
    g.w = w;
    g.data.assign(static_cast<std::size_t>(h) * w, 0.0f);
    return g;
  }
  float& at(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
  float at(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }
};

// T x C x H x W pixel volume, the currency of the whole pipeline.
// Canonical tensors hold values in [0,1]; intermediate arithmetic may leave
// the range, which is why validate() is explicit rather than enforced on
// every mutation. clip_unit() restores canonical form.
struct VideoTensor {
  int t = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  static VideoTensor zeros(int t, int c, int h, int w) {
    VideoTensor v;
    v.t = t;
    v.c = c;
    v.h = h;
    v.w = w;
    v.data.assign(static_cast<std::size_t>(t) * c * h * w, 0.0f);
    return v;
  }

  float& at(int ti, int ci, int y, int x) {
    return data[((static_cast<std::size_t>(ti) * c + ci) * h + y) * w + x];
  }
  float at(int ti, int ci, int y, int x) const {
    return data[((static_cast<std::size_t>(ti) * c + ci) * h + y) * w + x];
  }
  std::size_t size() const { return data.size(); }
  std::size_t frame_size() const { return static_cast<std::size_t>(c) * h * w; }

  Frame frame(int ti) const;
  void set_frame(int ti, const Frame& f);

  // Throws std::invalid_argument on shape or range violations:
  // T >= 1, C in {1,3}, H >= 8, W >= 8, all values in [0,1].
  void validate() const;
};

// alpha scales the gradient map, epsilon caps |adv - clean| per pixel.
struct PerturbationBudget {
  float alpha = 0.4f;
  float epsilon = 0.5f;

  // 0 <= alpha <= 1 and 0 <= epsilon <= 1. epsilon == 0 is accepted as a
  // degenerate budget that forces adv == clean.
  void validate() const;
};

// Loads either a `.vten` file or a directory of lexicographically ordered
// P5/P6 binary PNM frames (maxval 255, bytes mapped to [0,1] by v/255).
VideoTensor load_video(const std::filesystem::path& path);

// `.vten` loader without the [0,1]/shape validation, for signed payloads
// such as defense patterns.
VideoTensor load_vten_raw(const std::filesystem::path& path);

// Writes the `.vten` format: "VTEN", version u32=1, T,C,H,W u32, then
// T*C*H*W little-endian 32-bit floats in t,c,h,w order. Lossless.
void save_video(const VideoTensor& v, const std::filesystem::path& path);

// BT.601 luma for C=3 (0.299 R + 0.587 G + 0.114 B); copy for C=1.
GrayFrame to_grayscale(const Frame& f);

// 2x2 box mean; trailing odd row/column dropped. Requires H,W >= 2.
GrayFrame downsample_half(const GrayFrame& g);

// Elementwise clamp to [0,1]. Accepts raw out-of-range buffers.
VideoTensor clip_unit(VideoTensor v);

// Replicates a frame t times along the temporal axis.
VideoTensor broadcast_temporal(const Frame& f, int t);

// PGM/PPM frame helpers shared with the dataset ingester and the CLI.
Frame load_pnm_frame(const std::filesystem::path& path);
void save_pgm(const GrayFrame& g, const std::filesystem::path& path);

// Bilinear resampling with half-pixel centers and edge clamping.
GrayFrame resize_bilinear(const GrayFrame& g, int out_h, int out_w);
Frame resize_bilinear(const Frame& f, int out_h, int out_w);

}  // namespace gradcast
