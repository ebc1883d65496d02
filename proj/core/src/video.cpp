#include "gradcast/video.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "binio.hpp"

namespace gradcast {

namespace fs = std::filesystem;

using binio::read_f32le;
using binio::read_u32le;
using binio::write_f32le;
using binio::write_u32le;

namespace {

VideoTensor load_vten(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "VTEN", 4) != 0)
    throw std::runtime_error("vten: bad magic in " + path.string());
  const std::uint32_t version = read_u32le(in);
  if (version != 1) throw std::runtime_error("vten: unsupported version");
  VideoTensor v;
  v.t = static_cast<int>(read_u32le(in));
  v.c = static_cast<int>(read_u32le(in));
  v.h = static_cast<int>(read_u32le(in));
  v.w = static_cast<int>(read_u32le(in));
  if (v.t <= 0 || v.c <= 0 || v.h <= 0 || v.w <= 0)
    throw std::runtime_error("vten: bad dimensions");
  const std::size_t n = static_cast<std::size_t>(v.t) * v.c * v.h * v.w;
  v.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) v.data[i] = read_f32le(in);
  if (!in) throw std::runtime_error("vten: truncated payload in " + path.string());
  return v;
}

// Skips PNM whitespace and '#' comments, then parses one decimal token.
int read_pnm_int(std::istream& is) {
  int ch = is.get();
  while (is && (std::isspace(ch) || ch == '#')) {
    if (ch == '#') {
      while (is && ch != '\n') ch = is.get();
    }
    ch = is.get();
  }
  if (!is || !std::isdigit(ch)) throw std::runtime_error("pnm: malformed header");
  int value = 0;
  while (is && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    ch = is.get();
  }
  return value;
}

}  // namespace

Frame VideoTensor::frame(int ti) const {
  Frame f = Frame::zeros(c, h, w);
  const std::size_t off = static_cast<std::size_t>(ti) * frame_size();
  std::copy(data.begin() + off, data.begin() + off + frame_size(), f.data.begin());
  return f;
}

void VideoTensor::set_frame(int ti, const Frame& f) {
  const std::size_t off = static_cast<std::size_t>(ti) * frame_size();
  std::copy(f.data.begin(), f.data.end(), data.begin() + off);
}

void VideoTensor::validate() const {
  if (t < 1) throw std::invalid_argument("VideoTensor: T must be >= 1");
  if (c != 1 && c != 3) throw std::invalid_argument("VideoTensor: C must be 1 or 3");
  if (h < 8 || w < 8) throw std::invalid_argument("VideoTensor: H and W must be >= 8");
  if (data.size() != static_cast<std::size_t>(t) * c * h * w)
    throw std::invalid_argument("VideoTensor: payload size does not match shape");
  for (float v : data)
    if (!(v >= 0.0f && v <= 1.0f))
      throw std::invalid_argument("VideoTensor: value outside [0,1]");
}

void PerturbationBudget::validate() const {
  if (!(alpha >= 0.0f && alpha <= 1.0f))
    throw std::invalid_argument("PerturbationBudget: alpha outside [0,1]");
  if (!(epsilon >= 0.0f && epsilon <= 1.0f))
    throw std::invalid_argument("PerturbationBudget: epsilon outside [0,1]");
}

Frame load_pnm_frame(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char p = 0, kind = 0;
  in.get(p);
  in.get(kind);
  if (!in || p != 'P' || (kind != '5' && kind != '6'))
    throw std::runtime_error("pnm: expected binary P5/P6 in " + path.string());
  const int w = read_pnm_int(in);
  const int h = read_pnm_int(in);
  const int maxval = read_pnm_int(in);
  if (w <= 0 || h <= 0) throw std::runtime_error("pnm: bad dimensions");
  if (maxval != 255) throw std::runtime_error("pnm: only maxval 255 supported");
  // read_pnm_int consumed the single whitespace after maxval already.
  const int channels = (kind == '6') ? 3 : 1;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw std::runtime_error("pnm: truncated pixel data in " + path.string());
  Frame f = Frame::zeros(channels, h, w);
  // PNM interleaves channels per pixel; Frame is channel-major.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ci = 0; ci < channels; ++ci)
        f.at(ci, y, x) =
            static_cast<float>(raw[(static_cast<std::size_t>(y) * w + x) * channels + ci]) / 255.0f;
  return f;
}

void save_pgm(const GrayFrame& g, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "P5\n" << g.w << " " << g.h << "\n255\n";
  for (float v : g.data) {
    const float clamped = std::clamp(v, 0.0f, 1.0f);
    out.put(static_cast<char>(static_cast<int>(clamped * 255.0f + 0.5f)));
  }
  if (!out) throw std::runtime_error("pgm: write failure for " + path.string());
}

VideoTensor load_video(const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.is_regular_file()) files.push_back(entry.path());
    if (files.empty()) throw std::runtime_error("frame directory is empty: " + path.string());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    VideoTensor v;
    for (std::size_t i = 0; i < files.size(); ++i) {
      Frame f = load_pnm_frame(files[i]);
      if (i == 0) {
        v = VideoTensor::zeros(static_cast<int>(files.size()), f.c, f.h, f.w);
      } else if (f.c != v.c || f.h != v.h || f.w != v.w) {
        throw std::runtime_error("inconsistent frame shape: " + files[i].string());
      }
      v.set_frame(static_cast<int>(i), f);
    }
    v.validate();
    return v;
  }
  VideoTensor v = load_vten(path);
  v.validate();
  return v;
}

VideoTensor load_vten_raw(const fs::path& path) { return load_vten(path); }

void save_video(const VideoTensor& v, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write("VTEN", 4);
  write_u32le(out, 1);
  write_u32le(out, static_cast<std::uint32_t>(v.t));
  write_u32le(out, static_cast<std::uint32_t>(v.c));
  write_u32le(out, static_cast<std::uint32_t>(v.h));
  write_u32le(out, static_cast<std::uint32_t>(v.w));
  for (float f : v.data) write_f32le(out, f);
  if (!out) throw std::runtime_error("vten: write failure for " + path.string());
}

GrayFrame to_grayscale(const Frame& f) {
  if (f.c != 1 && f.c != 3) throw std::invalid_argument("to_grayscale: C must be 1 or 3");
  GrayFrame g = GrayFrame::zeros(f.h, f.w);
  if (f.c == 1) {
    g.data = f.data;
    return g;
  }
  for (int y = 0; y < f.h; ++y)
    for (int x = 0; x < f.w; ++x) {
      const double luma =
          0.299 * f.at(0, y, x) + 0.587 * f.at(1, y, x) + 0.114 * f.at(2, y, x);
      g.at(y, x) = static_cast<float>(std::clamp(luma, 0.0, 1.0));
    }
  return g;
}

GrayFrame downsample_half(const GrayFrame& g) {
  if (g.h < 2 || g.w < 2) throw std::invalid_argument("downsample_half: frame smaller than 2x2");
  GrayFrame out = GrayFrame::zeros(g.h / 2, g.w / 2);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      const double sum = static_cast<double>(g.at(2 * y, 2 * x)) + g.at(2 * y, 2 * x + 1) +
                         g.at(2 * y + 1, 2 * x) + g.at(2 * y + 1, 2 * x + 1);
      out.at(y, x) = static_cast<float>(sum * 0.25);
    }
  return out;
}

VideoTensor clip_unit(VideoTensor v) {
  for (float& f : v.data) f = std::clamp(f, 0.0f, 1.0f);
  return v;
}

VideoTensor broadcast_temporal(const Frame& f, int t) {
  if (t < 1) throw std::invalid_argument("broadcast_temporal: t must be >= 1");
  VideoTensor v = VideoTensor::zeros(t, f.c, f.h, f.w);
  for (int ti = 0; ti < t; ++ti) v.set_frame(ti, f);
  return v;
}

namespace {

float sample_bilinear(const float* plane, int h, int w, double y, double x) {
  const double cy = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const double cx = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(cy);
  const int x0 = static_cast<int>(cx);
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = cy - y0;
  const double fx = cx - x0;
  const double top = (1.0 - fx) * plane[static_cast<std::size_t>(y0) * w + x0] +
                     fx * plane[static_cast<std::size_t>(y0) * w + x1];
  const double bot = (1.0 - fx) * plane[static_cast<std::size_t>(y1) * w + x0] +
                     fx * plane[static_cast<std::size_t>(y1) * w + x1];
  return static_cast<float>((1.0 - fy) * top + fy * bot);
}

}  // namespace

GrayFrame resize_bilinear(const GrayFrame& g, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: bad output size");
  GrayFrame out = GrayFrame::zeros(out_h, out_w);
  const double sy = static_cast<double>(g.h) / out_h;
  const double sx = static_cast<double>(g.w) / out_w;
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      out.at(y, x) = sample_bilinear(g.data.data(), g.h, g.w, (y + 0.5) * sy - 0.5,
                                     (x + 0.5) * sx - 0.5);
  return out;
}

Frame resize_bilinear(const Frame& f, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: bad output size");
  Frame out = Frame::zeros(f.c, out_h, out_w);
  const double sy = static_cast<double>(f.h) / out_h;
  const double sx = static_cast<double>(f.w) / out_w;
  const std::size_t plane = static_cast<std::size_t>(f.h) * f.w;
  for (int ci = 0; ci < f.c; ++ci)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x)
        out.at(ci, y, x) = sample_bilinear(f.data.data() + ci * plane, f.h, f.w,
                                           (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5);
  return out;
}

}  // namespace gradcast
