#include "gradcast/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "gradcast/rng.hpp"
#include "json.hpp"

namespace gradcast {

namespace fs = std::filesystem;
using nlohmann::json;

std::string motion_kind_name(MotionKind k) {
  switch (k) {
    case MotionKind::TranslateRight: return "translate_right";
    case MotionKind::TranslateLeft: return "translate_left";
    case MotionKind::TranslateUp: return "translate_up";
    case MotionKind::Orbit: return "orbit";
  }
  return "unknown";
}

MotionKind motion_kind_from_name(const std::string& name) {
  if (name == "translate_right") return MotionKind::TranslateRight;
  if (name == "translate_left") return MotionKind::TranslateLeft;
  if (name == "translate_up") return MotionKind::TranslateUp;
  if (name == "orbit") return MotionKind::Orbit;
  throw std::invalid_argument("unknown motion kind: " + name);
}

void DatasetSpec::validate() const {
  if (num_classes < 2) throw std::invalid_argument("DatasetSpec: need at least 2 classes");
  if (clips_per_class < 1) throw std::invalid_argument("DatasetSpec: clips_per_class < 1");
  if (static_cast<int>(motion_kinds.size()) != num_classes)
    throw std::invalid_argument("DatasetSpec: one motion kind per class required");
  for (std::size_t i = 0; i < motion_kinds.size(); ++i)
    for (std::size_t j = i + 1; j < motion_kinds.size(); ++j)
      if (motion_kinds[i] == motion_kinds[j])
        throw std::invalid_argument("DatasetSpec: motion kinds must be pairwise distinct");
  if (t < 1 || (c != 1 && c != 3) || h < 8 || w < 8)
    throw std::invalid_argument("DatasetSpec: dimensions violate tensor invariants");
  if (noise_std < 0.0) throw std::invalid_argument("DatasetSpec: negative noise_std");
}

namespace {

constexpr double kBackground = 0.2;
constexpr double kShapeHi = 0.95;
constexpr double kShapeLo = 0.55;

// Disc with a class-specific brightness level and a mild radial ramp; a pure
// function of (p - center), so an integer center shift shifts the raster
// exactly. Each class pairs its motion kind with a distinct appearance cue,
// the way natural action classes differ in both dynamics and looks; a
// temporally broadcast perturbation can only engage the appearance pathway.
inline double shape_value(MotionKind kind, double dy, double dx, double radius) {
  const double d = std::sqrt(dx * dx + dy * dy);
  if (d > radius) return -1.0;
  double base = kShapeHi;
  switch (kind) {
    case MotionKind::TranslateRight: base = 0.95; break;
    case MotionKind::TranslateLeft: base = 0.80; break;
    case MotionKind::TranslateUp: base = 0.65; break;
    case MotionKind::Orbit: base = 0.50; break;
  }
  // small interior gradient so dense flow has texture inside the disc
  return base - 0.10 * (d / radius);
}

struct ClipRender {
  VideoTensor video;
  ClipMeta meta;
};

ClipRender render_clip(const DatasetSpec& spec, MotionKind motion, std::uint64_t clip_seed) {
  Rng rng(clip_seed);
  ClipRender out;
  out.video = VideoTensor::zeros(spec.t, spec.c, spec.h, spec.w);
  ClipMeta& meta = out.meta;
  meta.motion = motion;

  const int side = std::min(spec.h, spec.w);
  meta.shape_radius = rng.uniform(0.15, 0.22) * side;
  const double r = meta.shape_radius;

  // Per-frame integer speed, reduced when the trajectory cannot fit.
  int speed = 1 + rng.uniform_int(2);
  if ((spec.t - 1) * speed + 2 * (r + 2) >= side) speed = 1;

  switch (motion) {
    case MotionKind::TranslateRight:
      meta.dx = speed;
      meta.dy = 0;
      break;
    case MotionKind::TranslateLeft:
      meta.dx = -speed;
      meta.dy = 0;
      break;
    case MotionKind::TranslateUp:
      meta.dx = 0;
      meta.dy = -speed;
      break;
    case MotionKind::Orbit: {
      meta.dx = meta.dy = 0;
      const double hi = side / 2.0 - r - 2.0;
      const double lo = std::min(0.25 * side, 0.6 * hi);
      if (hi <= lo || hi <= 0.0)
        throw std::invalid_argument("DatasetSpec: frame too small for orbit motion");
      meta.orbit_radius = rng.uniform(lo, hi);
      meta.orbit_step = rng.uniform(0.35, 0.65);
      meta.orbit_phase = rng.uniform(0.0, 6.283185307179586);
      break;
    }
  }

  if (motion == MotionKind::Orbit) {
    meta.cx0 = spec.w / 2.0 + meta.orbit_radius * std::cos(meta.orbit_phase);
    meta.cy0 = spec.h / 2.0 + meta.orbit_radius * std::sin(meta.orbit_phase);
  } else {
    // Keep the full trajectory inside the frame.
    const double travel_x = meta.dx * (spec.t - 1);
    const double travel_y = meta.dy * (spec.t - 1);
    const double lo_x = r + 1 + std::max(0.0, -travel_x);
    const double hi_x = spec.w - r - 2 - std::max(0.0, travel_x);
    const double lo_y = r + 1 + std::max(0.0, -travel_y);
    const double hi_y = spec.h - r - 2 - std::max(0.0, travel_y);
    if (hi_x < lo_x || hi_y < lo_y)
      throw std::invalid_argument("DatasetSpec: frame too small for the motion range");
    meta.cx0 = std::floor(rng.uniform(lo_x, hi_x));
    meta.cy0 = std::floor(rng.uniform(lo_y, hi_y));
  }

  // Per-frame sensor-style background noise: temporally incoherent, so the
  // classifier learns to key on temporally coherent structure. noise_std = 0
  // gives a constant background and exact integer-shift frames.
  for (int t = 0; t < spec.t; ++t) {
    double cx = meta.cx0, cy = meta.cy0;
    if (motion == MotionKind::Orbit) {
      const double a = meta.orbit_phase + t * meta.orbit_step;
      cx = spec.w / 2.0 + meta.orbit_radius * std::cos(a);
      cy = spec.h / 2.0 + meta.orbit_radius * std::sin(a);
    } else {
      cx += t * meta.dx;
      cy += t * meta.dy;
    }
    for (int y = 0; y < spec.h; ++y)
      for (int x = 0; x < spec.w; ++x) {
        const double sv = shape_value(motion, y - cy, x - cx, r);
        float pixel;
        if (sv >= 0.0) {
          pixel = static_cast<float>(sv);
        } else if (spec.noise_std > 0.0) {
          pixel = static_cast<float>(
              std::clamp(kBackground + spec.noise_std * rng.normal(), 0.0, 0.45));
        } else {
          pixel = static_cast<float>(kBackground);
        }
        for (int ci = 0; ci < spec.c; ++ci) out.video.at(t, ci, y, x) = pixel;
      }
  }
  return out;
}

std::uint64_t fnv1a64(std::uint64_t hash, const void* data, std::size_t bytes) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ull;
  }
  return hash;
}

}  // namespace

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;

  const int train_per_class = (spec.clips_per_class * 4) / 5;
  std::uint64_t hash = 0xcbf29ce484222325ull;

  for (int label = 0; label < spec.num_classes; ++label) {
    for (int i = 0; i < spec.clips_per_class; ++i) {
      const std::uint64_t clip_seed =
          mix_seed(spec.seed, static_cast<std::uint64_t>(label) * 100000 + i);
      ClipRender r = render_clip(spec, spec.motion_kinds[label], clip_seed);
      r.meta.label = label;
      char idbuf[32];
      std::snprintf(idbuf, sizeof(idbuf), "c%d_%03d", label, i);
      r.meta.id = idbuf;
      hash = fnv1a64(hash, r.video.data.data(), r.video.data.size() * sizeof(float));
      const bool is_train = i < train_per_class;
      r.meta.split = is_train ? "train" : "test";
      if (is_train) {
        ds.train.push_back({std::move(r.video), label});
        ds.train_meta.push_back(std::move(r.meta));
      } else {
        ds.test.push_back({std::move(r.video), label});
        ds.test_meta.push_back(std::move(r.meta));
      }
    }
  }
  ds.content_hash = hash;
  return ds;
}

namespace {

json meta_to_json(const ClipMeta& m) {
  json j;
  j["id"] = m.id;
  j["label"] = m.label;
  j["split"] = m.split;
  j["motion"] = motion_kind_name(m.motion);
  j["dx"] = m.dx;
  j["dy"] = m.dy;
  j["cx0"] = m.cx0;
  j["cy0"] = m.cy0;
  j["shape_radius"] = m.shape_radius;
  j["orbit_radius"] = m.orbit_radius;
  j["orbit_step"] = m.orbit_step;
  j["orbit_phase"] = m.orbit_phase;
  return j;
}

ClipMeta meta_from_json(const json& j) {
  ClipMeta m;
  m.id = j.at("id").get<std::string>();
  m.label = j.at("label").get<int>();
  m.split = j.at("split").get<std::string>();
  m.motion = motion_kind_from_name(j.at("motion").get<std::string>());
  m.dx = j.at("dx").get<int>();
  m.dy = j.at("dy").get<int>();
  m.cx0 = j.at("cx0").get<double>();
  m.cy0 = j.at("cy0").get<double>();
  m.shape_radius = j.at("shape_radius").get<double>();
  m.orbit_radius = j.at("orbit_radius").get<double>();
  m.orbit_step = j.at("orbit_step").get<double>();
  m.orbit_phase = j.at("orbit_phase").get<double>();
  return m;
}

}  // namespace

std::string manifest_json(const Dataset& ds) {
  json j;
  j["num_classes"] = ds.spec.num_classes;
  j["clips_per_class"] = ds.spec.clips_per_class;
  j["t"] = ds.spec.t;
  j["c"] = ds.spec.c;
  j["h"] = ds.spec.h;
  j["w"] = ds.spec.w;
  j["noise_std"] = ds.spec.noise_std;
  j["seed"] = ds.spec.seed;
  json kinds = json::array();
  for (MotionKind k : ds.spec.motion_kinds) kinds.push_back(motion_kind_name(k));
  j["motion_kinds"] = kinds;
  j["content_hash"] = ds.content_hash;
  json clips = json::array();
  for (const auto& m : ds.train_meta) clips.push_back(meta_to_json(m));
  for (const auto& m : ds.test_meta) clips.push_back(meta_to_json(m));
  j["clips"] = clips;
  return j.dump(2) + "\n";
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "test");
  for (std::size_t i = 0; i < ds.train.size(); ++i)
    save_video(ds.train[i].video, dir / "train" / (ds.train_meta[i].id + ".vten"));
  for (std::size_t i = 0; i < ds.test.size(); ++i)
    save_video(ds.test[i].video, dir / "test" / (ds.test_meta[i].id + ".vten"));
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << manifest_json(ds);
}

Dataset load_dataset_dir(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing manifest.json in " + dir.string());
  json j = json::parse(in);
  Dataset ds;
  ds.spec.num_classes = j.at("num_classes").get<int>();
  ds.spec.clips_per_class = j.at("clips_per_class").get<int>();
  ds.spec.t = j.at("t").get<int>();
  ds.spec.c = j.at("c").get<int>();
  ds.spec.h = j.at("h").get<int>();
  ds.spec.w = j.at("w").get<int>();
  ds.spec.noise_std = j.at("noise_std").get<double>();
  ds.spec.seed = j.at("seed").get<std::uint64_t>();
  ds.spec.motion_kinds.clear();
  for (const auto& name : j.at("motion_kinds"))
    ds.spec.motion_kinds.push_back(motion_kind_from_name(name.get<std::string>()));
  ds.content_hash = j.at("content_hash").get<std::uint64_t>();
  for (const auto& cj : j.at("clips")) {
    ClipMeta m = meta_from_json(cj);
    const fs::path clip_path = dir / m.split / (m.id + ".vten");
    LabeledClip clip{load_video(clip_path), m.label};
    if (m.split == "train") {
      ds.train.push_back(std::move(clip));
      ds.train_meta.push_back(std::move(m));
    } else {
      ds.test.push_back(std::move(clip));
      ds.test_meta.push_back(std::move(m));
    }
  }
  return ds;
}

namespace {

VideoTensor adapt_clip(const VideoTensor& src, int t, int c, int h, int w) {
  VideoTensor out = VideoTensor::zeros(t, c, h, w);
  for (int ti = 0; ti < t; ++ti) {
    // Uniform temporal resample.
    const int si = static_cast<int>((static_cast<long long>(ti) * src.t) / t);
    Frame f = src.frame(si);
    if (f.h != h || f.w != w) f = resize_bilinear(f, h, w);
    if (f.c != c) {
      if (c == 1) {
        const GrayFrame g = to_grayscale(f);
        Frame gf = Frame::zeros(1, h, w);
        gf.data = g.data;
        f = std::move(gf);
      } else {
        Frame rgb = Frame::zeros(3, h, w);
        for (int ci = 0; ci < 3; ++ci)
          std::copy(f.data.begin(), f.data.end(),
                    rgb.data.begin() + static_cast<std::size_t>(ci) * h * w);
        f = std::move(rgb);
      }
    }
    out.set_frame(ti, f);
  }
  return out;
}

}  // namespace

std::vector<LabeledClip> load_external_dataset(const fs::path& root, int t, int c, int h, int w) {
  std::ifstream in(root / "manifest.txt");
  if (!in) throw std::runtime_error("missing manifest.txt in " + root.string());
  std::vector<LabeledClip> clips;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string rel;
    int label = -1;
    if (!(ss >> rel >> label))
      throw std::runtime_error("external dataset manifest: malformed line: " + line);
    const VideoTensor raw = load_video(root / rel);
    clips.push_back({adapt_clip(raw, t, c, h, w), label});
  }
  if (clips.empty()) throw std::runtime_error("external dataset manifest lists no clips");
  return clips;
}

}  // namespace gradcast
