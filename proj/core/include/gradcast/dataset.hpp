#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gradcast/net3d.hpp"
#include "gradcast/video.hpp"

namespace gradcast {

enum class MotionKind { TranslateRight, TranslateLeft, TranslateUp, Orbit };

std::string motion_kind_name(MotionKind k);
MotionKind motion_kind_from_name(const std::string& name);

struct DatasetSpec {
  int num_classes = 4;
  int clips_per_class = 20;
  int t = 8, c = 1, h = 32, w = 32;
  std::vector<MotionKind> motion_kinds = {MotionKind::TranslateRight, MotionKind::TranslateLeft,
                                          MotionKind::TranslateUp, MotionKind::Orbit};
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

// Generation parameters per clip, kept so tests can recover ground truth:
// integer per-frame shift (dx, dy) for translation classes, orbit parameters
// otherwise.
struct ClipMeta {
  std::string id;
  int label = 0;
  std::string split;
  MotionKind motion = MotionKind::TranslateRight;
  int dx = 0, dy = 0;
  double cx0 = 0.0, cy0 = 0.0;  // shape center at frame 0
  double shape_radius = 0.0;
  double orbit_radius = 0.0, orbit_step = 0.0, orbit_phase = 0.0;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<LabeledClip> train, test;
  std::vector<ClipMeta> train_meta, test_meta;
  std::uint64_t content_hash = 0;
};

// Bright disc with a class-specific radial pattern moving over a darker
// background carrying per-frame sensor noise. Translation classes move by an
// exact integer shift per frame, so noise-free clips are exact shifted
// copies. Deterministic in spec.seed; per-class 80/20 train/test split.
Dataset generate_dataset(const DatasetSpec& spec);

// JSON manifest covering the spec, every clip's metadata and the content
// hash. Byte-stable for a fixed spec.
std::string manifest_json(const Dataset& ds);

// Writes clips as train/<id>.vten and test/<id>.vten plus manifest.json.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset_dir(const std::filesystem::path& dir);

// Frame-directory ingestion: `root/manifest.txt` lines are
// "<relative-dir> <label>"; each directory holds PNM frames. Clips are
// adapted to t/c/h/w via bilinear resize, BT.601 or channel replication, and
// uniform temporal resampling.
std::vector<LabeledClip> load_external_dataset(const std::filesystem::path& root, int t, int c,
                                               int h, int w);

}  // namespace gradcast
