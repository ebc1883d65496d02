#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>

#include "gradcast/dataset.hpp"
#include "gradcast/flow.hpp"
#include "testutil.hpp"

using namespace gradcast;

namespace {

DatasetSpec small_spec(std::uint64_t seed, double noise = 0.05) {
  DatasetSpec spec;
  spec.clips_per_class = 5;
  spec.t = 8;
  spec.h = 32;
  spec.w = 32;
  spec.noise_std = noise;
  spec.seed = seed;
  return spec;
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  const Dataset a = generate_dataset(small_spec(7));
  const Dataset b = generate_dataset(small_spec(7));
  const Dataset c = generate_dataset(small_spec(8));
  CHECK(a.content_hash == b.content_hash);
  CHECK(manifest_json(a) == manifest_json(b));
  CHECK(a.content_hash != c.content_hash);
}

TEST_CASE("labels are balanced and the split is 80/20 per class") {
  const Dataset ds = generate_dataset(small_spec(3));
  std::vector<int> train_counts(4, 0), test_counts(4, 0);
  for (const auto& clip : ds.train) ++train_counts[clip.label];
  for (const auto& clip : ds.test) ++test_counts[clip.label];
  for (int label = 0; label < 4; ++label) {
    CHECK(train_counts[label] == 4);
    CHECK(test_counts[label] == 1);
  }
}

TEST_CASE("noise-free translation clips are exact shifted copies") {
  const Dataset ds = generate_dataset(small_spec(5, 0.0));
  int translation_clips = 0;
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const ClipMeta& meta = ds.train_meta[i];
    if (meta.motion == MotionKind::Orbit) continue;
    ++translation_clips;
    const VideoTensor& v = ds.train[i].video;
    for (int t = 0; t + 1 < v.t; ++t)
      for (int y = 0; y < v.h; ++y)
        for (int x = 0; x < v.w; ++x) {
          const int sy = y - meta.dy, sx = x - meta.dx;
          if (sy < 0 || sy >= v.h || sx < 0 || sx >= v.w) continue;
          CHECK(v.at(t + 1, 0, y, x) == v.at(t, 0, sy, sx));
        }
  }
  CHECK(translation_clips > 0);
}

TEST_CASE("flow recovers the planted shift over the shape region") {
  const Dataset ds = generate_dataset(small_spec(11, 0.0));
  int checked = 0;
  for (std::size_t i = 0; i < ds.train.size() && checked < 3; ++i) {
    const ClipMeta& meta = ds.train_meta[i];
    if (meta.motion == MotionKind::Orbit) continue;
    ++checked;
    const VideoTensor& v = ds.train[i].video;
    const GrayFrame a = to_grayscale(v.frame(0));
    const GrayFrame b = to_grayscale(v.frame(1));
    const FlowField f = farneback_flow(a, b);
    // Average recovered flow over the disc support at frame 1.
    const double cx = meta.cx0 + meta.dx, cy = meta.cy0 + meta.dy;
    double du = 0.0, dv = 0.0;
    int count = 0;
    for (int y = 0; y < v.h; ++y)
      for (int x = 0; x < v.w; ++x) {
        const double d = std::hypot(x - cx, y - cy);
        if (d <= meta.shape_radius) {
          du += f.du[f.idx(y, x)];
          dv += f.dv[f.idx(y, x)];
          ++count;
        }
      }
    REQUIRE(count > 0);
    du /= count;
    dv /= count;
    CHECK(std::abs(du - meta.dx) < 0.5);
    CHECK(std::abs(dv - meta.dy) < 0.5);
  }
  CHECK(checked == 3);
}

TEST_CASE("dataset save/load round trip") {
  testutil::TempDir dir("ds");
  const Dataset ds = generate_dataset(small_spec(13));
  save_dataset(ds, dir.path());
  const Dataset back = load_dataset_dir(dir.path());
  CHECK(back.content_hash == ds.content_hash);
  REQUIRE(back.train.size() == ds.train.size());
  REQUIRE(back.test.size() == ds.test.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    CHECK(back.train[i].label == ds.train[i].label);
    CHECK(back.train[i].video.data == ds.train[i].video.data);
  }
  CHECK(manifest_json(back) == manifest_json(ds));
}

TEST_CASE("spec validation") {
  DatasetSpec spec = small_spec(1);
  spec.motion_kinds = {MotionKind::Orbit, MotionKind::Orbit, MotionKind::TranslateUp,
                       MotionKind::TranslateLeft};
  CHECK_THROWS(generate_dataset(spec));  // duplicate motion kinds

  DatasetSpec tiny = small_spec(1);
  tiny.h = 4;
  CHECK_THROWS(generate_dataset(tiny));

  DatasetSpec wrong_count = small_spec(1);
  wrong_count.num_classes = 3;
  CHECK_THROWS(generate_dataset(wrong_count));
}

TEST_CASE("external frame-directory ingestion adapts shape") {
  testutil::TempDir dir("ext");
  // two clips of 4 frames, 3-channel 12x10 PPM
  for (int clip = 0; clip < 2; ++clip) {
    const auto clip_dir = dir.path() / ("clip" + std::to_string(clip));
    std::filesystem::create_directories(clip_dir);
    for (int f = 0; f < 4; ++f) {
      std::ofstream out(clip_dir / ("f" + std::to_string(f) + ".ppm"), std::ios::binary);
      out << "P6\n10 12\n255\n";
      for (int i = 0; i < 12 * 10 * 3; ++i)
        out.put(static_cast<char>((i * 31 + f * 7 + clip * 3) % 256));
    }
  }
  std::ofstream(dir.path() / "manifest.txt") << "# dirs and labels\nclip0 0\nclip1 2\n";

  const auto clips = load_external_dataset(dir.path(), 8, 1, 16, 16);
  REQUIRE(clips.size() == 2);
  CHECK(clips[0].label == 0);
  CHECK(clips[1].label == 2);
  for (const auto& clip : clips) {
    CHECK(clip.video.t == 8);
    CHECK(clip.video.c == 1);
    CHECK(clip.video.h == 16);
    CHECK(clip.video.w == 16);
    clip.video.validate();
  }

  CHECK_THROWS(load_external_dataset(dir.path() / "nope", 8, 1, 16, 16));
}
