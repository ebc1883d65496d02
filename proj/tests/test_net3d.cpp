#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <variant>

#include "gradcast/dataset.hpp"
#include "gradcast/net3d.hpp"
#include "gradcheck.hpp"
#include "testutil.hpp"

using namespace gradcast;

namespace {

Model3D tiny_model(std::uint64_t seed) { return make_micro_c3d(4, seed, 4, 1, 16, 16); }

DatasetSpec tiny_spec(std::uint64_t seed) {
  DatasetSpec spec;
  spec.clips_per_class = 6;
  spec.t = 4;
  spec.h = 16;
  spec.w = 16;
  spec.noise_std = 0.02;
  spec.seed = seed;
  return spec;
}

std::vector<float> conv_weights(const Model3D& m, int layer) {
  return std::get<Conv3d<float>>(m.layers[layer]).weight;
}

}  // namespace

TEST_CASE("finite differences agree with backward_input for every layer type") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const gradcheck::FdCase cases[] = {
        gradcheck::make_conv_case(seed),       gradcheck::make_relu_case(seed),
        gradcheck::make_pool_case(seed),       gradcheck::make_linear_case(seed),
        gradcheck::make_composite_case(seed),
    };
    for (const auto& c : cases) {
      const auto res = gradcheck::finite_difference_check(c.model, c.input, seed);
      INFO(c.name, " seed ", seed);
      CHECK(res.max_rel < 1e-3);
      CHECK(res.l2_rel < 1e-3);
    }
  }
}

TEST_CASE("zero parameters give zero logits") {
  Model3D m = tiny_model(1);
  for (auto& layer : m.layers) {
    if (auto* conv = std::get_if<Conv3d<float>>(&layer)) {
      std::fill(conv->weight.begin(), conv->weight.end(), 0.0f);
      std::fill(conv->bias.begin(), conv->bias.end(), 0.0f);
    } else if (auto* lin = std::get_if<Linear<float>>(&layer)) {
      std::fill(lin->weight.begin(), lin->weight.end(), 0.0f);
      std::fill(lin->bias.begin(), lin->bias.end(), 0.0f);
    }
  }
  const auto logits = logits_of(m, testutil::random_video(4, 1, 16, 16, 2));
  for (float v : logits) CHECK(v == 0.0f);
}

TEST_CASE("1x1x1 identity convolution reproduces its input") {
  ModelT<float> m;
  m.in_c = 1;
  m.in_t = 2;
  m.in_h = 8;
  m.in_w = 8;
  m.num_classes = 2;
  Conv3d<float> conv;
  conv.out_ch = 1;
  conv.in_ch = 1;
  conv.weight = {1.0f};
  conv.bias = {0.0f};
  m.layers.emplace_back(std::move(conv));

  const VideoTensor v = testutil::random_video(2, 1, 8, 8, 3);
  auto [out, trace] = forward<float>(m, v);
  (void)trace;
  const Tensor4<float> x = video_to_tensor<float>(v);
  REQUIRE(out.size() == x.v.size());
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == x.v[i]);
}

TEST_CASE("forward is deterministic and finite") {
  const Model3D m = tiny_model(7);
  const VideoTensor v = testutil::random_video(4, 1, 16, 16, 11);
  const auto a = logits_of(m, v);
  const auto b = logits_of(m, v);
  CHECK(a == b);
  for (float x : a) CHECK(std::isfinite(x));
}

TEST_CASE("forward rejects shape mismatches") {
  const Model3D m = tiny_model(1);
  CHECK_THROWS(forward<float>(m, testutil::random_video(4, 1, 16, 17, 0)));
  CHECK_THROWS(forward<float>(m, testutil::random_video(3, 1, 16, 16, 0)));
}

TEST_CASE("guided relu backward masks on activation and incoming gradient") {
  ModelT<float> m;
  m.in_c = 2;
  m.in_t = 3;
  m.in_h = 8;
  m.in_w = 9;
  m.num_classes = 2;
  m.layers.emplace_back(Relu{});

  Rng rng(17);
  VideoTensor v = VideoTensor::zeros(3, 2, 8, 9);
  // raw signed input: bypass [0,1] by writing the buffer directly
  for (float& x : v.data) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto [out, trace] = forward<float>(m, v);
  (void)out;
  std::vector<float> grad(trace.acts.back().size());
  for (float& g : grad) g = static_cast<float>(rng.uniform(-1.0, 1.0));

  m.relu_mode = ReluMode::Standard;
  const Tensor4<float> std_grad = backward_input<float>(m, trace, grad);
  m.relu_mode = ReluMode::Guided;
  const Tensor4<float> gui_grad = backward_input<float>(m, trace, grad);
  m.relu_mode = ReluMode::Standard;

  const Tensor4<float>& z = trace.acts[0];
  for (std::size_t i = 0; i < z.v.size(); ++i) {
    if (z.v[i] <= 0.0f || grad[i] <= 0.0f) CHECK(gui_grad.v[i] == 0.0f);
    if (gui_grad.v[i] != 0.0f) {
      CHECK(grad[i] > 0.0f);
      CHECK(std_grad.v[i] != 0.0f);  // guided support within standard support
      CHECK(gui_grad.v[i] >= 0.0f);
    }
    if (z.v[i] > 0.0f)
      CHECK(std_grad.v[i] == grad[i]);
    else
      CHECK(std_grad.v[i] == 0.0f);
  }
}

TEST_CASE("zero output gradient backpropagates to zero") {
  const Model3D m = tiny_model(5);
  const VideoTensor v = testutil::random_video(4, 1, 16, 16, 6);
  auto [out, trace] = forward<float>(m, v);
  (void)out;
  const std::vector<float> zeros(static_cast<std::size_t>(m.num_classes), 0.0f);
  const Tensor4<float> g = backward_input<float>(m, trace, zeros);
  for (float x : g.v) CHECK(x == 0.0f);
}

TEST_CASE("backward_input rejects a stale trace") {
  const Model3D m = tiny_model(5);
  const Model3D other = make_micro_c3d(4, 5, 8, 1, 32, 32);
  const VideoTensor v = testutil::random_video(8, 1, 32, 32, 6);
  auto [out, trace] = forward<float>(m, testutil::random_video(4, 1, 16, 16, 6));
  (void)out;
  auto [out2, stale] = forward<float>(other, v);
  (void)out2;
  const std::vector<float> grad(4, 1.0f);
  CHECK_THROWS(backward_input<float>(m, stale, grad));
}

TEST_CASE("guided_backprop post-processing and restoration contract") {
  const Model3D m = tiny_model(9);
  const VideoTensor v = testutil::random_video(4, 1, 16, 16, 21);

  SUBCASE("map values in [0,1], metadata recorded") {
    const GradientMap map = guided_backprop(m, v, 2, -1, 1);
    CHECK(m.relu_mode == ReluMode::Standard);
    CHECK(map.c == 1);
    CHECK(map.h == 16);
    CHECK(map.w == 16);
    CHECK(map.source_frame == 2);
    CHECK(map.source_layer == static_cast<int>(m.layers.size()) - 1);
    for (float x : map.data) {
      CHECK(x >= 0.0f);
      CHECK(x <= 1.0f);
    }
  }
  SUBCASE("all-zero input gives an all-zero map") {
    const VideoTensor zeros = VideoTensor::zeros(4, 1, 16, 16);
    const GradientMap map = guided_backprop(m, zeros, 0, -1, 0);
    for (float x : map.data) CHECK(x == 0.0f);
  }
  SUBCASE("invalid indices throw") {
    CHECK_THROWS(guided_backprop(m, v, 4, -1, 0));
    CHECK_THROWS(guided_backprop(m, v, 0, -1, 7));
    CHECK_THROWS(guided_backprop(m, v, 0, 99, 0));
  }
  SUBCASE("relu_mode restored even when the gradient blows up") {
    Model3D hot = tiny_model(9);
    for (auto& layer : hot.layers)
      if (auto* conv = std::get_if<Conv3d<float>>(&layer))
        for (float& w : conv->weight) w *= 1e30f;
    CHECK_THROWS(guided_backprop(hot, v, 0, -1, 0));
    CHECK(hot.relu_mode == ReluMode::Standard);
  }
  SUBCASE("intermediate extraction layer works and records itself") {
    const GradientMap map = guided_backprop(m, v, 1, 3, 0);
    CHECK(map.source_layer == 3);
    for (float x : map.data) {
      CHECK(x >= 0.0f);
      CHECK(x <= 1.0f);
    }
  }
}

TEST_CASE("guided_backprop on a trained model produces a non-trivial map") {
  const Dataset ds = generate_dataset(tiny_spec(3));
  Model3D m = tiny_model(3);
  TrainOptions opts;
  opts.epochs = 12;
  opts.lr = 0.02;
  opts.seed = 3;
  const TrainLog log = train(m, ds.train, opts);
  CHECK(log.accuracy.back() > 0.5);

  const GradientMap map = guided_backprop(m, ds.test.front().video, 1, -1,
                                          ds.test.front().label);
  float mx = 0.0f;
  for (float x : map.data) {
    CHECK(x >= 0.0f);
    CHECK(x <= 1.0f);
    mx = std::max(mx, x);
  }
  CHECK(mx > 0.0f);
}

TEST_CASE("grad_cam") {
  SUBCASE("heatmap in [0,1] on a real model") {
    const Model3D m = tiny_model(13);
    const VideoTensor v = testutil::random_video(4, 1, 16, 16, 14);
    const GradientMap map = grad_cam(m, v, 0, 2);
    CHECK(map.source_layer == 0);
    for (float x : map.data) {
      CHECK(x >= 0.0f);
      CHECK(x <= 1.0f);
    }
  }
  SUBCASE("zero input yields a zero heatmap") {
    const Model3D m = tiny_model(13);
    const GradientMap map = grad_cam(m, VideoTensor::zeros(4, 1, 16, 16), 0, 0);
    for (float x : map.data) CHECK(x == 0.0f);
  }
  SUBCASE("single positive channel concentrates mass where the activation is") {
    // Identity conv + all-ones head: cam == input intensity.
    ModelT<float> m;
    m.in_c = 1;
    m.in_t = 1;
    m.in_h = 16;
    m.in_w = 16;
    m.num_classes = 2;
    Conv3d<float> conv;
    conv.out_ch = 1;
    conv.in_ch = 1;
    conv.weight = {1.0f};
    conv.bias = {0.0f};
    m.layers.emplace_back(std::move(conv));
    m.layers.emplace_back(Flatten{});
    Linear<float> lin;
    lin.in_dim = 256;
    lin.out_dim = 2;
    lin.weight.assign(512, 0.0f);
    for (int k = 0; k < 256; ++k) lin.weight[k] = 1.0f;  // class 0 sums everything
    lin.bias = {0.0f, 0.0f};
    m.layers.emplace_back(std::move(lin));

    VideoTensor v = VideoTensor::zeros(1, 1, 16, 16);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) v.at(0, 0, y, x) = 0.9f;  // top-left quadrant bright

    const GradientMap map = grad_cam(m, v, 0, 0);
    double top_left = 0.0, total = 0.0;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        total += map.at(0, y, x);
        if (y < 8 && x < 8) top_left += map.at(0, y, x);
      }
    CHECK(total > 0.0);
    CHECK(top_left / total > 0.5);
  }
  SUBCASE("non-conv layer index throws") {
    const Model3D m = tiny_model(13);
    CHECK_THROWS(grad_cam(m, testutil::random_video(4, 1, 16, 16, 1), 1, 0));
  }
}

TEST_CASE("predict follows argmax with smallest-index ties") {
  // Flatten+Linear with controlled bias gives exact logits.
  ModelT<float> m;
  m.in_c = 1;
  m.in_t = 1;
  m.in_h = 8;
  m.in_w = 8;
  m.num_classes = 3;
  m.layers.emplace_back(Flatten{});
  Linear<float> lin;
  lin.in_dim = 64;
  lin.out_dim = 3;
  lin.weight.assign(192, 0.0f);
  lin.bias = {0.1f, 2.0f, -1.0f};
  m.layers.emplace_back(lin);
  const VideoTensor v = VideoTensor::zeros(1, 1, 8, 8);
  CHECK(predict(m, v) == 1);

  auto& head = std::get<Linear<float>>(m.layers[1]);
  head.bias = {1.0f, 1.0f, 0.0f};
  CHECK(predict(m, v) == 0);  // tie -> smallest index

  // argmax is invariant to a constant logit shift
  head.bias = {1.5f, 1.5f, 0.5f};
  CHECK(predict(m, v) == 0);
}

TEST_CASE("cross-entropy input gradient matches the hand-derived linear case") {
  // Flatten -> Linear: dCE/dx = W^T (softmax - onehot).
  ModelT<float> m;
  m.in_c = 1;
  m.in_t = 1;
  m.in_h = 8;
  m.in_w = 8;
  m.num_classes = 2;
  m.layers.emplace_back(Flatten{});
  Linear<float> lin;
  lin.in_dim = 64;
  lin.out_dim = 2;
  Rng rng(23);
  lin.weight.resize(128);
  for (float& w : lin.weight) w = static_cast<float>(rng.uniform(-0.5, 0.5));
  lin.bias = {0.05f, -0.02f};
  m.layers.emplace_back(lin);

  const VideoTensor v = testutil::random_video(1, 1, 8, 8, 29);
  double loss = 0.0;
  const Tensor4<float> g = input_gradient_ce(m, v, 1, &loss);
  CHECK(loss > 0.0);

  const auto logits = logits_of(m, v);
  const double mx = std::max(logits[0], logits[1]);
  const double e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
  const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
  const double d0 = p0, d1 = p1 - 1.0;  // softmax minus one-hot at label 1
  const auto& head = std::get<Linear<float>>(m.layers[1]);
  for (int k = 0; k < 64; ++k) {
    const double expect = d0 * head.weight[k] + d1 * head.weight[64 + k];
    CHECK(g.v[k] == doctest::Approx(expect).epsilon(1e-4));
  }
}

TEST_CASE("training behaves like seeded SGD on cross-entropy") {
  const Dataset ds = generate_dataset(tiny_spec(8));
  TrainOptions opts;
  opts.epochs = 4;
  opts.lr = 0.02;
  opts.seed = 5;

  SUBCASE("initial loss is about ln(num_classes)") {
    Model3D m = tiny_model(8);
    const TrainLog log = train(m, ds.train, opts);
    const double ln4 = std::log(4.0);
    CHECK(log.loss.front() > 0.8 * ln4);
    CHECK(log.loss.front() < 1.2 * ln4);
    CHECK(log.loss.size() == static_cast<std::size_t>(log.epochs_run) + 1);
  }
  SUBCASE("same seed reproduces identical weights bitwise") {
    Model3D a = tiny_model(8);
    Model3D b = tiny_model(8);
    train(a, ds.train, opts);
    train(b, ds.train, opts);
    CHECK(conv_weights(a, 0) == conv_weights(b, 0));
    CHECK(conv_weights(a, 3) == conv_weights(b, 3));
    CHECK(std::get<Linear<float>>(a.layers.back()).weight ==
          std::get<Linear<float>>(b.layers.back()).weight);
  }
  SUBCASE("diverging learning rate raises on non-finite loss") {
    Model3D m = tiny_model(8);
    TrainOptions hot = opts;
    hot.lr = 1e20;  // overflows the float parameters into inf/NaN territory
    hot.epochs = 10;
    CHECK_THROWS(train(m, ds.train, hot));
  }
  SUBCASE("empty dataset rejected") {
    Model3D m = tiny_model(8);
    CHECK_THROWS(train(m, {}, opts));
  }
}

TEST_CASE("training reaches high accuracy on the tiny task") {
  const Dataset ds = generate_dataset(tiny_spec(4));
  Model3D m = tiny_model(4);
  TrainOptions opts;
  opts.epochs = 25;
  opts.lr = 0.02;
  opts.seed = 4;
  opts.target_accuracy = 0.95;
  const TrainLog log = train(m, ds.train, opts);
  CHECK(log.accuracy.back() >= 0.9);
  CHECK(log.loss.back() < log.loss.front());
}

TEST_CASE("checkpoints round-trip bitwise") {
  testutil::TempDir dir("ckpt");
  const Model3D m = tiny_model(31);
  const auto path = dir.path() / "model.m3dc";
  save_model(m, path);

  std::ifstream in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "M3DC");

  const Model3D back = load_model(path);
  CHECK(back.num_classes == m.num_classes);
  CHECK(back.in_t == m.in_t);
  CHECK(conv_weights(back, 0) == conv_weights(m, 0));
  const VideoTensor v = testutil::random_video(4, 1, 16, 16, 12);
  CHECK(logits_of(back, v) == logits_of(m, v));

  CHECK_THROWS(load_model(dir.path() / "missing.m3dc"));
}

TEST_CASE("call counter counts forward passes") {
  const Model3D m = tiny_model(2);
  const VideoTensor v = testutil::random_video(4, 1, 16, 16, 2);
  const auto before = m.calls.value();
  predict(m, v);
  logits_of(m, v);
  guided_backprop(m, v, 0, -1, 0);
  CHECK(m.calls.value() - before == 3);
}
