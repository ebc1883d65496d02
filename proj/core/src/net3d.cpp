#include "gradcast/net3d.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "binio.hpp"
#include "gradcast/rng.hpp"

namespace gradcast {

namespace {

struct Shape4 {
  int c = 0, t = 0, h = 0, w = 0;
  std::size_t numel() const { return static_cast<std::size_t>(c) * t * h * w; }
  bool operator==(const Shape4&) const = default;
};

int conv_out_dim(int in, int k, int s, int p) {
  if (in + 2 * p < k) return 0;
  return (in + 2 * p - k) / s + 1;
}
int pool_out_dim(int in, int k, int s) {
  if (in < k) return 0;
  return (in - k) / s + 1;
}

template <typename S>
Shape4 layer_out_shape(const Layer<S>& layer, const Shape4& in) {
  Shape4 out;
  if (const auto* conv = std::get_if<Conv3d<S>>(&layer)) {
    if (conv->in_ch != in.c) throw std::invalid_argument("Conv3d: channel mismatch");
    out = {conv->out_ch, conv_out_dim(in.t, conv->kt, conv->st, conv->pt),
           conv_out_dim(in.h, conv->kh, conv->sh, conv->ph),
           conv_out_dim(in.w, conv->kw, conv->sw, conv->pw)};
  } else if (std::holds_alternative<Relu>(layer)) {
    out = in;
  } else if (const auto* pool = std::get_if<MaxPool3d>(&layer)) {
    out = {in.c, pool_out_dim(in.t, pool->kt, pool->st), pool_out_dim(in.h, pool->kh, pool->sh),
           pool_out_dim(in.w, pool->kw, pool->sw)};
  } else if (std::holds_alternative<Flatten>(layer)) {
    out = {static_cast<int>(in.numel()), 1, 1, 1};
  } else if (const auto* lin = std::get_if<Linear<S>>(&layer)) {
    if (in.t != 1 || in.h != 1 || in.w != 1)
      throw std::invalid_argument("Linear: input must be flattened first");
    if (lin->in_dim != in.c) throw std::invalid_argument("Linear: dimension mismatch");
    out = {lin->out_dim, 1, 1, 1};
  }
  if (out.c < 1 || out.t < 1 || out.h < 1 || out.w < 1)
    throw std::invalid_argument("layer produces an empty output volume");
  return out;
}

template <typename S>
std::vector<Shape4> shape_chain(const ModelT<S>& m) {
  std::vector<Shape4> shapes;
  shapes.reserve(m.layers.size() + 1);
  shapes.push_back({m.in_c, m.in_t, m.in_h, m.in_w});
  for (const auto& layer : m.layers) shapes.push_back(layer_out_shape<S>(layer, shapes.back()));
  return shapes;
}

template <typename S>
Tensor4<S> conv_forward(const Conv3d<S>& conv, const Tensor4<S>& x) {
  const int ot_n = conv_out_dim(x.t, conv.kt, conv.st, conv.pt);
  const int oh_n = conv_out_dim(x.h, conv.kh, conv.sh, conv.ph);
  const int ow_n = conv_out_dim(x.w, conv.kw, conv.sw, conv.pw);
  Tensor4<S> y = Tensor4<S>::zeros(conv.out_ch, ot_n, oh_n, ow_n);
  const std::size_t kvol = static_cast<std::size_t>(conv.kt) * conv.kh * conv.kw;
  for (int oc = 0; oc < conv.out_ch; ++oc) {
    const S* wbase = conv.weight.data() + static_cast<std::size_t>(oc) * conv.in_ch * kvol;
    for (int ot = 0; ot < ot_n; ++ot) {
      const int it0 = ot * conv.st - conv.pt;
      const int kt_lo = std::max(0, -it0);
      const int kt_hi = std::min(conv.kt, x.t - it0);
      for (int oh = 0; oh < oh_n; ++oh) {
        const int ih0 = oh * conv.sh - conv.ph;
        const int kh_lo = std::max(0, -ih0);
        const int kh_hi = std::min(conv.kh, x.h - ih0);
        for (int ow = 0; ow < ow_n; ++ow) {
          const int iw0 = ow * conv.sw - conv.pw;
          const int kw_lo = std::max(0, -iw0);
          const int kw_hi = std::min(conv.kw, x.w - iw0);
          double acc = static_cast<double>(conv.bias[oc]);
          for (int ic = 0; ic < conv.in_ch; ++ic) {
            const S* wch = wbase + static_cast<std::size_t>(ic) * kvol;
            for (int kt = kt_lo; kt < kt_hi; ++kt) {
              for (int kh = kh_lo; kh < kh_hi; ++kh) {
                const S* xrow = &x.v[x.idx(ic, it0 + kt, ih0 + kh, iw0 + kw_lo)];
                const S* wrow = wch + (static_cast<std::size_t>(kt) * conv.kh + kh) * conv.kw + kw_lo;
                for (int k = 0; k < kw_hi - kw_lo; ++k)
                  acc += static_cast<double>(wrow[k]) * static_cast<double>(xrow[k]);
              }
            }
          }
          y.at(oc, ot, oh, ow) = static_cast<S>(acc);
        }
      }
    }
  }
  return y;
}

// Scatter-form conv backward. Computes dx when dx != nullptr and accumulates
// parameter gradients (in double) when gw/gb != nullptr.
template <typename S>
void conv_backward(const Conv3d<S>& conv, const Tensor4<S>& x, const Tensor4<S>& gy,
                   Tensor4<S>* dx, std::vector<double>* gw, std::vector<double>* gb) {
  const std::size_t kvol = static_cast<std::size_t>(conv.kt) * conv.kh * conv.kw;
  for (int oc = 0; oc < conv.out_ch; ++oc) {
    const S* wbase = conv.weight.data() + static_cast<std::size_t>(oc) * conv.in_ch * kvol;
    double* gwbase = gw ? gw->data() + static_cast<std::size_t>(oc) * conv.in_ch * kvol : nullptr;
    for (int ot = 0; ot < gy.t; ++ot) {
      const int it0 = ot * conv.st - conv.pt;
      const int kt_lo = std::max(0, -it0);
      const int kt_hi = std::min(conv.kt, x.t - it0);
      for (int oh = 0; oh < gy.h; ++oh) {
        const int ih0 = oh * conv.sh - conv.ph;
        const int kh_lo = std::max(0, -ih0);
        const int kh_hi = std::min(conv.kh, x.h - ih0);
        for (int ow = 0; ow < gy.w; ++ow) {
          const int iw0 = ow * conv.sw - conv.pw;
          const int kw_lo = std::max(0, -iw0);
          const int kw_hi = std::min(conv.kw, x.w - iw0);
          const double g = static_cast<double>(gy.at(oc, ot, oh, ow));
          if (gb) (*gb)[oc] += g;
          if (g == 0.0) continue;
          for (int ic = 0; ic < conv.in_ch; ++ic) {
            const S* wch = wbase + static_cast<std::size_t>(ic) * kvol;
            double* gwch = gwbase ? gwbase + static_cast<std::size_t>(ic) * kvol : nullptr;
            for (int kt = kt_lo; kt < kt_hi; ++kt) {
              for (int kh = kh_lo; kh < kh_hi; ++kh) {
                const std::size_t xoff = x.idx(ic, it0 + kt, ih0 + kh, iw0 + kw_lo);
                const std::size_t woff =
                    (static_cast<std::size_t>(kt) * conv.kh + kh) * conv.kw + kw_lo;
                const int span = kw_hi - kw_lo;
                if (dx) {
                  S* dxrow = &dx->v[xoff];
                  const S* wrow = wch + woff;
                  for (int k = 0; k < span; ++k)
                    dxrow[k] += static_cast<S>(g * static_cast<double>(wrow[k]));
                }
                if (gwch) {
                  const S* xrow = &x.v[xoff];
                  double* gwrow = gwch + woff;
                  for (int k = 0; k < span; ++k) gwrow[k] += g * static_cast<double>(xrow[k]);
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename S>
Tensor4<S> pool_forward(const MaxPool3d& pool, const Tensor4<S>& x,
                        std::vector<std::int64_t>* argmax) {
  const int ot_n = pool_out_dim(x.t, pool.kt, pool.st);
  const int oh_n = pool_out_dim(x.h, pool.kh, pool.sh);
  const int ow_n = pool_out_dim(x.w, pool.kw, pool.sw);
  Tensor4<S> y = Tensor4<S>::zeros(x.c, ot_n, oh_n, ow_n);
  argmax->assign(y.size(), 0);
  std::size_t o = 0;
  for (int c = 0; c < x.c; ++c)
    for (int ot = 0; ot < ot_n; ++ot)
      for (int oh = 0; oh < oh_n; ++oh)
        for (int ow = 0; ow < ow_n; ++ow, ++o) {
          S best = std::numeric_limits<S>::lowest();
          std::int64_t best_idx = -1;
          for (int kt = 0; kt < pool.kt; ++kt)
            for (int kh = 0; kh < pool.kh; ++kh)
              for (int kw = 0; kw < pool.kw; ++kw) {
                const std::size_t i =
                    x.idx(c, ot * pool.st + kt, oh * pool.sh + kh, ow * pool.sw + kw);
                if (x.v[i] > best) {  // first max wins ties
                  best = x.v[i];
                  best_idx = static_cast<std::int64_t>(i);
                }
              }
          y.v[o] = best;
          (*argmax)[o] = best_idx;
        }
  return y;
}

// Per-layer double-precision parameter gradient buffers, aligned to layers.
struct ParamGrads {
  std::vector<std::vector<double>> w, b;
};

template <typename S>
ParamGrads make_param_grads(const ModelT<S>& m) {
  ParamGrads pg;
  pg.w.resize(m.layers.size());
  pg.b.resize(m.layers.size());
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (const auto* conv = std::get_if<Conv3d<S>>(&m.layers[i])) {
      pg.w[i].assign(conv->weight.size(), 0.0);
      pg.b[i].assign(conv->bias.size(), 0.0);
    } else if (const auto* lin = std::get_if<Linear<S>>(&m.layers[i])) {
      pg.w[i].assign(lin->weight.size(), 0.0);
      pg.b[i].assign(lin->bias.size(), 0.0);
    }
  }
  return pg;
}

template <typename S>
void check_trace(const ModelT<S>& m, const ForwardTraceT<S>& trace) {
  const auto shapes = shape_chain(m);
  if (trace.acts.size() != shapes.size())
    throw std::invalid_argument("stale trace: layer count mismatch");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& a = trace.acts[i];
    if (Shape4{a.c, a.t, a.h, a.w} != shapes[i])
      throw std::invalid_argument("stale trace: activation shape mismatch");
  }
}

// Walks layers from `from_layer` down to the input. `seed` is the gradient at
// the output of layer `from_layer`, flattened. When capture != nullptr the
// gradient w.r.t. the output of layer `capture_layer` is stored there and the
// walk stops (the input gradient is then not produced).
template <typename S>
Tensor4<S> backward_engine(const ModelT<S>& m, const ForwardTraceT<S>& trace,
                           const std::vector<S>& seed, int from_layer, ReluMode mode,
                           ParamGrads* pg, int capture_layer, Tensor4<S>* capture,
                           bool need_input_grad) {
  const auto& out_act = trace.acts[from_layer + 1];
  if (seed.size() != out_act.size())
    throw std::invalid_argument("backward: gradient size does not match layer output");

  Tensor4<S> grad = out_act;  // shape carrier
  grad.v = seed;

  for (int i = from_layer; i >= 0; --i) {
    if (capture && i == capture_layer) {
      *capture = grad;
      return Tensor4<S>{};
    }
    const auto& x = trace.acts[i];
    const bool want_dx = (i > 0) || need_input_grad;
    if (const auto* conv = std::get_if<Conv3d<S>>(&m.layers[i])) {
      Tensor4<S> dx = Tensor4<S>::zeros(x.c, x.t, x.h, x.w);
      conv_backward(*conv, x, grad, want_dx ? &dx : nullptr, pg ? &pg->w[i] : nullptr,
                    pg ? &pg->b[i] : nullptr);
      grad = std::move(dx);
    } else if (std::holds_alternative<Relu>(m.layers[i])) {
      Tensor4<S> dx = Tensor4<S>::zeros(x.c, x.t, x.h, x.w);
      if (want_dx) {
        if (mode == ReluMode::Standard) {
          for (std::size_t k = 0; k < x.size(); ++k)
            dx.v[k] = x.v[k] > S(0) ? grad.v[k] : S(0);
        } else {
          for (std::size_t k = 0; k < x.size(); ++k)
            dx.v[k] = (x.v[k] > S(0) && grad.v[k] > S(0)) ? grad.v[k] : S(0);
        }
      }
      grad = std::move(dx);
    } else if (std::holds_alternative<MaxPool3d>(m.layers[i])) {
      Tensor4<S> dx = Tensor4<S>::zeros(x.c, x.t, x.h, x.w);
      if (want_dx) {
        const auto& amax = trace.pool_argmax[i];
        for (std::size_t k = 0; k < grad.size(); ++k)
          dx.v[static_cast<std::size_t>(amax[k])] += grad.v[k];
      }
      grad = std::move(dx);
    } else if (std::holds_alternative<Flatten>(m.layers[i])) {
      Tensor4<S> dx = Tensor4<S>::zeros(x.c, x.t, x.h, x.w);
      if (want_dx) dx.v = std::move(grad.v);
      grad = std::move(dx);
    } else if (const auto* lin = std::get_if<Linear<S>>(&m.layers[i])) {
      Tensor4<S> dx = Tensor4<S>::zeros(x.c, 1, 1, 1);
      for (int o = 0; o < lin->out_dim; ++o) {
        const double g = static_cast<double>(grad.v[o]);
        if (pg) {
          pg->b[i][o] += g;
          double* gwrow = pg->w[i].data() + static_cast<std::size_t>(o) * lin->in_dim;
          for (int k = 0; k < lin->in_dim; ++k) gwrow[k] += g * static_cast<double>(x.v[k]);
        }
        if (want_dx && g != 0.0) {
          const S* wrow = lin->weight.data() + static_cast<std::size_t>(o) * lin->in_dim;
          for (int k = 0; k < lin->in_dim; ++k)
            dx.v[k] += static_cast<S>(g * static_cast<double>(wrow[k]));
        }
      }
      grad = std::move(dx);
    }
  }
  return grad;
}

template <typename S>
std::vector<double> softmax_double(const std::vector<S>& logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (S v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

void sgd_apply(Model3D& m, const ParamGrads& pg, double scale) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (auto* conv = std::get_if<Conv3d<float>>(&m.layers[i])) {
      for (std::size_t k = 0; k < conv->weight.size(); ++k)
        conv->weight[k] = static_cast<float>(conv->weight[k] - scale * pg.w[i][k]);
      for (std::size_t k = 0; k < conv->bias.size(); ++k)
        conv->bias[k] = static_cast<float>(conv->bias[k] - scale * pg.b[i][k]);
    } else if (auto* lin = std::get_if<Linear<float>>(&m.layers[i])) {
      for (std::size_t k = 0; k < lin->weight.size(); ++k)
        lin->weight[k] = static_cast<float>(lin->weight[k] - scale * pg.w[i][k]);
      for (std::size_t k = 0; k < lin->bias.size(); ++k)
        lin->bias[k] = static_cast<float>(lin->bias[k] - scale * pg.b[i][k]);
    }
  }
}

// Restores the evaluation mode on every exit path.
class ModeGuard {
 public:
  ModeGuard(const Model3D& m, ReluMode mode) : m_(m), saved_(m.relu_mode) {
    m_.relu_mode = mode;
  }
  ~ModeGuard() { m_.relu_mode = saved_; }
  ModeGuard(const ModeGuard&) = delete;
  ModeGuard& operator=(const ModeGuard&) = delete;

 private:
  const Model3D& m_;
  ReluMode saved_;
};

}  // namespace

template <typename S>
void ModelT<S>::validate() const {
  if (layers.empty()) throw std::invalid_argument("model has no layers");
  if (num_classes < 2) throw std::invalid_argument("model needs at least 2 classes");
  const auto shapes = shape_chain(*this);  // throws on chain incompatibility
  const auto* last = std::get_if<Linear<S>>(&layers.back());
  if (!last || last->out_dim != num_classes)
    throw std::invalid_argument("final layer must be Linear with out_dim == num_classes");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (const auto* conv = std::get_if<Conv3d<S>>(&layers[i])) {
      const std::size_t wn = static_cast<std::size_t>(conv->out_ch) * conv->in_ch * conv->kt *
                             conv->kh * conv->kw;
      if (conv->weight.size() != wn || conv->bias.size() != static_cast<std::size_t>(conv->out_ch))
        throw std::invalid_argument("Conv3d parameter buffers have wrong size");
    } else if (const auto* lin = std::get_if<Linear<S>>(&layers[i])) {
      if (lin->weight.size() != static_cast<std::size_t>(lin->out_dim) * lin->in_dim ||
          lin->bias.size() != static_cast<std::size_t>(lin->out_dim))
        throw std::invalid_argument("Linear parameter buffers have wrong size");
    }
  }
  (void)shapes;
}

template <typename S>
Tensor4<S> video_to_tensor(const VideoTensor& v) {
  Tensor4<S> x = Tensor4<S>::zeros(v.c, v.t, v.h, v.w);
  for (int ti = 0; ti < v.t; ++ti)
    for (int ci = 0; ci < v.c; ++ci)
      for (int y = 0; y < v.h; ++y)
        for (int xx = 0; xx < v.w; ++xx)
          x.at(ci, ti, y, xx) = static_cast<S>(v.at(ti, ci, y, xx));
  return x;
}

template <typename S>
std::pair<std::vector<S>, ForwardTraceT<S>> forward(const ModelT<S>& m, const VideoTensor& v) {
  if (v.c != m.in_c || v.t != m.in_t || v.h != m.in_h || v.w != m.in_w)
    throw std::invalid_argument("forward: input shape does not match model");
  return forward_tensor<S>(m, video_to_tensor<S>(v));
}

template <typename S>
std::pair<std::vector<S>, ForwardTraceT<S>> forward_tensor(const ModelT<S>& m,
                                                           const Tensor4<S>& x) {
  if (x.c != m.in_c || x.t != m.in_t || x.h != m.in_h || x.w != m.in_w)
    throw std::invalid_argument("forward: input shape does not match model");
  ForwardTraceT<S> trace;
  trace.acts.reserve(m.layers.size() + 1);
  trace.pool_argmax.resize(m.layers.size());
  trace.acts.push_back(x);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& x = trace.acts.back();
    if (const auto* conv = std::get_if<Conv3d<S>>(&m.layers[i])) {
      trace.acts.push_back(conv_forward(*conv, x));
    } else if (std::holds_alternative<Relu>(m.layers[i])) {
      Tensor4<S> y = x;
      for (S& val : y.v) val = std::max(val, S(0));
      trace.acts.push_back(std::move(y));
    } else if (const auto* pool = std::get_if<MaxPool3d>(&m.layers[i])) {
      trace.acts.push_back(pool_forward(*pool, x, &trace.pool_argmax[i]));
    } else if (std::holds_alternative<Flatten>(m.layers[i])) {
      Tensor4<S> y = Tensor4<S>::zeros(static_cast<int>(x.size()), 1, 1, 1);
      y.v = x.v;
      trace.acts.push_back(std::move(y));
    } else if (const auto* lin = std::get_if<Linear<S>>(&m.layers[i])) {
      if (x.t != 1 || x.h != 1 || x.w != 1 || x.c != lin->in_dim)
        throw std::invalid_argument("Linear: input shape mismatch");
      Tensor4<S> y = Tensor4<S>::zeros(lin->out_dim, 1, 1, 1);
      for (int o = 0; o < lin->out_dim; ++o) {
        double acc = static_cast<double>(lin->bias[o]);
        const S* wrow = lin->weight.data() + static_cast<std::size_t>(o) * lin->in_dim;
        for (int k = 0; k < lin->in_dim; ++k)
          acc += static_cast<double>(wrow[k]) * static_cast<double>(x.v[k]);
        y.v[o] = static_cast<S>(acc);
      }
      trace.acts.push_back(std::move(y));
    }
  }
  m.calls.bump();
  return {trace.acts.back().v, std::move(trace)};
}

template <typename S>
Tensor4<S> backward_input(const ModelT<S>& m, const ForwardTraceT<S>& trace,
                          const std::vector<S>& output_grad) {
  check_trace(m, trace);
  return backward_engine<S>(m, trace, output_grad, static_cast<int>(m.layers.size()) - 1,
                            m.relu_mode, nullptr, -1, nullptr, true);
}

GuidedGradient guided_backprop_ex(const Model3D& m, const VideoTensor& v_att, int t_star,
                                  int layer, int class_idx) {
  const int n_layers = static_cast<int>(m.layers.size());
  if (t_star < 0 || t_star >= v_att.t)
    throw std::invalid_argument("guided_backprop: t_star out of range");
  if (class_idx < 0 || class_idx >= m.num_classes)
    throw std::invalid_argument("guided_backprop: class index out of range");
  if (layer < -1 || layer >= n_layers)
    throw std::invalid_argument("guided_backprop: layer out of range");
  const int layer_eff = layer < 0 ? n_layers - 1 : layer;

  ModeGuard guard(m, ReluMode::Guided);
  auto [logits, trace] = forward<float>(m, v_att);
  (void)logits;

  std::vector<float> seed;
  if (layer_eff == n_layers - 1) {
    seed.assign(static_cast<std::size_t>(m.num_classes), 0.0f);
    seed[class_idx] = 1.0f;
  } else {
    const std::size_t n = trace.acts[layer_eff + 1].size();
    seed.assign(n, static_cast<float>(1.0 / static_cast<double>(n)));
  }

  Tensor4<float> grad = backward_engine<float>(m, trace, seed, layer_eff, ReluMode::Guided,
                                               nullptr, -1, nullptr, true);

  GuidedGradient out;
  out.map.c = v_att.c;
  out.map.h = v_att.h;
  out.map.w = v_att.w;
  out.map.source_frame = t_star;
  out.map.source_layer = layer_eff;
  out.map.data.resize(static_cast<std::size_t>(v_att.c) * v_att.h * v_att.w);

  double sq = 0.0;
  double maxabs = 0.0;
  std::size_t k = 0;
  for (int ci = 0; ci < v_att.c; ++ci)
    for (int y = 0; y < v_att.h; ++y)
      for (int x = 0; x < v_att.w; ++x, ++k) {
        const float g = grad.at(ci, t_star, y, x);
        if (!std::isfinite(g))
          throw std::runtime_error("guided_backprop: non-finite gradient (numeric blow-up)");
        out.map.data[k] = g;
        sq += static_cast<double>(g) * g;
        maxabs = std::max(maxabs, std::abs(static_cast<double>(g)));
      }
  out.raw_l2 = std::sqrt(sq);

  for (float& g : out.map.data) {
    double v = static_cast<double>(g);
    if (maxabs > 0.0) v /= maxabs;
    v = std::max(v, 0.0);       // rectify
    v = std::min(v, 1.0);       // clip
    g = static_cast<float>(v);
  }
  return out;
}

GradientMap guided_backprop(const Model3D& m, const VideoTensor& v_att, int t_star, int layer,
                            int class_idx) {
  return guided_backprop_ex(m, v_att, t_star, layer, class_idx).map;
}

GradientMap grad_cam(const Model3D& m, const VideoTensor& v, int conv_layer, int class_idx) {
  const int n_layers = static_cast<int>(m.layers.size());
  if (conv_layer < 0 || conv_layer >= n_layers ||
      !std::holds_alternative<Conv3d<float>>(m.layers[conv_layer]))
    throw std::invalid_argument("grad_cam: conv_layer does not index a Conv3d layer");
  if (class_idx < 0 || class_idx >= m.num_classes)
    throw std::invalid_argument("grad_cam: class index out of range");

  auto [logits, trace] = forward<float>(m, v);
  (void)logits;
  std::vector<float> seed(static_cast<std::size_t>(m.num_classes), 0.0f);
  seed[class_idx] = 1.0f;
  Tensor4<float> act_grad;
  backward_engine<float>(m, trace, seed, n_layers - 1, ReluMode::Standard, nullptr, conv_layer,
                         &act_grad, false);

  const Tensor4<float>& act = trace.acts[conv_layer + 1];
  const std::size_t vol = static_cast<std::size_t>(act.t) * act.h * act.w;
  std::vector<double> channel_w(act.c, 0.0);
  for (int ch = 0; ch < act.c; ++ch) {
    double acc = 0.0;
    const std::size_t off = static_cast<std::size_t>(ch) * vol;
    for (std::size_t k = 0; k < vol; ++k) acc += act_grad.v[off + k];
    channel_w[ch] = acc / static_cast<double>(vol);
  }

  // ReLU of the weighted combination, then the temporal mean.
  GrayFrame cam = GrayFrame::zeros(act.h, act.w);
  for (int y = 0; y < act.h; ++y)
    for (int x = 0; x < act.w; ++x) {
      double sum_t = 0.0;
      for (int ti = 0; ti < act.t; ++ti) {
        double combo = 0.0;
        for (int ch = 0; ch < act.c; ++ch)
          combo += channel_w[ch] * static_cast<double>(act.at(ch, ti, y, x));
        sum_t += std::max(combo, 0.0);
      }
      cam.at(y, x) = static_cast<float>(sum_t / act.t);
    }

  GrayFrame up = resize_bilinear(cam, v.h, v.w);
  float mx = 0.0f;
  for (float val : up.data) mx = std::max(mx, val);
  if (mx > 0.0f)
    for (float& val : up.data) val /= mx;

  GradientMap map;
  map.c = v.c;
  map.h = v.h;
  map.w = v.w;
  map.source_frame = -1;
  map.source_layer = conv_layer;
  map.data.resize(static_cast<std::size_t>(v.c) * v.h * v.w);
  for (int ci = 0; ci < v.c; ++ci)
    std::copy(up.data.begin(), up.data.end(),
              map.data.begin() + static_cast<std::size_t>(ci) * v.h * v.w);
  return map;
}

int predict(const Model3D& m, const VideoTensor& v) {
  auto [logits, trace] = forward<float>(m, v);
  (void)trace;
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.size()); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

std::vector<float> logits_of(const Model3D& m, const VideoTensor& v) {
  return forward<float>(m, v).first;
}

double evaluate_accuracy(const Model3D& m, const std::vector<LabeledClip>& data) {
  if (data.empty()) return 0.0;
  int correct = 0;
  for (const auto& clip : data)
    if (predict(m, clip.video) == clip.label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate_loss(const Model3D& m, const std::vector<LabeledClip>& data) {
  if (data.empty()) return 0.0;
  double total = 0.0;
  for (const auto& clip : data) {
    auto [logits, trace] = forward<float>(m, clip.video);
    (void)trace;
    const auto p = softmax_double(logits);
    total += -std::log(std::max(p[clip.label], 1e-300));
  }
  return total / static_cast<double>(data.size());
}

Tensor4<float> input_gradient_ce(const Model3D& m, const VideoTensor& v, int label,
                                 double* loss_out) {
  if (label < 0 || label >= m.num_classes)
    throw std::invalid_argument("input_gradient_ce: label out of range");
  auto [logits, trace] = forward<float>(m, v);
  const auto p = softmax_double(logits);
  if (loss_out) *loss_out = -std::log(std::max(p[label], 1e-300));
  std::vector<float> dlogits(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    dlogits[i] = static_cast<float>(p[i] - (static_cast<int>(i) == label ? 1.0 : 0.0));
  return backward_engine<float>(m, trace, dlogits, static_cast<int>(m.layers.size()) - 1,
                                ReluMode::Standard, nullptr, -1, nullptr, true);
}

TrainLog train(Model3D& m, const std::vector<LabeledClip>& data, const TrainOptions& opts) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  m.validate();
  for (const auto& clip : data)
    if (clip.label < 0 || clip.label >= m.num_classes)
      throw std::invalid_argument("train: label out of range");

  TrainLog log;
  log.loss.push_back(evaluate_loss(m, data));
  log.accuracy.push_back(evaluate_accuracy(m, data));

  Rng rng(opts.seed);
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const int batch = std::max(1, opts.batch_size);

  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      ParamGrads pg = make_param_grads(m);
      double batch_loss = 0.0;
      for (std::size_t bi = start; bi < end; ++bi) {
        const LabeledClip& clip = data[order[bi]];
        auto [logits, trace] = forward<float>(m, clip.video);
        const auto p = softmax_double(logits);
        batch_loss += -std::log(std::max(p[clip.label], 1e-300));
        std::vector<float> dlogits(p.size());
        for (std::size_t i = 0; i < p.size(); ++i)
          dlogits[i] = static_cast<float>(p[i] - (static_cast<int>(i) == clip.label ? 1.0 : 0.0));
        backward_engine<float>(m, trace, dlogits, static_cast<int>(m.layers.size()) - 1,
                               ReluMode::Standard, &pg, -1, nullptr, false);
      }
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train: non-finite loss (learning rate too high?)");
      sgd_apply(m, pg, opts.lr / static_cast<double>(end - start));
    }
    log.loss.push_back(evaluate_loss(m, data));
    log.accuracy.push_back(evaluate_accuracy(m, data));
    log.epochs_run = epoch;
    if (opts.target_accuracy > 0.0 && log.accuracy.back() >= opts.target_accuracy) break;
  }
  return log;
}

Model3D make_micro_c3d(int num_classes, std::uint64_t seed, int in_t, int in_c, int in_h,
                       int in_w) {
  Rng rng(seed);
  auto init_conv = [&rng](Conv3d<float>& conv) {
    const double fan_in = static_cast<double>(conv.in_ch) * conv.kt * conv.kh * conv.kw;
    const double std_dev = std::sqrt(2.0 / fan_in);
    conv.weight.resize(static_cast<std::size_t>(conv.out_ch) * conv.in_ch * conv.kt * conv.kh *
                       conv.kw);
    for (float& w : conv.weight) w = static_cast<float>(rng.normal() * std_dev);
    conv.bias.assign(static_cast<std::size_t>(conv.out_ch), 0.0f);
  };

  Model3D m;
  m.num_classes = num_classes;
  m.in_c = in_c;
  m.in_t = in_t;
  m.in_h = in_h;
  m.in_w = in_w;

  Shape4 cur{in_c, in_t, in_h, in_w};
  auto push = [&m, &cur](Layer<float> layer) {
    cur = layer_out_shape<float>(layer, cur);
    m.layers.emplace_back(std::move(layer));
  };

  Conv3d<float> conv1;
  conv1.out_ch = 8;
  conv1.in_ch = in_c;
  conv1.kt = conv1.kh = conv1.kw = 3;
  conv1.pt = conv1.ph = conv1.pw = 1;
  init_conv(conv1);
  push(std::move(conv1));
  push(Relu{});
  push(MaxPool3d{1, 2, 2, 1, 2, 2});

  Conv3d<float> conv2;
  conv2.out_ch = 16;
  conv2.in_ch = 8;
  conv2.kt = conv2.kh = conv2.kw = 3;
  conv2.pt = conv2.ph = conv2.pw = 1;
  init_conv(conv2);
  push(std::move(conv2));
  push(Relu{});
  push(MaxPool3d{2, 2, 2, 2, 2, 2});
  push(Flatten{});

  const int flat = cur.c;
  Linear<float> head;
  head.in_dim = flat;
  head.out_dim = num_classes;
  head.weight.resize(static_cast<std::size_t>(flat) * num_classes);
  const double std_dev = std::sqrt(2.0 / static_cast<double>(flat));
  for (float& w : head.weight) w = static_cast<float>(rng.normal() * std_dev);
  head.bias.assign(static_cast<std::size_t>(num_classes), 0.0f);
  m.layers.emplace_back(std::move(head));

  m.validate();
  return m;
}

namespace {

constexpr std::uint32_t kKindConv = 0, kKindRelu = 1, kKindPool = 2, kKindFlatten = 3,
                        kKindLinear = 4;

}  // namespace

void save_model(const Model3D& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write("M3DC", 4);
  binio::write_u32le(out, 1);
  binio::write_u32le(out, static_cast<std::uint32_t>(m.num_classes));
  binio::write_u32le(out, static_cast<std::uint32_t>(m.in_c));
  binio::write_u32le(out, static_cast<std::uint32_t>(m.in_t));
  binio::write_u32le(out, static_cast<std::uint32_t>(m.in_h));
  binio::write_u32le(out, static_cast<std::uint32_t>(m.in_w));
  binio::write_u32le(out, static_cast<std::uint32_t>(m.layers.size()));
  for (const auto& layer : m.layers) {
    if (const auto* conv = std::get_if<Conv3d<float>>(&layer)) {
      binio::write_u32le(out, kKindConv);
      for (int v : {conv->out_ch, conv->in_ch, conv->kt, conv->kh, conv->kw, conv->st, conv->sh,
                    conv->sw, conv->pt, conv->ph, conv->pw})
        binio::write_u32le(out, static_cast<std::uint32_t>(v));
    } else if (std::holds_alternative<Relu>(layer)) {
      binio::write_u32le(out, kKindRelu);
    } else if (const auto* pool = std::get_if<MaxPool3d>(&layer)) {
      binio::write_u32le(out, kKindPool);
      for (int v : {pool->kt, pool->kh, pool->kw, pool->st, pool->sh, pool->sw})
        binio::write_u32le(out, static_cast<std::uint32_t>(v));
    } else if (std::holds_alternative<Flatten>(layer)) {
      binio::write_u32le(out, kKindFlatten);
    } else if (const auto* lin = std::get_if<Linear<float>>(&layer)) {
      binio::write_u32le(out, kKindLinear);
      binio::write_u32le(out, static_cast<std::uint32_t>(lin->in_dim));
      binio::write_u32le(out, static_cast<std::uint32_t>(lin->out_dim));
    }
  }
  for (const auto& layer : m.layers) {
    if (const auto* conv = std::get_if<Conv3d<float>>(&layer)) {
      for (float v : conv->weight) binio::write_f32le(out, v);
      for (float v : conv->bias) binio::write_f32le(out, v);
    } else if (const auto* lin = std::get_if<Linear<float>>(&layer)) {
      for (float v : lin->weight) binio::write_f32le(out, v);
      for (float v : lin->bias) binio::write_f32le(out, v);
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failure for " + path.string());
}

Model3D load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "M3DC", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  if (binio::read_u32le(in) != 1) throw std::runtime_error("checkpoint: unsupported version");
  Model3D m;
  m.num_classes = static_cast<int>(binio::read_u32le(in));
  m.in_c = static_cast<int>(binio::read_u32le(in));
  m.in_t = static_cast<int>(binio::read_u32le(in));
  m.in_h = static_cast<int>(binio::read_u32le(in));
  m.in_w = static_cast<int>(binio::read_u32le(in));
  const std::uint32_t n_layers = binio::read_u32le(in);
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const std::uint32_t kind = binio::read_u32le(in);
    if (kind == kKindConv) {
      Conv3d<float> conv;
      conv.out_ch = static_cast<int>(binio::read_u32le(in));
      conv.in_ch = static_cast<int>(binio::read_u32le(in));
      conv.kt = static_cast<int>(binio::read_u32le(in));
      conv.kh = static_cast<int>(binio::read_u32le(in));
      conv.kw = static_cast<int>(binio::read_u32le(in));
      conv.st = static_cast<int>(binio::read_u32le(in));
      conv.sh = static_cast<int>(binio::read_u32le(in));
      conv.sw = static_cast<int>(binio::read_u32le(in));
      conv.pt = static_cast<int>(binio::read_u32le(in));
      conv.ph = static_cast<int>(binio::read_u32le(in));
      conv.pw = static_cast<int>(binio::read_u32le(in));
      conv.weight.resize(static_cast<std::size_t>(conv.out_ch) * conv.in_ch * conv.kt * conv.kh *
                         conv.kw);
      conv.bias.resize(static_cast<std::size_t>(conv.out_ch));
      m.layers.emplace_back(std::move(conv));
    } else if (kind == kKindRelu) {
      m.layers.emplace_back(Relu{});
    } else if (kind == kKindPool) {
      MaxPool3d pool;
      pool.kt = static_cast<int>(binio::read_u32le(in));
      pool.kh = static_cast<int>(binio::read_u32le(in));
      pool.kw = static_cast<int>(binio::read_u32le(in));
      pool.st = static_cast<int>(binio::read_u32le(in));
      pool.sh = static_cast<int>(binio::read_u32le(in));
      pool.sw = static_cast<int>(binio::read_u32le(in));
      m.layers.emplace_back(pool);
    } else if (kind == kKindFlatten) {
      m.layers.emplace_back(Flatten{});
    } else if (kind == kKindLinear) {
      Linear<float> lin;
      lin.in_dim = static_cast<int>(binio::read_u32le(in));
      lin.out_dim = static_cast<int>(binio::read_u32le(in));
      lin.weight.resize(static_cast<std::size_t>(lin.out_dim) * lin.in_dim);
      lin.bias.resize(static_cast<std::size_t>(lin.out_dim));
      m.layers.emplace_back(std::move(lin));
    } else {
      throw std::runtime_error("checkpoint: unknown layer kind");
    }
  }
  for (auto& layer : m.layers) {
    if (auto* conv = std::get_if<Conv3d<float>>(&layer)) {
      for (float& v : conv->weight) v = binio::read_f32le(in);
      for (float& v : conv->bias) v = binio::read_f32le(in);
    } else if (auto* lin = std::get_if<Linear<float>>(&layer)) {
      for (float& v : lin->weight) v = binio::read_f32le(in);
      for (float& v : lin->bias) v = binio::read_f32le(in);
    }
  }
  m.validate();
  return m;
}

template struct ModelT<float>;
template struct ModelT<double>;
template Tensor4<float> video_to_tensor<float>(const VideoTensor&);
template Tensor4<double> video_to_tensor<double>(const VideoTensor&);
template std::pair<std::vector<float>, ForwardTraceT<float>> forward<float>(const ModelT<float>&,
                                                                            const VideoTensor&);
template std::pair<std::vector<double>, ForwardTraceT<double>> forward<double>(
    const ModelT<double>&, const VideoTensor&);
template std::pair<std::vector<float>, ForwardTraceT<float>> forward_tensor<float>(
    const ModelT<float>&, const Tensor4<float>&);
template std::pair<std::vector<double>, ForwardTraceT<double>> forward_tensor<double>(
    const ModelT<double>&, const Tensor4<double>&);
template Tensor4<float> backward_input<float>(const ModelT<float>&, const ForwardTraceT<float>&,
                                              const std::vector<float>&);
template Tensor4<double> backward_input<double>(const ModelT<double>&,
                                                const ForwardTraceT<double>&,
                                                const std::vector<double>&);

}  // namespace gradcast
