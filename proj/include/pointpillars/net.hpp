#pragma once

// Inference engine: pillar feature network, 2D conv / transposed conv,
// backbone blocks, detection head and the parameter set they read from.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pointpillars/container.hpp"
#include "pointpillars/core.hpp"
#include "pointpillars/pillars.hpp"
#include "pointpillars/rng.hpp"

namespace pointpillars {

/// Block(S, L, F): L 3x3 convs with F filters operating at stride S relative
/// to the pseudo-image.
struct BlockSpec {
  int stride = 1;
  int layers = 1;
  int filters = 1;
};

/// Up(S_in, S_out, F): transposed conv from stride S_in to S_out with F filters.
struct UpSpec {
  int stride_in = 1;
  int stride_out = 1;
  int filters = 1;
};

struct Architecture {
  int point_features = kDecoratedDims;  // D
  int pillar_features = 64;             // C
  int num_classes = 1;
  int anchors_per_location = 2;
  std::vector<BlockSpec> blocks;
  std::vector<UpSpec> ups;

  /// Three blocks at S, 2S, 4S with C, 2C, 4C filters, each upsampled to S
  /// with 2C filters; 6C output channels.
  static Architecture standard(int first_stride, int num_classes, int C = 64) {
    Architecture a;
    a.pillar_features = C;
    a.num_classes = num_classes;
    const int S = first_stride;
    a.blocks = {{S, 4, C}, {2 * S, 6, 2 * C}, {4 * S, 6, 4 * C}};
    a.ups = {{S, S, 2 * C}, {2 * S, S, 2 * C}, {4 * S, S, 2 * C}};
    return a;
  }
  static Architecture car(int C = 64) { return standard(2, 1, C); }
  static Architecture pedcyc(int C = 64) { return standard(1, 2, C); }

  [[nodiscard]] int output_stride() const { return ups.empty() ? 1 : ups.front().stride_out; }
  [[nodiscard]] int backbone_channels() const {
    int c = 0;
    for (const auto& u : ups) c += u.filters;
    return c;
  }
};

inline constexpr float kBatchNormEps = 1e-5f;
inline constexpr int kBoxCodeSize = 7;
inline constexpr int kDirBins = 2;

namespace net_detail {
inline std::vector<std::uint32_t> dims(std::initializer_list<int> v) {
  std::vector<std::uint32_t> out;
  for (int d : v) out.push_back(static_cast<std::uint32_t>(d));
  return out;
}
inline void add_bn(std::map<std::string, std::vector<std::uint32_t>>& m, const std::string& prefix, int c) {
  for (const char* p : {"gamma", "beta", "running_mean", "running_var"}) m[prefix + "." + p] = dims({c});
}
inline int checked_ratio(int num, int den, const char* what) {
  if (den <= 0 || num < den || num % den != 0)
    throw ConfigError(std::string(what) + ": stride ratio " + std::to_string(num) + "/" + std::to_string(den) +
                      " is not a positive integer");
  return num / den;
}
}  // namespace net_detail

inline std::string block_prefix(std::size_t b) { return "backbone.block" + std::to_string(b + 1); }
inline std::string up_prefix(std::size_t u) { return "backbone.up" + std::to_string(u + 1); }

/// Every tensor the architecture reads, with its exact shape.
inline std::map<std::string, std::vector<std::uint32_t>> expected_shapes(const Architecture& a) {
  using net_detail::dims;
  std::map<std::string, std::vector<std::uint32_t>> m;
  const int C = a.pillar_features;
  m["pfn.linear.weight"] = dims({C, a.point_features});
  net_detail::add_bn(m, "pfn.bn", C);

  int in_ch = C, in_stride = 1;
  std::map<int, int> channels_at_stride;
  for (std::size_t b = 0; b < a.blocks.size(); ++b) {
    const auto& blk = a.blocks[b];
    net_detail::checked_ratio(blk.stride, in_stride, "block");
    for (int l = 0; l < blk.layers; ++l) {
      const std::string p = block_prefix(b);
      m[p + ".conv" + std::to_string(l) + ".weight"] = dims({blk.filters, l == 0 ? in_ch : blk.filters, 3, 3});
      net_detail::add_bn(m, p + ".bn" + std::to_string(l), blk.filters);
    }
    in_ch = blk.filters, in_stride = blk.stride;
    channels_at_stride[blk.stride] = blk.filters;
  }
  for (std::size_t u = 0; u < a.ups.size(); ++u) {
    const auto& up = a.ups[u];
    const auto it = channels_at_stride.find(up.stride_in);
    if (it == channels_at_stride.end())
      throw ConfigError("up" + std::to_string(u + 1) + ": no block at stride " + std::to_string(up.stride_in));
    const int k = net_detail::checked_ratio(up.stride_in, up.stride_out, "up");
    m[up_prefix(u) + ".weight"] = dims({it->second, up.filters, k, k});
    net_detail::add_bn(m, up_prefix(u) + ".bn", up.filters);
  }
  const int F = a.backbone_channels(), A = a.anchors_per_location;
  m["head.cls.weight"] = dims({A * a.num_classes, F, 1, 1});
  m["head.cls.bias"] = dims({A * a.num_classes});
  m["head.box.weight"] = dims({A * kBoxCodeSize, F, 1, 1});
  m["head.box.bias"] = dims({A * kBoxCodeSize});
  m["head.dir.weight"] = dims({A * kDirBins, F, 1, 1});
  m["head.dir.bias"] = dims({A * kDirBins});
  return m;
}

/// Named weights validated against an architecture.
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(Architecture arch, TensorMap tensors) : arch_(std::move(arch)), tensors_(std::move(tensors)) {
    validate();
  }

  [[nodiscard]] const Architecture& architecture() const { return arch_; }
  [[nodiscard]] const TensorMap& tensors() const { return tensors_; }

  [[nodiscard]] const Tensor& get(const std::string& name) const {
    const auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeError("missing parameter " + name);
    return it->second;
  }

 private:
  void validate() const {
    const auto expected = expected_shapes(arch_);
    for (const auto& [name, t] : tensors_)
      if (!expected.contains(name)) throw ShapeError("unknown parameter " + name);
    for (const auto& [name, shape] : expected) {
      const auto it = tensors_.find(name);
      if (it == tensors_.end()) throw ShapeError("missing parameter " + name);
      if (it->second.shape != shape)
        throw ShapeError("parameter " + name + " has shape " + shape_string(it->second.shape) + ", expected " +
                         shape_string(shape));
      if (it->second.data.size() != Tensor::numel(shape)) throw ShapeError("parameter " + name + " size mismatch");
      if (name.ends_with(".running_var"))
        for (float v : it->second.data)
          if (!(v >= 0.f)) throw ShapeError("parameter " + name + " has a negative variance");
    }
  }

  Architecture arch_;
  TensorMap tensors_;
};

enum class InitMode {
  he_uniform,  // weights ~ U(-b, b), b = sqrt(6 / fan_in)
  zero,        // all weights zero
};

/// Prior for the classification bias: logistic(bias) = 0.01.
inline const float kClsPriorBias = static_cast<float>(-std::log((1.0 - 0.01) / 0.01));

/// BatchNorm layers start at identity, box/dir biases at zero and the
/// classification bias at the 1% foreground prior.
inline ParamSet init_params(Rng& rng, const Architecture& arch, InitMode mode = InitMode::he_uniform) {
  TensorMap t;
  for (const auto& [name, shape] : expected_shapes(arch)) {
    Tensor tensor(shape);
    if (name.ends_with(".gamma") || name.ends_with(".running_var")) {
      std::fill(tensor.data.begin(), tensor.data.end(), 1.f);
    } else if (name == "head.cls.bias") {
      std::fill(tensor.data.begin(), tensor.data.end(), kClsPriorBias);
    } else if (name.ends_with(".weight") && mode == InitMode::he_uniform) {
      const std::size_t fan_in = tensor.size() / shape[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : tensor.data) v = static_cast<float>(rng.uniform(-bound, bound));
    }
    t.emplace(name, std::move(tensor));
  }
  return ParamSet(arch, std::move(t));
}

inline void save_params(const ParamSet& params, const std::filesystem::path& path) {
  write_container(path, params.tensors());
}

inline ParamSet load_params(const std::filesystem::path& path, const Architecture& arch) {
  return ParamSet(arch, read_container(path));
}

// ---------------------------------------------------------------------------
// Layers

/// Inference BatchNorm folded into y = scale * x + shift per channel.
struct BatchNormAffine {
  std::vector<float> scale, shift;

  static BatchNormAffine from(const ParamSet& params, const std::string& prefix) {
    const auto& g = params.get(prefix + ".gamma").data;
    const auto& b = params.get(prefix + ".beta").data;
    const auto& m = params.get(prefix + ".running_mean").data;
    const auto& v = params.get(prefix + ".running_var").data;
    BatchNormAffine bn;
    bn.scale.resize(g.size());
    bn.shift.resize(g.size());
    for (std::size_t c = 0; c < g.size(); ++c) {
      bn.scale[c] = g[c] / std::sqrt(v[c] + kBatchNormEps);
      bn.shift[c] = b[c] - bn.scale[c] * m[c];
    }
    return bn;
  }
};

inline void batchnorm_relu_inplace(Tensor3& x, const BatchNormAffine& bn) {
  if (bn.scale.size() != static_cast<std::size_t>(x.channels)) throw ShapeError("batchnorm: channel mismatch");
  for (int c = 0; c < x.channels; ++c) {
    const float a = bn.scale[c], s = bn.shift[c];
    for (float& v : x.channel(c)) v = std::max(0.f, a * v + s);
  }
}

inline int conv_output_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

/// Cross-correlation with zero padding:
///   out[f,i,j] = bias[f] + sum_{c,u,v} K[f,c,u,v] * in[c, i*s+u-pad, j*s+v-pad]
/// kernel shape (F, C, k, k). With pad = k/2 the output is ceil(H/s) x ceil(W/s).
/// Each output element accumulates in (c, u, v) order, so results do not
/// depend on blocking.
inline Tensor3 conv2d(const Tensor3& in, const Tensor& kernel, int stride, int pad, std::span<const float> bias = {}) {
  if (kernel.shape.size() != 4 || kernel.shape[2] != kernel.shape[3])
    throw ShapeError("conv2d: kernel must be (F, C, k, k), got " + shape_string(kernel.shape));
  const int F = static_cast<int>(kernel.shape[0]), C = static_cast<int>(kernel.shape[1]);
  const int k = static_cast<int>(kernel.shape[2]);
  if (C != in.channels) throw ShapeError("conv2d: kernel expects " + std::to_string(C) + " input channels, got " +
                                         std::to_string(in.channels));
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: bad stride/padding");
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(F)) throw ShapeError("conv2d: bias size mismatch");
  const int Ho = conv_output_size(in.height, k, stride, pad);
  const int Wo = conv_output_size(in.width, k, stride, pad);
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: input smaller than kernel");

  // Zero-padded input with columns split by phase (col % stride) so every
  // inner loop below reads contiguous memory. Unpadded stride-1 convolutions
  // read the input directly.
  const bool direct = pad == 0 && stride == 1;
  const int Hp = in.height + 2 * pad, Wp = in.width + 2 * pad;
  const int Mw = Wo + (k - 1) / stride;
  std::vector<float> buf;
  if (!direct) {
    buf.assign(static_cast<std::size_t>(C) * Hp * stride * Mw, 0.f);
    for (int c = 0; c < C; ++c)
      for (int r = pad; r < pad + in.height; ++r) {
        const float* src = &in.data[c * in.plane() + static_cast<std::size_t>(r - pad) * in.width];
        for (int ph = 0; ph < stride; ++ph) {
          float* dst = buf.data() + ((static_cast<std::size_t>(c) * Hp + r) * stride + ph) * Mw;
          for (int m = 0; m < Mw; ++m) {
            const int q = m * stride + ph - pad;
            if (q >= 0 && q < in.width && m * stride + ph < Wp) dst[m] = src[q];
          }
        }
      }
  }
  auto row_ptr = [&](int c, int r, int ph) -> const float* {
    if (direct) return &in.data[c * in.plane() + static_cast<std::size_t>(r) * in.width];
    return buf.data() + ((static_cast<std::size_t>(c) * Hp + r) * stride + ph) * Mw;
  };

  Tensor3 out(F, Ho, Wo);
  constexpr int kBlock = 4;
  std::vector<float> acc(static_cast<std::size_t>(kBlock) * Wo);
  const float* K = kernel.data.data();
  auto kidx = [&](int f, int c, int u, int v) { return ((static_cast<std::size_t>(f) * C + c) * k + u) * k + v; };

  for (int f0 = 0; f0 < F; f0 += kBlock) {
    const int nb = std::min(kBlock, F - f0);
    for (int i = 0; i < Ho; ++i) {
      for (int b = 0; b < kBlock; ++b)
        std::fill_n(acc.data() + b * Wo, Wo, (b < nb && !bias.empty()) ? bias[f0 + b] : 0.f);
      float* __restrict a0 = acc.data();
      float* __restrict a1 = a0 + Wo;
      float* __restrict a2 = a1 + Wo;
      float* __restrict a3 = a2 + Wo;
      for (int c = 0; c < C; ++c)
        for (int u = 0; u < k; ++u) {
          const int r = i * stride + u;
          for (int v = 0; v < k; ++v) {
            const float* __restrict src = row_ptr(c, r, v % stride) + v / stride;
            float kb[kBlock] = {};
            for (int b = 0; b < nb; ++b) kb[b] = K[kidx(f0 + b, c, u, v)];
            for (int j = 0; j < Wo; ++j) {
              const float x = src[j];
              a0[j] += kb[0] * x;
              a1[j] += kb[1] * x;
              a2[j] += kb[2] * x;
              a3[j] += kb[3] * x;
            }
          }
        }
      for (int b = 0; b < nb; ++b)
        std::copy_n(acc.data() + b * Wo, Wo, &out.data[(f0 + b) * out.plane() + static_cast<std::size_t>(i) * Wo]);
    }
  }
  return out;
}

/// Transposed convolution with kernel size = stride = factor and no padding,
/// i.e. the adjoint of conv2d(., K, factor, 0). kernel shape (C_in, C_out, f, f);
/// the output is exactly (C_out, H*f, W*f).
inline Tensor3 tconv2d(const Tensor3& in, const Tensor& kernel, int factor) {
  if (factor < 1) throw ConfigError("tconv2d: factor must be a positive integer");
  if (kernel.shape.size() != 4 || kernel.shape[2] != static_cast<std::uint32_t>(factor) ||
      kernel.shape[3] != static_cast<std::uint32_t>(factor))
    throw ShapeError("tconv2d: kernel must be (C_in, C_out, f, f) with f = " + std::to_string(factor) + ", got " +
                     shape_string(kernel.shape));
  const int Ci = static_cast<int>(kernel.shape[0]), Co = static_cast<int>(kernel.shape[1]);
  if (Ci != in.channels) throw ShapeError("tconv2d: input channel mismatch");
  const int f = factor, H = in.height, W = in.width;
  Tensor3 out(Co, H * f, W * f);
  for (int co = 0; co < Co; ++co) {
    float* dst = out.channel(co).data();
    for (int ci = 0; ci < Ci; ++ci) {
      const float* src = in.channel(ci).data();
      for (int u = 0; u < f; ++u)
        for (int v = 0; v < f; ++v) {
          const float kv = kernel.data[((static_cast<std::size_t>(ci) * Co + co) * f + u) * f + v];
          for (int i = 0; i < H; ++i) {
            float* __restrict orow = dst + static_cast<std::size_t>(i * f + u) * W * f + v;
            const float* __restrict irow = src + static_cast<std::size_t>(i) * W;
            if (f == 1) {
              for (int j = 0; j < W; ++j) orow[j] += kv * irow[j];
            } else {
              for (int j = 0; j < W; ++j) orow[static_cast<std::size_t>(j) * f] += kv * irow[j];
            }
          }
        }
    }
  }
  return out;
}

/// Top-left crop to (height, width).
inline Tensor3 crop(const Tensor3& in, int height, int width) {
  if (height > in.height || width > in.width) throw ShapeError("crop: target larger than input");
  if (height == in.height && width == in.width) return in;
  Tensor3 out(in.channels, height, width);
  for (int c = 0; c < in.channels; ++c)
    for (int i = 0; i < height; ++i)
      std::copy_n(&in.data[c * in.plane() + static_cast<std::size_t>(i) * in.width], width,
                  &out.data[c * out.plane() + static_cast<std::size_t>(i) * width]);
  return out;
}

// ---------------------------------------------------------------------------
// Network stages

/// Per point: ReLU(BN(W x)); per pillar and channel: max over the pillar's
/// real points. Padded slots never enter the max, and a pillar with no real
/// points yields zeros. Only used slots are evaluated; unused columns are zero.
inline PillarFeatures pfn_forward(const PillarTensor& tensor, const ParamSet& params) {
  const Tensor& W = params.get("pfn.linear.weight");
  const int C = static_cast<int>(W.shape[0]), D = static_cast<int>(W.shape[1]);
  if (D != kDecoratedDims) throw ShapeError("pfn: linear layer must take 9 inputs");
  const auto bn = BatchNormAffine::from(params, "pfn.bn");
  const int P = tensor.max_pillars, N = tensor.max_points;
  PillarFeatures out(C, P);
  std::vector<float> y(N);
  for (int p = 0; p < P; ++p) {
    if (!tensor.indices[p].used()) continue;
    const std::uint8_t* mask = &tensor.mask[static_cast<std::size_t>(p) * N];
    for (int c = 0; c < C; ++c) {
      std::fill(y.begin(), y.end(), 0.f);
      for (int d = 0; d < D; ++d) {
        const float w = W.data[static_cast<std::size_t>(c) * D + d];
        const float* x = &tensor.data[tensor.offset(d, p, 0)];
        for (int n = 0; n < N; ++n) y[n] += w * x[n];
      }
      float best = 0.f;
      for (int n = 0; n < N; ++n) {
        const float v = std::max(0.f, bn.scale[c] * y[n] + bn.shift[c]);
        if (mask[n] && v > best) best = v;
      }
      out.at(c, p) = best;
    }
  }
  return out;
}

/// Top-down blocks followed by upsampling and channel concatenation. Upsampled
/// maps are cropped to ceil(H/S) x ceil(W/S) where S is the common output
/// stride, since odd intermediate sizes round up under strided convolution.
inline Tensor3 backbone_forward(const Tensor3& pseudo_image, const ParamSet& params) {
  const Architecture& a = params.architecture();
  std::map<int, Tensor3> by_stride;
  Tensor3 x = pseudo_image;
  int cur_stride = 1;
  for (std::size_t b = 0; b < a.blocks.size(); ++b) {
    const auto& blk = a.blocks[b];
    const int first = net_detail::checked_ratio(blk.stride, cur_stride, "block");
    for (int l = 0; l < blk.layers; ++l) {
      const std::string p = block_prefix(b);
      x = conv2d(x, params.get(p + ".conv" + std::to_string(l) + ".weight"), l == 0 ? first : 1, 1);
      batchnorm_relu_inplace(x, BatchNormAffine::from(params, p + ".bn" + std::to_string(l)));
    }
    cur_stride = blk.stride;
    by_stride[blk.stride] = x;
  }

  const int S = a.output_stride();
  const int Ht = (pseudo_image.height + S - 1) / S, Wt = (pseudo_image.width + S - 1) / S;
  Tensor3 out(a.backbone_channels(), Ht, Wt);
  int offset = 0;
  for (std::size_t u = 0; u < a.ups.size(); ++u) {
    const auto& up = a.ups[u];
    if (up.stride_out != S) throw ConfigError("all upsampling steps must share one output stride");
    const int factor = net_detail::checked_ratio(up.stride_in, up.stride_out, "up");
    Tensor3 y = tconv2d(by_stride.at(up.stride_in), params.get(up_prefix(u) + ".weight"), factor);
    batchnorm_relu_inplace(y, BatchNormAffine::from(params, up_prefix(u) + ".bn"));
    y = crop(y, Ht, Wt);
    std::copy(y.data.begin(), y.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offset * out.plane()));
    offset += y.channels;
  }
  return out;
}

/// Head output maps. Channel layouts per location: cls[a * num_classes + k],
/// box[a * 7 + r], dir[a * 2 + bin].
struct HeadMaps {
  Tensor3 cls, box, dir;
};

inline HeadMaps head_forward(const Tensor3& features, const ParamSet& params) {
  return {conv2d(features, params.get("head.cls.weight"), 1, 0, params.get("head.cls.bias").data),
          conv2d(features, params.get("head.box.weight"), 1, 0, params.get("head.box.bias").data),
          conv2d(features, params.get("head.dir.weight"), 1, 0, params.get("head.dir.bias").data)};
}

}  // namespace pointpillars
