#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fedfap/autograd.hpp"
#include "fedfap/rng.hpp"
#include "fedfap/tensor.hpp"

namespace fedfap::nn {

enum class LayerKind {
  dense,
  conv1d,
  batchnorm,
  dropout,
  relu,
  sigmoid,
  softmax,
  attention_residual,
  gated_fusion,
  detach
};

// Declarative layer description. Only kernel size 1 is supported for conv1d
// (the feature vector enters as channels at sequence length 1, so the
// convolution is a pointwise channel-mixing map).
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel_size = 1;   // conv1d
  std::size_t hidden = 32;       // attention_residual bottleneck
  double rate = 0.0;             // dropout
  double eps = 1e-5;             // batchnorm
  double momentum = 0.1;         // batchnorm running-stat update

  void validate() const {
    if (kind == LayerKind::conv1d && kernel_size != 1)
      throw std::invalid_argument("LayerSpec: conv1d kernel size must be 1");
    if (kind == LayerKind::dropout && (rate < 0.0 || rate >= 1.0))
      throw std::invalid_argument("LayerSpec: dropout rate must be in [0,1)");
  }
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

enum class Init { he_uniform, xavier_uniform, zeros };

inline void init_weight(Tensor& w, std::size_t fan_in, std::size_t fan_out,
                        Init how, Rng& rng) {
  double limit = 0.0;
  switch (how) {
    case Init::he_uniform:
      limit = std::sqrt(6.0 / static_cast<double>(fan_in));
      break;
    case Init::xavier_uniform:
      limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      break;
    case Init::zeros:
      for (double& v : w.data) v = 0.0;
      return;
  }
  for (double& v : w.data) v = rng.uniform(-limit, limit);
}

struct Dense {
  Tensor w;  // in x out
  Tensor b;  // 1 x out

  Dense() = default;
  Dense(std::size_t in, std::size_t out, Init how, Rng& rng)
      : w(Tensor::zeros({in, out})), b(Tensor::zeros({1, out})) {
    init_weight(w, in, out, how, rng);
  }

  int forward(Tape& t, int x) const {
    Tape& tt = t;
    return tt.affine(x, tt.param(const_cast<Tensor&>(w)),
                     tt.param(const_cast<Tensor&>(b)));
  }
  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

struct Conv1x1 {
  Tensor k;  // out_channels x in_channels
  Tensor b;  // 1 x out_channels

  Conv1x1() = default;
  Conv1x1(std::size_t in_ch, std::size_t out_ch, Init how, Rng& rng)
      : k(Tensor::zeros({out_ch, in_ch})), b(Tensor::zeros({1, out_ch})) {
    init_weight(k, in_ch, out_ch, how, rng);
  }

  int forward(Tape& t, int x) const {
    return t.conv1x1(x, t.param(const_cast<Tensor&>(k)),
                     t.param(const_cast<Tensor&>(b)));
  }
  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".k", &k});
    out.push_back({prefix + ".b", &b});
  }
};

struct BatchNorm {
  Tensor gamma, beta;
  Tensor running_mean, running_var;  // buffers, not aggregated
  double eps = 1e-5;
  double momentum = 0.1;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels, double eps_ = 1e-5,
                     double momentum_ = 0.1)
      : gamma(Tensor::full({1, channels}, 1.0)),
        beta(Tensor::zeros({1, channels})),
        running_mean(Tensor::zeros({1, channels})),
        running_var(Tensor::full({1, channels}, 1.0)),
        eps(eps_),
        momentum(momentum_) {}

  int forward(Tape& t, int x, Mode mode) const {
    auto& self = const_cast<BatchNorm&>(*this);
    return t.batchnorm(x, t.param(self.gamma), t.param(self.beta),
                       self.running_mean, self.running_var, eps, momentum, mode);
  }
  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
};

struct Dropout {
  double rate = 0.0;
  int forward(Tape& t, int x, Mode mode, Rng* rng) const {
    return t.dropout(x, rate, mode, rng);
  }
};

struct ReLU {
  int forward(Tape& t, int x) const { return t.relu(x); }
};
struct Sigmoid {
  int forward(Tape& t, int x) const { return t.sigmoid(x); }
};
struct Softmax {
  int forward(Tape& t, int x) const { return t.softmax(x); }
};
struct Detach {
  int forward(Tape& t, int x) const { return t.detach(x); }
};

// h + scale * (sigmoid(W2 relu(W1 h)) ⊙ h), with the learnable scalar scale
// initialized to 0 so the block starts as the identity.
struct AttentionResidual {
  Dense reduce;  // width -> hidden
  Dense expand;  // hidden -> width
  Tensor scale;  // 1x1

  AttentionResidual() = default;
  AttentionResidual(std::size_t width, std::size_t hidden, Rng& rng)
      : reduce(width, hidden, Init::he_uniform, rng),
        expand(hidden, width, Init::xavier_uniform, rng),
        scale(Tensor::zeros({1, 1})) {}

  int forward(Tape& t, int h) const {
    int a = reduce.forward(t, h);
    a = t.relu(a);
    a = expand.forward(t, a);
    a = t.sigmoid(a);
    a = t.mul(a, h);
    a = t.scale_by(a, t.param(const_cast<Tensor&>(scale)));
    return t.add(h, a);
  }
  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    reduce.collect(prefix + ".reduce", out);
    expand.collect(prefix + ".expand", out);
    out.push_back({prefix + ".scale", &scale});
  }
};

// g = sigmoid(W_g [a; b]), fused = g ⊙ P_a a + (1-g) ⊙ P_b b.
// clamp_gate is a test-only override that pins the gate to a constant.
struct GatedFusion {
  Dense gate;    // (da+db) -> dim
  Dense proj_a;  // da -> dim
  Dense proj_b;  // db -> dim
  std::shared_ptr<double> clamp_gate;  // nullptr = learned gate

  GatedFusion() = default;
  GatedFusion(std::size_t da, std::size_t db, std::size_t dim, Rng& rng)
      : gate(da + db, dim, Init::xavier_uniform, rng),
        proj_a(da, dim, Init::xavier_uniform, rng),
        proj_b(db, dim, Init::xavier_uniform, rng) {}

  int forward(Tape& t, int a, int b) const {
    int g;
    if (clamp_gate) {
      g = t.input(Tensor::full({t.value(a).rows(), gate.b.cols()}, *clamp_gate));
    } else {
      g = t.sigmoid(gate.forward(t, t.concat_cols(a, b)));
    }
    int pa = t.mul(g, proj_a.forward(t, a));
    int pb = t.mul(t.one_minus(g), proj_b.forward(t, b));
    return t.add(pa, pb);
  }

  // Gate activations for a given pair of embeddings (diagnostics/tests).
  Tensor gate_values(const Tensor& a, const Tensor& b) const {
    Tape t;
    int ga = t.input(a), gb = t.input(b);
    int g = t.sigmoid(gate.forward(t, t.concat_cols(ga, gb)));
    return t.value(g);
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    gate.collect(prefix + ".gate", out);
    proj_a.collect(prefix + ".proj_a", out);
    proj_b.collect(prefix + ".proj_b", out);
  }
};

using Layer = std::variant<Dense, Conv1x1, BatchNorm, Dropout, ReLU, Sigmoid,
                           Softmax, Detach, AttentionResidual>;

// A straight-line stack of layers; the workhorse behind every encoder.
struct Sequential {
  std::vector<Layer> layers;

  int forward(Tape& t, int x, Mode mode, Rng* rng) const {
    for (const Layer& l : layers) {
      x = std::visit(
          [&](const auto& layer) -> int {
            using T = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<T, BatchNorm>)
              return layer.forward(t, x, mode);
            else if constexpr (std::is_same_v<T, Dropout>)
              return layer.forward(t, x, mode, rng);
            else
              return layer.forward(t, x);
          },
          l);
    }
    return x;
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) {
    std::size_t idx = 0;
    for (Layer& l : layers) {
      std::string name = prefix + "." + std::to_string(idx++);
      std::visit(
          [&](auto& layer) {
            using T = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<T, Dense> || std::is_same_v<T, Conv1x1> ||
                          std::is_same_v<T, BatchNorm> ||
                          std::is_same_v<T, AttentionResidual>)
              layer.collect(name, out);
          },
          l);
    }
  }
};

// Builds one concrete layer from its spec. Layers with weights draw their
// initial values from rng; `next_relu` picks He vs Xavier fan-in scaling.
inline Layer build_layer(const LayerSpec& spec, Rng& rng, bool next_relu = true) {
  spec.validate();
  const Init how = next_relu ? Init::he_uniform : Init::xavier_uniform;
  switch (spec.kind) {
    case LayerKind::dense:
      return Dense(spec.in, spec.out, how, rng);
    case LayerKind::conv1d:
      return Conv1x1(spec.in, spec.out, how, rng);
    case LayerKind::batchnorm:
      return BatchNorm(spec.out != 0 ? spec.out : spec.in, spec.eps,
                       spec.momentum);
    case LayerKind::dropout:
      return Dropout{spec.rate};
    case LayerKind::relu:
      return ReLU{};
    case LayerKind::sigmoid:
      return Sigmoid{};
    case LayerKind::softmax:
      return Softmax{};
    case LayerKind::detach:
      return Detach{};
    case LayerKind::attention_residual:
      return AttentionResidual(spec.in, spec.hidden, rng);
    case LayerKind::gated_fusion:
      throw std::invalid_argument(
          "gated_fusion takes two inputs and cannot live in a Sequential");
  }
  throw std::invalid_argument("unknown layer kind");
}

}  // namespace fedfap::nn
