#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "fedfap/rng.hpp"
#include "fedfap/tensor.hpp"

namespace fedfap::nn {

enum class Mode { train, eval };

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

inline MapM as_mat(Tensor& t) {
  return MapM(t.data.data(), static_cast<Eigen::Index>(t.rows()),
              static_cast<Eigen::Index>(t.cols()));
}
inline CMapM as_mat(const Tensor& t) {
  return CMapM(t.data.data(), static_cast<Eigen::Index>(t.rows()),
               static_cast<Eigen::Index>(t.cols()));
}
inline MapM grad_mat(Tensor& t) {
  return MapM(t.grad.data(), static_cast<Eigen::Index>(t.rows()),
              static_cast<Eigen::Index>(t.cols()));
}

// Reverse-mode tape over rank-2 tensors. A tape lives for one forward pass;
// node creation order is the topological order used by backward().
class Tape {
 public:
  struct Node {
    Tensor value;
    std::vector<double> grad;  // allocated on demand during backward
    bool requires_grad = false;
    Tensor* param = nullptr;  // leaf bound to a persistent parameter
    std::function<void(Tape&, Node&)> pull;  // distributes grad to parents
  };

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

  int input(const Tensor& x, bool requires_grad = false) {
    Node n;
    n.value = x;
    n.requires_grad = requires_grad;
    return push(std::move(n), "input");
  }

  // Parameter leaf; backward accumulates into p.grad.
  int param(Tensor& p) {
    Node n;
    n.value = p;
    n.requires_grad = true;
    n.param = &p;
    n.pull = [](Tape&, Node& self) {
      self.param->alloc_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        self.param->grad[i] += self.grad[i];
    };
    return push(std::move(n), "param");
  }

  // y = x W + 1 b^T   (x: B x in, W: in x out, b: 1 x out)
  int affine(int x, int w, int b) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    if (xv.cols() != wv.rows() || wv.cols() != bv.cols())
      throw std::invalid_argument("affine: shape mismatch");
    Tensor out = Tensor::zeros({xv.rows(), wv.cols()});
    as_mat(out).noalias() = as_mat(xv) * as_mat(wv);
    as_mat(out).rowwise() += as_mat(bv).row(0);
    Node n;
    n.value = std::move(out);
    n.requires_grad = true;
    n.pull = [x, w, b](Tape& t, Node& self) {
      CMapM g(self.grad.data(), static_cast<Eigen::Index>(self.value.rows()),
              static_cast<Eigen::Index>(self.value.cols()));
      if (t.wants_grad(w)) {
        auto& gw = t.grad_of(w);
        MapM(gw.data(), as_mat(t.value(w)).rows(), as_mat(t.value(w)).cols())
            .noalias() += as_mat(t.value(x)).transpose() * g;
      }
      if (t.wants_grad(b)) {
        auto& gb = t.grad_of(b);
        MapM(gb.data(), 1, static_cast<Eigen::Index>(t.value(b).cols()))
            .noalias() += g.colwise().sum();
      }
      if (t.wants_grad(x)) {
        auto& gx = t.grad_of(x);
        MapM(gx.data(), as_mat(t.value(x)).rows(), as_mat(t.value(x)).cols())
            .noalias() += g * as_mat(t.value(w)).transpose();
      }
    };
    return push(std::move(n), "affine");
  }

  // Pointwise channel-mixing convolution (kernel size 1): y = x K^T + b,
  // with K stored out_channels x in_channels.
  int conv1x1(int x, int k, int b) {
    const Tensor& xv = value(x);
    const Tensor& kv = value(k);
    const Tensor& bv = value(b);
    if (xv.cols() != kv.cols() || kv.rows() != bv.cols())
      throw std::invalid_argument("conv1x1: shape mismatch");
    Tensor out = Tensor::zeros({xv.rows(), kv.rows()});
    as_mat(out).noalias() = as_mat(xv) * as_mat(kv).transpose();
    as_mat(out).rowwise() += as_mat(bv).row(0);
    Node n;
    n.value = std::move(out);
    n.requires_grad = true;
    n.pull = [x, k, b](Tape& t, Node& self) {
      CMapM g(self.grad.data(), static_cast<Eigen::Index>(self.value.rows()),
              static_cast<Eigen::Index>(self.value.cols()));
      if (t.wants_grad(k)) {
        auto& gk = t.grad_of(k);
        MapM(gk.data(), as_mat(t.value(k)).rows(), as_mat(t.value(k)).cols())
            .noalias() += g.transpose() * as_mat(t.value(x));
      }
      if (t.wants_grad(b)) {
        auto& gb = t.grad_of(b);
        MapM(gb.data(), 1, static_cast<Eigen::Index>(t.value(b).cols()))
            .noalias() += g.colwise().sum();
      }
      if (t.wants_grad(x)) {
        auto& gx = t.grad_of(x);
        MapM(gx.data(), as_mat(t.value(x)).rows(), as_mat(t.value(x)).cols())
            .noalias() += g * as_mat(t.value(k));
      }
    };
    return push(std::move(n), "conv1x1");
  }

  int relu(int x) {
    Tensor out = value(x);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return unary(x, std::move(out), [x](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      auto& gx = t.grad_of(x);
      const auto& xv = t.value(x).data;
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (xv[i] > 0.0) gx[i] += self.grad[i];
    }, "relu");
  }

  int sigmoid(int x) {
    Tensor out = value(x);
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return unary(x, std::move(out), [x](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      auto& gx = t.grad_of(x);
      const auto& y = self.value.data;
      for (std::size_t i = 0; i < gx.size(); ++i)
        gx[i] += self.grad[i] * y[i] * (1.0 - y[i]);
    }, "sigmoid");
  }

  // Row-wise softmax, log-sum-exp stabilized.
  int softmax(int x) {
    Tensor out = value(x);
    const std::size_t rows = out.rows(), cols = out.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      double* p = out.data.data() + r * cols;
      double m = p[0];
      for (std::size_t c = 1; c < cols; ++c) m = std::max(m, p[c]);
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        p[c] = std::exp(p[c] - m);
        s += p[c];
      }
      for (std::size_t c = 0; c < cols; ++c) p[c] /= s;
    }
    return unary(x, std::move(out), [x](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      auto& gx = t.grad_of(x);
      const std::size_t rows = self.value.rows(), cols = self.value.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data.data() + r * cols;
        const double* g = self.grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        double* out = gx.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) out[c] += (g[c] - dot) * y[c];
      }
    }, "softmax");
  }

  int add(int a, int b) {
    if (!value(a).same_shape(value(b)))
      throw std::invalid_argument("add: shape mismatch");
    Tensor out = value(a);
    const auto& bv = value(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
    Node n;
    n.value = std::move(out);
    n.requires_grad = true;
    n.pull = [a, b](Tape& t, Node& self) {
      for (int src : {a, b}) {
        if (!t.wants_grad(src)) continue;
        auto& g = t.grad_of(src);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
    return push(std::move(n), "add");
  }

  int mul(int a, int b) {
    if (!value(a).same_shape(value(b)))
      throw std::invalid_argument("mul: shape mismatch");
    Tensor out = value(a);
    const auto& bv = value(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
    Node n;
    n.value = std::move(out);
    n.requires_grad = true;
    n.pull = [a, b](Tape& t, Node& self) {
      if (t.wants_grad(a)) {
        auto& g = t.grad_of(a);
        const auto& bv = t.value(b).data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
      }
      if (t.wants_grad(b)) {
        auto& g = t.grad_of(b);
        const auto& av = t.value(a).data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
      }
    };
    return push(std::move(n), "mul");
  }

  int one_minus(int x) {
    Tensor out = value(x);
    for (double& v : out.data) v = 1.0 - v;
    return unary(x, std::move(out), [x](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      auto& gx = t.grad_of(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= self.grad[i];
    }, "one_minus");
  }

  // y = s * x where s is a 1x1 parameter node (learnable scalar scale).
  int scale_by(int x, int s) {
    if (value(s).numel() != 1)
      throw std::invalid_argument("scale_by: scale must be a scalar");
    const double sv = value(s).data[0];
    Tensor out = value(x);
    for (double& v : out.data) v *= sv;
    Node n;
    n.value = std::move(out);
    n.requires_grad = true;
    n.pull = [x, s](Tape& t, Node& self) {
      if (t.wants_grad(s)) {
        double acc = 0.0;
        const auto& xv = t.value(x).data;
        for (std::size_t i = 0; i < xv.size(); ++i) acc += self.grad[i] * xv[i];
        t.grad_of(s)[0] += acc;
      }
      if (t.wants_grad(x)) {
        auto& gx = t.grad_of(x);
        const double sv = t.value(s).data[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * sv;
      }
    };
    return push(std::move(n), "scale_by");
  }

  int concat_cols(int a, int b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.rows() != bv.rows())
      throw std::invalid_argument("concat_cols: row count mismatch");
    const std::size_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
    Tensor out = Tensor::zeros({rows, ca + cb});
    for (std::size_t r = 0; r < rows; ++r) {
      double* dst = out.data.data() + r * (ca + cb);
      std::copy_n(av.data.data() + r * ca, ca, dst);
      std::copy_n(bv.data.data() + r * cb, cb, dst + ca);
    }
    Node n;
    n.value = std::move(out);
    n.requires_grad = true;
    n.pull = [a, b, ca, cb, rows](Tape& t, Node& self) {
      if (t.wants_grad(a)) {
        auto& g = t.grad_of(a);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < ca; ++c)
            g[r * ca + c] += self.grad[r * (ca + cb) + c];
      }
      if (t.wants_grad(b)) {
        auto& g = t.grad_of(b);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cb; ++c)
            g[r * cb + c] += self.grad[r * (ca + cb) + ca + c];
      }
    };
    return push(std::move(n), "concat_cols");
  }

  // Values flow forward, gradients are defined to be zero backward.
  int detach(int x) {
    Node n;
    n.value = value(x);
    n.requires_grad = true;  // downstream may still need grads w.r.t. params
    n.pull = [](Tape&, Node&) {};
    return push(std::move(n), "detach");
  }

  // Batch normalization over columns. Train mode normalizes with batch
  // statistics (biased variance) and updates the running buffers in place;
  // eval mode uses the running buffers.
  int batchnorm(int x, int gamma, int beta, Tensor& running_mean,
                Tensor& running_var, double eps, double momentum, Mode mode) {
    const Tensor& xv = value(x);
    const std::size_t rows = xv.rows(), cols = xv.cols();
    if (value(gamma).numel() != cols || value(beta).numel() != cols ||
        running_mean.numel() != cols || running_var.numel() != cols)
      throw std::invalid_argument("batchnorm: channel count mismatch");

    std::vector<double> mean(cols), inv_std(cols);
    if (mode == Mode::train) {
      for (std::size_t c = 0; c < cols; ++c) mean[c] = 0.0;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) mean[c] += xv.data[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) mean[c] /= static_cast<double>(rows);
      std::vector<double> var(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const double d = xv.data[r * cols + c] - mean[c];
          var[c] += d * d;
        }
      for (std::size_t c = 0; c < cols; ++c) {
        var[c] /= static_cast<double>(rows);
        inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
        running_mean.data[c] =
            (1.0 - momentum) * running_mean.data[c] + momentum * mean[c];
        running_var.data[c] =
            (1.0 - momentum) * running_var.data[c] + momentum * var[c];
      }
    } else {
      for (std::size_t c = 0; c < cols; ++c) {
        mean[c] = running_mean.data[c];
        inv_std[c] = 1.0 / std::sqrt(running_var.data[c] + eps);
      }
    }

    Tensor xhat = Tensor::zeros({rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        xhat.data[r * cols + c] = (xv.data[r * cols + c] - mean[c]) * inv_std[c];

    Tensor out = Tensor::zeros({rows, cols});
    const auto& gv = value(gamma).data;
    const auto& bv = value(beta).data;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out.data[r * cols + c] = gv[c] * xhat.data[r * cols + c] + bv[c];

    Node n;
    n.value = std::move(out);
    n.requires_grad = true;
    auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
    auto inv_std_p = std::make_shared<std::vector<double>>(std::move(inv_std));
    const bool train = mode == Mode::train;
    n.pull = [x, gamma, beta, xhat_p, inv_std_p, rows, cols, train](Tape& t,
                                                                    Node& self) {
      const auto& xh = xhat_p->data;
      std::vector<double> sum_dy(cols, 0.0), sum_dy_xhat(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const double g = self.grad[r * cols + c];
          sum_dy[c] += g;
          sum_dy_xhat[c] += g * xh[r * cols + c];
        }
      if (t.wants_grad(gamma)) {
        auto& gg = t.grad_of(gamma);
        for (std::size_t c = 0; c < cols; ++c) gg[c] += sum_dy_xhat[c];
      }
      if (t.wants_grad(beta)) {
        auto& gb = t.grad_of(beta);
        for (std::size_t c = 0; c < cols; ++c) gb[c] += sum_dy[c];
      }
      if (t.wants_grad(x)) {
        auto& gx = t.grad_of(x);
        const auto& gv = t.value(gamma).data;
        if (train) {
          const double inv_rows = 1.0 / static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
              const double dxhat = self.grad[r * cols + c] * gv[c];
              gx[r * cols + c] +=
                  (*inv_std_p)[c] *
                  (dxhat - inv_rows * (gv[c] * sum_dy[c] +
                                       xh[r * cols + c] * gv[c] * sum_dy_xhat[c]));
            }
        } else {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              gx[r * cols + c] +=
                  self.grad[r * cols + c] * gv[c] * (*inv_std_p)[c];
        }
      }
    };
    return push(std::move(n), "batchnorm");
  }

  // Inverted-scaling dropout: eval mode is the exact identity.
  int dropout(int x, double rate, Mode mode, Rng* rng) {
    if (rate < 0.0 || rate >= 1.0)
      throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (mode == Mode::eval || rate == 0.0) return x;
    if (rng == nullptr)
      throw std::invalid_argument("dropout: train mode requires an RNG");
    const Tensor& xv = value(x);
    auto mask = std::make_shared<std::vector<double>>(xv.numel());
    const double keep_scale = 1.0 / (1.0 - rate);
    for (auto& m : *mask) m = rng->uniform() < rate ? 0.0 : keep_scale;
    Tensor out = xv;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= (*mask)[i];
    return unary(x, std::move(out), [x, mask](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      auto& gx = t.grad_of(x);
      for (std::size_t i = 0; i < gx.size(); ++i)
        gx[i] += self.grad[i] * (*mask)[i];
    }, "dropout");
  }

  // Mean over the batch of the weighted negative log-softmax at the true
  // class. Returns a scalar node; labels must be in [0, C).
  int cross_entropy(int logits, const std::vector<int>& labels,
                    const std::vector<double>& class_weights = {}) {
    const Tensor& lv = value(logits);
    const std::size_t rows = lv.rows(), cols = lv.cols();
    if (labels.size() != rows)
      throw std::invalid_argument("cross_entropy: label count mismatch");
    if (!class_weights.empty() && class_weights.size() != cols)
      throw std::invalid_argument("cross_entropy: class weight count mismatch");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= cols)
        throw std::out_of_range("cross_entropy: label out of range");

    auto probs = std::make_shared<Tensor>(Tensor::zeros({rows, cols}));
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = lv.data.data() + r * cols;
      double m = p[0];
      for (std::size_t c = 1; c < cols; ++c) m = std::max(m, p[c]);
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += std::exp(p[c] - m);
      const double logz = m + std::log(s);
      for (std::size_t c = 0; c < cols; ++c)
        probs->data[r * cols + c] = std::exp(p[c] - logz);
      const double w =
          class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(labels[r])];
      loss += w * (logz - p[labels[r]]);
    }
    loss /= static_cast<double>(rows);

    Node n;
    n.value = Tensor::scalar(loss);
    n.requires_grad = true;
    auto labels_p = std::make_shared<std::vector<int>>(labels);
    auto weights_p = std::make_shared<std::vector<double>>(class_weights);
    n.pull = [logits, probs, labels_p, weights_p, rows, cols](Tape& t,
                                                              Node& self) {
      if (!t.wants_grad(logits)) return;
      auto& gx = t.grad_of(logits);
      const double seed = self.grad[0];
      const double inv_rows = 1.0 / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        const int y = (*labels_p)[r];
        const double w =
            weights_p->empty() ? 1.0 : (*weights_p)[static_cast<std::size_t>(y)];
        const double scale = seed * w * inv_rows;
        for (std::size_t c = 0; c < cols; ++c) {
          double g = probs->data[r * cols + c];
          if (static_cast<std::size_t>(y) == c) g -= 1.0;
          gx[r * cols + c] += scale * g;
        }
      }
    };
    return push(std::move(n), "cross_entropy");
  }

  // loss = sum_i coeffs_i * x_i; test utility for seeding arbitrary
  // upstream gradients through a scalar root.
  int weighted_sum(int x, const std::vector<double>& coeffs) {
    const Tensor& xv = value(x);
    if (coeffs.size() != xv.numel())
      throw std::invalid_argument("weighted_sum: coefficient count mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < coeffs.size(); ++i) s += coeffs[i] * xv.data[i];
    Node n;
    n.value = Tensor::scalar(s);
    n.requires_grad = true;
    auto cp = std::make_shared<std::vector<double>>(coeffs);
    n.pull = [x, cp](Tape& t, Node& self) {
      if (!t.wants_grad(x)) return;
      auto& gx = t.grad_of(x);
      for (std::size_t i = 0; i < gx.size(); ++i)
        gx[i] += self.grad[0] * (*cp)[i];
    };
    return push(std::move(n), "weighted_sum");
  }

  // Reverse sweep from root. seed must match the root's shape; by default a
  // scalar root is seeded with 1.
  void backward(int root, const Tensor* seed = nullptr) {
    if (nodes_.empty()) throw std::runtime_error("backward without forward");
    if (root < 0 || static_cast<std::size_t>(root) >= nodes_.size())
      throw std::invalid_argument("backward: bad root node");
    Node& r = nodes_[static_cast<std::size_t>(root)];
    if (seed != nullptr) {
      if (!seed->same_shape(r.value))
        throw std::invalid_argument("backward: seed shape mismatch");
      r.grad = seed->data;
    } else {
      if (r.value.numel() != 1)
        throw std::invalid_argument("backward: non-scalar root needs a seed");
      r.grad.assign(1, 1.0);
    }
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.pull) continue;
      if (check_finite_ && !all_finite(n.grad))
        throw std::runtime_error("non-finite gradient in backward pass");
      n.pull(*this, n);
    }
  }

  const Tensor& value(int id) const {
    return nodes_[static_cast<std::size_t>(id)].value;
  }

  // Input gradient of a non-param leaf after backward (zeros if untouched).
  std::vector<double> input_grad(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad.empty()) return n.grad;
    return std::vector<double>(n.value.numel(), 0.0);
  }

  bool wants_grad(int id) {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }

  std::vector<double>& grad_of(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  int unary(int /*x*/, Tensor out, std::function<void(Tape&, Node&)> pull,
            const char* what) {
    Node n;
    n.value = std::move(out);
    n.requires_grad = true;
    n.pull = std::move(pull);
    return push(std::move(n), what);
  }

  int push(Node n, const char* what) {
    if (check_finite_ && !n.value.all_finite())
      throw std::runtime_error(std::string("non-finite activation in ") + what);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  bool check_finite_;
};

}  // namespace fedfap::nn
