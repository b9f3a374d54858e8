#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "posegen/common.hpp"
#include "posegen/tensor.hpp"

namespace posegen {

// Named trainable array plus its gradient accumulator and Adam moments.
// Moment shapes always mirror the value shape.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m;
  Tensor<T> v;
  bool grad_touched = false;

  Param() = default;
  Param(std::string n, Tensor<T> val)
      : name(std::move(n)), value(std::move(val)), grad(value.shape), m(value.shape), v(value.shape) {}

  void zero_grad() {
    std::fill(grad.data.begin(), grad.data.end(), T(0));
    grad_touched = false;
  }
};

using VarId = int;

// Reverse-mode tape over Tensor<T>. Nodes are appended in topological order;
// backward(root) walks the ancestors of root in reverse creation order.
// Several backward passes over one tape are allowed: each pass re-zeroes the
// node gradients it touches and accumulates leaf gradients into the bound
// Param::grad buffers.
template <typename T>
class Tape {
 public:
  using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<MatR>;
  using MapC = Eigen::Map<const MatR>;

  struct Node {
    Tensor<T> val;
    std::vector<T> grad;  // allocated lazily, same length as val
    std::array<VarId, 3> parents{-1, -1, -1};
    std::function<void(Tape&, VarId)> back;
    Param<T>* bound = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes;

  const Tensor<T>& val(VarId id) const { return nodes[id].val; }
  Tensor<T>& val(VarId id) { return nodes[id].val; }

  // ---- leaves ---------------------------------------------------------

  VarId leaf(Tensor<T> v) {
    nodes.push_back(Node{std::move(v), {}, {-1, -1, -1}, nullptr, nullptr, false});
    return static_cast<VarId>(nodes.size() - 1);
  }

  // Trainable leaf. With frozen=true the value participates in the forward
  // pass but receives no gradient (used to route per-group objectives).
  VarId leaf_param(Param<T>& p, bool frozen = false) {
    Node n;
    n.val = p.value;
    if (!frozen) {
      n.bound = &p;
      n.requires_grad = true;
    }
    nodes.push_back(std::move(n));
    return static_cast<VarId>(nodes.size() - 1);
  }

  // Copies the current value into a fresh constant leaf.
  VarId detach(VarId x) { return leaf(nodes[x].val); }

  // ---- elementwise ----------------------------------------------------

  VarId add(VarId a, VarId b) {
    check_arg(nodes[a].val.same_shape(nodes[b].val), "add: shape mismatch");
    Tensor<T> y = nodes[a].val;
    const T* pb = nodes[b].val.ptr();
    for (std::int64_t i = 0; i < y.size(); ++i) y.data[i] += pb[i];
    return unary_or_binary(std::move(y), a, b, [](Tape& t, VarId id) {
      const auto& g = t.nodes[id].grad;
      t.add_grad(t.nodes[id].parents[0], g.data());
      t.add_grad(t.nodes[id].parents[1], g.data());
    });
  }

  VarId sub(VarId a, VarId b) {
    check_arg(nodes[a].val.same_shape(nodes[b].val), "sub: shape mismatch");
    Tensor<T> y = nodes[a].val;
    const T* pb = nodes[b].val.ptr();
    for (std::int64_t i = 0; i < y.size(); ++i) y.data[i] -= pb[i];
    return unary_or_binary(std::move(y), a, b, [](Tape& t, VarId id) {
      const auto& g = t.nodes[id].grad;
      t.add_grad(t.nodes[id].parents[0], g.data());
      t.add_grad_scaled(t.nodes[id].parents[1], g.data(), T(-1));
    });
  }

  VarId mul(VarId a, VarId b) {
    check_arg(nodes[a].val.same_shape(nodes[b].val), "mul: shape mismatch");
    Tensor<T> y = nodes[a].val;
    const T* pb = nodes[b].val.ptr();
    for (std::int64_t i = 0; i < y.size(); ++i) y.data[i] *= pb[i];
    return unary_or_binary(std::move(y), a, b, [](Tape& t, VarId id) {
      VarId a2 = t.nodes[id].parents[0], b2 = t.nodes[id].parents[1];
      const auto& g = t.nodes[id].grad;
      if (t.wants_grad(a2)) {
        auto& ga = t.ensure_grad(a2);
        const T* vb = t.nodes[b2].val.ptr();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
      }
      if (t.wants_grad(b2)) {
        auto& gb = t.ensure_grad(b2);
        const T* va = t.nodes[a2].val.ptr();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
      }
    });
  }

  VarId scale(VarId x, T c) {
    Tensor<T> y = nodes[x].val;
    for (auto& v : y.data) v *= c;
    return unary(std::move(y), x, [c](Tape& t, VarId id) {
      t.add_grad_scaled(t.nodes[id].parents[0], t.nodes[id].grad.data(), c);
    });
  }

  VarId add_scalar(VarId x, T c) {
    Tensor<T> y = nodes[x].val;
    for (auto& v : y.data) v += c;
    return unary(std::move(y), x, [](Tape& t, VarId id) {
      t.add_grad(t.nodes[id].parents[0], t.nodes[id].grad.data());
    });
  }

  VarId exp_(VarId x) {
    Tensor<T> y = nodes[x].val;
    for (auto& v : y.data) v = std::exp(v);
    VarId id = unary(std::move(y), x, [](Tape& t, VarId self) {
      VarId p = t.nodes[self].parents[0];
      if (!t.wants_grad(p)) return;
      auto& gp = t.ensure_grad(p);
      const auto& g = t.nodes[self].grad;
      const T* yv = t.nodes[self].val.ptr();
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * yv[i];
    });
    return id;
  }

  VarId abs_(VarId x) {
    Tensor<T> y = nodes[x].val;
    for (auto& v : y.data) v = std::abs(v);
    return unary(std::move(y), x, [](Tape& t, VarId self) {
      VarId p = t.nodes[self].parents[0];
      if (!t.wants_grad(p)) return;
      auto& gp = t.ensure_grad(p);
      const auto& g = t.nodes[self].grad;
      const T* xv = t.nodes[p].val.ptr();
      for (std::size_t i = 0; i < g.size(); ++i) {
        T s = xv[i] > T(0) ? T(1) : (xv[i] < T(0) ? T(-1) : T(0));
        gp[i] += g[i] * s;
      }
    });
  }

  VarId square(VarId x) { return mul(x, x); }

  VarId relu(VarId x) { return leaky_relu(x, T(0)); }

  VarId leaky_relu(VarId x, T slope) {
    Tensor<T> y = nodes[x].val;
    for (auto& v : y.data) v = v > T(0) ? v : slope * v;
    return unary(std::move(y), x, [slope](Tape& t, VarId self) {
      VarId p = t.nodes[self].parents[0];
      if (!t.wants_grad(p)) return;
      auto& gp = t.ensure_grad(p);
      const auto& g = t.nodes[self].grad;
      const T* xv = t.nodes[p].val.ptr();
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * (xv[i] > T(0) ? T(1) : slope);
    });
  }

  VarId tanh_(VarId x) {
    Tensor<T> y = nodes[x].val;
    for (auto& v : y.data) v = std::tanh(v);
    return unary(std::move(y), x, [](Tape& t, VarId self) {
      VarId p = t.nodes[self].parents[0];
      if (!t.wants_grad(p)) return;
      auto& gp = t.ensure_grad(p);
      const auto& g = t.nodes[self].grad;
      const T* yv = t.nodes[self].val.ptr();
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * (T(1) - yv[i] * yv[i]);
    });
  }

  // ---- reductions -----------------------------------------------------

  VarId sum_all(VarId x) {
    T s = 0;
    for (auto v : nodes[x].val.data) s += v;
    return unary(Tensor<T>::scalar(s), x, [](Tape& t, VarId self) {
      VarId p = t.nodes[self].parents[0];
      if (!t.wants_grad(p)) return;
      auto& gp = t.ensure_grad(p);
      T g = t.nodes[self].grad[0];
      for (auto& v : gp) v += g;
    });
  }

  VarId mean_all(VarId x) {
    std::int64_t n = nodes[x].val.size();
    return scale(sum_all(x), T(1) / static_cast<T>(n));
  }

  // ---- shape ops ------------------------------------------------------

  VarId concat_ch(VarId a, VarId b) {
    const auto& A = nodes[a].val;
    const auto& B = nodes[b].val;
    check_arg(A.rank() == 4 && B.rank() == 4 && A.dim(0) == B.dim(0) && A.dim(2) == B.dim(2) &&
                  A.dim(3) == B.dim(3),
              "concat_ch: incompatible shapes");
    std::int64_t N = A.dim(0), Ca = A.dim(1), Cb = B.dim(1), H = A.dim(2), W = A.dim(3);
    Tensor<T> y({N, Ca + Cb, H, W});
    std::int64_t plane = H * W;
    for (std::int64_t n = 0; n < N; ++n) {
      std::copy_n(A.ptr() + n * Ca * plane, Ca * plane, y.ptr() + n * (Ca + Cb) * plane);
      std::copy_n(B.ptr() + n * Cb * plane, Cb * plane, y.ptr() + (n * (Ca + Cb) + Ca) * plane);
    }
    return unary_or_binary(std::move(y), a, b, [Ca, Cb, plane, N](Tape& t, VarId self) {
      VarId pa = t.nodes[self].parents[0], pb = t.nodes[self].parents[1];
      const auto& g = t.nodes[self].grad;
      if (t.wants_grad(pa)) {
        auto& ga = t.ensure_grad(pa);
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t i = 0; i < Ca * plane; ++i) ga[n * Ca * plane + i] += g[n * (Ca + Cb) * plane + i];
      }
      if (t.wants_grad(pb)) {
        auto& gb = t.ensure_grad(pb);
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t i = 0; i < Cb * plane; ++i)
            gb[n * Cb * plane + i] += g[(n * (Ca + Cb) + Ca) * plane + i];
      }
    });
  }

  VarId concat_vec(VarId a, VarId b) {
    const auto& A = nodes[a].val;
    const auto& B = nodes[b].val;
    check_arg(A.rank() == 2 && B.rank() == 2 && A.dim(0) == B.dim(0), "concat_vec: incompatible shapes");
    std::int64_t N = A.dim(0), Da = A.dim(1), Db = B.dim(1);
    Tensor<T> y({N, Da + Db});
    for (std::int64_t n = 0; n < N; ++n) {
      std::copy_n(A.ptr() + n * Da, Da, y.ptr() + n * (Da + Db));
      std::copy_n(B.ptr() + n * Db, Db, y.ptr() + n * (Da + Db) + Da);
    }
    return unary_or_binary(std::move(y), a, b, [Da, Db, N](Tape& t, VarId self) {
      VarId pa = t.nodes[self].parents[0], pb = t.nodes[self].parents[1];
      const auto& g = t.nodes[self].grad;
      if (t.wants_grad(pa)) {
        auto& ga = t.ensure_grad(pa);
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t i = 0; i < Da; ++i) ga[n * Da + i] += g[n * (Da + Db) + i];
      }
      if (t.wants_grad(pb)) {
        auto& gb = t.ensure_grad(pb);
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t i = 0; i < Db; ++i) gb[n * Db + i] += g[n * (Da + Db) + Da + i];
      }
    });
  }

  // Broadcasts {N,D} codes into constant spatial maps {N,D,H,W}.
  VarId tile_to_map(VarId z, std::int64_t H, std::int64_t W) {
    const auto& Z = nodes[z].val;
    check_arg(Z.rank() == 2, "tile_to_map: expected {N,D}");
    std::int64_t N = Z.dim(0), D = Z.dim(1);
    Tensor<T> y({N, D, H, W});
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t d = 0; d < D; ++d)
        std::fill_n(y.ptr() + (n * D + d) * H * W, H * W, Z.at2(n, d));
    return unary(std::move(y), z, [N, D, H, W](Tape& t, VarId self) {
      VarId p = t.nodes[self].parents[0];
      if (!t.wants_grad(p)) return;
      auto& gp = t.ensure_grad(p);
      const auto& g = t.nodes[self].grad;
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t d = 0; d < D; ++d) {
          T s = 0;
          const T* gsrc = g.data() + (n * D + d) * H * W;
          for (std::int64_t i = 0; i < H * W; ++i) s += gsrc[i];
          gp[n * D + d] += s;
        }
    });
  }

  VarId global_avg_pool(VarId x) {
    const auto& X = nodes[x].val;
    check_arg(X.rank() == 4, "global_avg_pool: expected {N,C,H,W}");
    std::int64_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
    Tensor<T> y({N, C});
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      T s = 0;
      const T* src = X.ptr() + nc * HW;
      for (std::int64_t i = 0; i < HW; ++i) s += src[i];
      y.data[nc] = s / static_cast<T>(HW);
    }
    return unary(std::move(y), x, [N, C, HW](Tape& t, VarId self) {
      VarId p = t.nodes[self].parents[0];
      if (!t.wants_grad(p)) return;
      auto& gp = t.ensure_grad(p);
      const auto& g = t.nodes[self].grad;
      T inv = T(1) / static_cast<T>(HW);
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        T gv = g[nc] * inv;
        T* dst = gp.data() + nc * HW;
        for (std::int64_t i = 0; i < HW; ++i) dst[i] += gv;
      }
    });
  }

  VarId upsample2x(VarId x) {
    const auto& X = nodes[x].val;
    check_arg(X.rank() == 4, "upsample2x: expected {N,C,H,W}");
    std::int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    Tensor<T> y({N, C, H * 2, W * 2});
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const T* src = X.ptr() + nc * H * W;
      T* dst = y.ptr() + nc * 4 * H * W;
      for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
          T v = src[i * W + j];
          dst[(2 * i) * 2 * W + 2 * j] = v;
          dst[(2 * i) * 2 * W + 2 * j + 1] = v;
          dst[(2 * i + 1) * 2 * W + 2 * j] = v;
          dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
        }
    }
    return unary(std::move(y), x, [N, C, H, W](Tape& t, VarId self) {
      VarId p = t.nodes[self].parents[0];
      if (!t.wants_grad(p)) return;
      auto& gp = t.ensure_grad(p);
      const auto& g = t.nodes[self].grad;
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        T* dst = gp.data() + nc * H * W;
        const T* src = g.data() + nc * 4 * H * W;
        for (std::int64_t i = 0; i < H; ++i)
          for (std::int64_t j = 0; j < W; ++j)
            dst[i * W + j] += src[(2 * i) * 2 * W + 2 * j] + src[(2 * i) * 2 * W + 2 * j + 1] +
                              src[(2 * i + 1) * 2 * W + 2 * j] + src[(2 * i + 1) * 2 * W + 2 * j + 1];
      }
    });
  }

  // ---- linear ---------------------------------------------------------

  // y{N,Do} = x{N,Di} * w{Do,Di}^T + b{Do}
  VarId linear(VarId x, VarId w, VarId b) {
    const auto& X = nodes[x].val;
    const auto& W = nodes[w].val;
    const auto& B = nodes[b].val;
    check_arg(X.rank() == 2 && W.rank() == 2 && X.dim(1) == W.dim(1), "linear: shape mismatch");
    check_arg(B.rank() == 1 && B.dim(0) == W.dim(0), "linear: bias mismatch");
    std::int64_t N = X.dim(0), Di = X.dim(1), Do = W.dim(0);
    Tensor<T> y({N, Do});
    {
      MapC xm(X.ptr(), N, Di), wm(W.ptr(), Do, Di);
      MapM ym(y.ptr(), N, Do);
      ym.noalias() = xm * wm.transpose();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t d = 0; d < Do; ++d) y.at2(n, d) += B.data[d];
    }
    VarId id = make_node(std::move(y), {x, w, b});
    nodes[id].back = [N, Di, Do](Tape& t, VarId self) {
      VarId xi = t.nodes[self].parents[0], wi = t.nodes[self].parents[1], bi = t.nodes[self].parents[2];
      const auto& g = t.nodes[self].grad;
      MapC gm(g.data(), N, Do);
      if (t.wants_grad(xi)) {
        auto& gx = t.ensure_grad(xi);
        MapM gxm(gx.data(), N, Di);
        MapC wm(t.nodes[wi].val.ptr(), Do, Di);
        gxm.noalias() += gm * wm;
      }
      if (t.wants_grad(wi)) {
        auto& gw = t.ensure_grad(wi);
        MapM gwm(gw.data(), Do, Di);
        MapC xm(t.nodes[xi].val.ptr(), N, Di);
        gwm.noalias() += gm.transpose() * xm;
      }
      if (t.wants_grad(bi)) {
        auto& gb = t.ensure_grad(bi);
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t d = 0; d < Do; ++d) gb[d] += g[n * Do + d];
      }
    };
    return id;
  }

  // ---- convolution ----------------------------------------------------

  // y{N,Co,Ho,Wo} = conv(x{N,Ci,H,W}, w{Co,Ci,kh,kw}, b{Co}); zero padding.
  VarId conv2d(VarId x, VarId w, VarId b, int stride, int pad) {
    const auto& X = nodes[x].val;
    const auto& W = nodes[w].val;
    const auto& B = nodes[b].val;
    check_arg(X.rank() == 4 && W.rank() == 4, "conv2d: expected 4-d input and weight");
    check_arg(X.dim(1) == W.dim(1), "conv2d: channel mismatch");
    check_arg(B.rank() == 1 && B.dim(0) == W.dim(0), "conv2d: bias mismatch");
    const std::int64_t N = X.dim(0), Ci = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    const std::int64_t Co = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::int64_t Wo = (Wd + 2 * pad - kw) / stride + 1;
    check_arg(Ho > 0 && Wo > 0, "conv2d: output would be empty");
    const std::int64_t K = Ci * kh * kw, P = Ho * Wo;

    auto col = std::make_shared<Tensor<T>>(std::vector<std::int64_t>{N, K, P});
#pragma omp parallel for schedule(static)
    for (std::int64_t n = 0; n < N; ++n)
      im2col(X.ptr() + n * Ci * H * Wd, Ci, H, Wd, kh, kw, stride, pad, Ho, Wo,
             col->ptr() + n * K * P);

    Tensor<T> y({N, Co, Ho, Wo});
#pragma omp parallel for schedule(static)
    for (std::int64_t n = 0; n < N; ++n) {
      MapC wm(W.ptr(), Co, K), cm(col->ptr() + n * K * P, K, P);
      MapM ym(y.ptr() + n * Co * P, Co, P);
      ym.noalias() = wm * cm;
      for (std::int64_t co = 0; co < Co; ++co) {
        T* row = y.ptr() + (n * Co + co) * P;
        for (std::int64_t i = 0; i < P; ++i) row[i] += B.data[co];
      }
    }

    VarId id = make_node(std::move(y), {x, w, b});
    nodes[id].back = [col, N, Ci, H, Wd, Co, kh, kw, stride, pad, Ho, Wo, K, P](Tape& t, VarId self) {
      VarId xi = t.nodes[self].parents[0], wi = t.nodes[self].parents[1], bi = t.nodes[self].parents[2];
      const auto& g = t.nodes[self].grad;
      if (t.wants_grad(bi)) {
        auto& gb = t.ensure_grad(bi);
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t co = 0; co < Co; ++co) {
            T s = 0;
            const T* row = g.data() + (n * Co + co) * P;
            for (std::int64_t i = 0; i < P; ++i) s += row[i];
            gb[co] += s;
          }
      }
      if (t.wants_grad(wi)) {
        auto& gw = t.ensure_grad(wi);
        // Per-sample partials, summed in index order for determinism.
        std::vector<Tensor<T>> partial(static_cast<std::size_t>(N), Tensor<T>({Co, K}));
#pragma omp parallel for schedule(static)
        for (std::int64_t n = 0; n < N; ++n) {
          MapC gm(g.data() + n * Co * P, Co, P), cm(col->ptr() + n * K * P, K, P);
          MapM pm(partial[n].ptr(), Co, K);
          pm.noalias() = gm * cm.transpose();
        }
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t i = 0; i < Co * K; ++i) gw[i] += partial[n].data[i];
      }
      if (t.wants_grad(xi)) {
        auto& gx = t.ensure_grad(xi);
#pragma omp parallel for schedule(static)
        for (std::int64_t n = 0; n < N; ++n) {
          Tensor<T> dcol({K, P});
          MapC wm(t.nodes[wi].val.ptr(), Co, K), gm(g.data() + n * Co * P, Co, P);
          MapM dm(dcol.ptr(), K, P);
          dm.noalias() = wm.transpose() * gm;
          col2im(dcol.ptr(), Ci, H, Wd, kh, kw, stride, pad, Ho, Wo, gx.data() + n * Ci * H * Wd);
        }
      }
    };
    return id;
  }

  // ---- instance normalization -----------------------------------------

  // Normalizes each (n, c) plane to zero mean / unit variance, then applies
  // the learned per-channel affine. Biased variance, matching the backward.
  VarId instance_norm(VarId x, VarId gamma, VarId beta, T eps = static_cast<T>(1e-5)) {
    const auto& X = nodes[x].val;
    const auto& G = nodes[gamma].val;
    const auto& Bt = nodes[beta].val;
    check_arg(X.rank() == 4, "instance_norm: expected {N,C,H,W}");
    std::int64_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
    check_arg(G.size() == C && Bt.size() == C, "instance_norm: affine size mismatch");
    auto stats = std::make_shared<Tensor<T>>(std::vector<std::int64_t>{N * C, 2});  // mean, istd
    Tensor<T> y(X.shape);
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const T* src = X.ptr() + nc * HW;
      T mean = 0;
      for (std::int64_t i = 0; i < HW; ++i) mean += src[i];
      mean /= static_cast<T>(HW);
      T var = 0;
      for (std::int64_t i = 0; i < HW; ++i) {
        T d = src[i] - mean;
        var += d * d;
      }
      var /= static_cast<T>(HW);
      T istd = T(1) / std::sqrt(var + eps);
      stats->data[nc * 2] = mean;
      stats->data[nc * 2 + 1] = istd;
      std::int64_t c = nc % C;
      T* dst = y.ptr() + nc * HW;
      for (std::int64_t i = 0; i < HW; ++i) dst[i] = G.data[c] * (src[i] - mean) * istd + Bt.data[c];
    }
    VarId id = make_node(std::move(y), {x, gamma, beta});
    nodes[id].back = [stats, N, C, HW](Tape& t, VarId self) {
      VarId xi = t.nodes[self].parents[0], gi = t.nodes[self].parents[1], bi = t.nodes[self].parents[2];
      const auto& g = t.nodes[self].grad;
      const auto& X2 = t.nodes[xi].val;
      const auto& G2 = t.nodes[gi].val;
      bool wx = t.wants_grad(xi), wg = t.wants_grad(gi), wb = t.wants_grad(bi);
      if (wx) t.ensure_grad(xi);
      if (wg) t.ensure_grad(gi);
      if (wb) t.ensure_grad(bi);
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        std::int64_t c = nc % C;
        T mean = stats->data[nc * 2], istd = stats->data[nc * 2 + 1];
        const T* xv = X2.ptr() + nc * HW;
        const T* gy = g.data() + nc * HW;
        T sum_gy = 0, sum_gy_xhat = 0;
        for (std::int64_t i = 0; i < HW; ++i) {
          T xhat = (xv[i] - mean) * istd;
          sum_gy += gy[i];
          sum_gy_xhat += gy[i] * xhat;
        }
        if (wb) t.nodes[bi].grad[c] += sum_gy;
        if (wg) t.nodes[gi].grad[c] += sum_gy_xhat;
        if (wx) {
          T* gx = t.nodes[xi].grad.data() + nc * HW;
          T gam = G2.data[c];
          T inv_hw = T(1) / static_cast<T>(HW);
          for (std::int64_t i = 0; i < HW; ++i) {
            T xhat = (xv[i] - mean) * istd;
            gx[i] += gam * istd * (gy[i] - sum_gy * inv_hw - xhat * sum_gy_xhat * inv_hw);
          }
        }
      }
    };
    return id;
  }

  // ---- backward -------------------------------------------------------

  // Runs reverse accumulation from a scalar root. Only ancestors of root are
  // touched; their node gradients are re-zeroed at the start of each call so
  // multiple passes over one tape stay independent. Leaf gradients accumulate
  // into the bound Param::grad buffers.
  void backward(VarId root) {
    check_arg(nodes[root].val.size() == 1, "backward: root must be scalar");
    if (!nodes[root].requires_grad) return;
    std::vector<std::uint8_t> mark(nodes.size(), 0);
    std::vector<VarId> stack{root};
    mark[root] = 1;
    while (!stack.empty()) {
      VarId id = stack.back();
      stack.pop_back();
      for (VarId p : nodes[id].parents) {
        if (p >= 0 && !mark[p] && nodes[p].requires_grad) {
          mark[p] = 1;
          stack.push_back(p);
        }
      }
    }
    for (VarId id = 0; id < static_cast<VarId>(nodes.size()); ++id) {
      if (mark[id]) {
        auto& gr = nodes[id].grad;
        gr.assign(static_cast<std::size_t>(nodes[id].val.size()), T(0));
      }
    }
    nodes[root].grad[0] = T(1);
    for (VarId id = static_cast<VarId>(nodes.size()) - 1; id >= 0; --id) {
      if (mark[id] && nodes[id].back) nodes[id].back(*this, id);
    }
    for (VarId id = 0; id < static_cast<VarId>(nodes.size()); ++id) {
      if (mark[id] && nodes[id].bound) {
        auto& p = *nodes[id].bound;
        for (std::int64_t i = 0; i < p.grad.size(); ++i) p.grad.data[i] += nodes[id].grad[i];
        p.grad_touched = true;
      }
    }
  }

  bool wants_grad(VarId id) const { return nodes[id].requires_grad; }

  std::vector<T>& ensure_grad(VarId id) {
    auto& n = nodes[id];
    if (n.grad.size() != static_cast<std::size_t>(n.val.size()))
      n.grad.assign(static_cast<std::size_t>(n.val.size()), T(0));
    return n.grad;
  }

 private:
  VarId make_node(Tensor<T> y, std::array<VarId, 3> parents) {
    Node n;
    n.val = std::move(y);
    n.parents = parents;
    for (VarId p : parents)
      if (p >= 0 && nodes[p].requires_grad) n.requires_grad = true;
    nodes.push_back(std::move(n));
    return static_cast<VarId>(nodes.size() - 1);
  }

  VarId unary(Tensor<T> y, VarId x, std::function<void(Tape&, VarId)> back) {
    VarId id = make_node(std::move(y), {x, -1, -1});
    nodes[id].back = std::move(back);
    return id;
  }

  VarId unary_or_binary(Tensor<T> y, VarId a, VarId b, std::function<void(Tape&, VarId)> back) {
    VarId id = make_node(std::move(y), {a, b, -1});
    nodes[id].back = std::move(back);
    return id;
  }

  void add_grad(VarId id, const T* g) {
    if (id < 0 || !nodes[id].requires_grad) return;
    auto& dst = ensure_grad(id);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  void add_grad_scaled(VarId id, const T* g, T c) {
    if (id < 0 || !nodes[id].requires_grad) return;
    auto& dst = ensure_grad(id);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += c * g[i];
  }

  static void im2col(const T* x, std::int64_t Ci, std::int64_t H, std::int64_t W, std::int64_t kh,
                     std::int64_t kw, int stride, int pad, std::int64_t Ho, std::int64_t Wo, T* col) {
    for (std::int64_t ci = 0; ci < Ci; ++ci)
      for (std::int64_t ki = 0; ki < kh; ++ki)
        for (std::int64_t kj = 0; kj < kw; ++kj) {
          T* dst = col + ((ci * kh + ki) * kw + kj) * Ho * Wo;
          for (std::int64_t oi = 0; oi < Ho; ++oi) {
            std::int64_t ih = oi * stride - pad + ki;
            if (ih < 0 || ih >= H) {
              std::fill_n(dst + oi * Wo, Wo, T(0));
              continue;
            }
            const T* src = x + (ci * H + ih) * W;
            for (std::int64_t oj = 0; oj < Wo; ++oj) {
              std::int64_t iw = oj * stride - pad + kj;
              dst[oi * Wo + oj] = (iw >= 0 && iw < W) ? src[iw] : T(0);
            }
          }
        }
  }

  static void col2im(const T* col, std::int64_t Ci, std::int64_t H, std::int64_t W, std::int64_t kh,
                     std::int64_t kw, int stride, int pad, std::int64_t Ho, std::int64_t Wo, T* dx) {
    for (std::int64_t ci = 0; ci < Ci; ++ci)
      for (std::int64_t ki = 0; ki < kh; ++ki)
        for (std::int64_t kj = 0; kj < kw; ++kj) {
          const T* src = col + ((ci * kh + ki) * kw + kj) * Ho * Wo;
          for (std::int64_t oi = 0; oi < Ho; ++oi) {
            std::int64_t ih = oi * stride - pad + ki;
            if (ih < 0 || ih >= H) continue;
            T* dst = dx + (ci * H + ih) * W;
            for (std::int64_t oj = 0; oj < Wo; ++oj) {
              std::int64_t iw = oj * stride - pad + kj;
              if (iw >= 0 && iw < W) dst[iw] += src[oi * Wo + oj];
            }
          }
        }
  }
};

}  // namespace posegen
