#include "roundfit/ops.hpp"

#include <cmath>
#include <numeric>

namespace roundfit {

Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

template <typename T>
using ArrayRows = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowsMap = Eigen::Map<ArrayRows<T>>;
template <typename T>
using ConstRowsMap = Eigen::Map<const ArrayRows<T>>;

template <typename T>
ConstRowsMap<T> rows_view(const Buffer<T>& b, Index cols) {
  return ConstRowsMap<T>(b.data(), cols == 0 ? 0 : b.size() / cols, cols);
}

template <typename T, typename F>
Tensor<T> finish(Tape<T>* tape, Shape shape, Buffer<T> value, F&& backward) {
  if (tape == nullptr) return Tensor<T>(std::move(shape), std::move(value));
  return tape->record(std::move(shape), std::move(value), std::forward<F>(backward));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Sums a [outer x inner] gradient down to the broadcast operand's [inner].
template <typename T>
Buffer<T> reduce_leading(const Buffer<T>& g, Index inner) {
  if (g.size() == inner) return g;
  return rows_view(g, inner).colwise().sum().transpose();
}

}  // namespace

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, Elementwise kind) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw DimensionError("cannot broadcast " + shape_str(b.shape()) + " against " + shape_str(a.shape()));
  }
  Tape<T>* tape = common_tape({&a, &b});
  const Index inner = b.numel();
  Buffer<T> out(a.numel());
  if (inner == a.numel()) {
    switch (kind) {
      case Elementwise::kAdd: out = a.array() + b.array(); break;
      case Elementwise::kSub: out = a.array() - b.array(); break;
      case Elementwise::kMul: out = a.array() * b.array(); break;
      case Elementwise::kDiv: out = a.array() / b.array(); break;
    }
  } else {
    const auto av = rows_view(a.array(), inner);
    RowsMap<T> ov(out.data(), av.rows(), inner);
    const auto brow = b.array().transpose();
    switch (kind) {
      case Elementwise::kAdd: ov = av.rowwise() + brow; break;
      case Elementwise::kSub: ov = av.rowwise() - brow; break;
      case Elementwise::kMul: ov = av.rowwise() * brow; break;
      case Elementwise::kDiv: ov = av.rowwise() / brow; break;
    }
  }
  return finish(tape, a.shape(), std::move(out), [a, b, kind, inner](const Buffer<T>& g, GradSink<T>& sink) {
    const auto na = a.node();
    const auto nb = b.node();
    const auto gv = rows_view(g, inner);
    const auto bv = b.array().transpose();
    switch (kind) {
      case Elementwise::kAdd:
        if (na >= 0) sink.accumulate(na, g);
        if (nb >= 0) sink.accumulate(nb, reduce_leading(g, inner));
        break;
      case Elementwise::kSub:
        if (na >= 0) sink.accumulate(na, g);
        if (nb >= 0) sink.accumulate(nb, -reduce_leading(g, inner));
        break;
      case Elementwise::kMul: {
        if (na >= 0) {
          Buffer<T> ga(g.size());
          RowsMap<T>(ga.data(), gv.rows(), inner) = gv.rowwise() * bv;
          sink.accumulate(na, ga);
        }
        if (nb >= 0) sink.accumulate(nb, reduce_leading<T>(g * a.array(), inner));
        break;
      }
      case Elementwise::kDiv: {
        if (na >= 0) {
          Buffer<T> ga(g.size());
          RowsMap<T>(ga.data(), gv.rows(), inner) = gv.rowwise() / bv;
          sink.accumulate(na, ga);
        }
        if (nb >= 0) {
          // d(a/b)/db = -a/b^2
          Buffer<T> t(g.size());
          const auto av = rows_view(a.array(), inner);
          RowsMap<T>(t.data(), gv.rows(), inner) = -((gv * av).rowwise() / (bv * bv));
          sink.accumulate(nb, reduce_leading(t, inner));
        }
        break;
      }
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Buffer<T> out = x.array() * c;
  return finish(x.tape(), x.shape(), std::move(out), [x, c](const Buffer<T>& g, GradSink<T>& sink) {
    sink.accumulate(x.node(), g * c);
  });
}

template <typename T>
Tensor<T> div_scalar(const Tensor<T>& x, T c) {
  Buffer<T> out = x.array() / c;
  return finish(x.tape(), x.shape(), std::move(out), [x, c](const Buffer<T>& g, GradSink<T>& sink) {
    sink.accumulate(x.node(), g / c);
  });
}

template <typename T>
Tensor<T> floor_at(const Tensor<T>& x, T floor) {
  Buffer<T> out = x.array().max(floor);
  return finish(x.tape(), x.shape(), std::move(out), [x, floor](const Buffer<T>& g, GradSink<T>& sink) {
    sink.accumulate(x.node(), (x.array() >= floor).select(g, T(0)));
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tape<T>* tape = common_tape({&a, &b});
  const Index m = a.dim(0), n = b.dim(1);
  Buffer<T> out(m * n);
  Eigen::Map<RowMatrix<T>>(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  return finish(tape, {m, n}, std::move(out), [a, b, m, n](const Buffer<T>& g, GradSink<T>& sink) {
    const Eigen::Map<const RowMatrix<T>> gm(g.data(), m, n);
    if (a.node() >= 0) {
      Buffer<T> ga(a.numel());
      Eigen::Map<RowMatrix<T>>(ga.data(), a.dim(0), a.dim(1)).noalias() = gm * b.matrix().transpose();
      sink.accumulate(a.node(), ga);
    }
    if (b.node() >= 0) {
      Buffer<T> gb(b.numel());
      Eigen::Map<RowMatrix<T>>(gb.data(), b.dim(0), b.dim(1)).noalias() = a.matrix().transpose() * gm;
      sink.accumulate(b.node(), gb);
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() < 1 || w.rank() != 2 || x.dim(-1) != w.dim(1)) {
    throw DimensionError("linear shape mismatch: input " + shape_str(x.shape()) + " with weight " +
                         shape_str(w.shape()));
  }
  Tape<T>* tape = common_tape({&x, &w});
  const Index rows = x.numel() / x.dim(-1);
  const Index out_features = w.dim(0);
  Shape shape = x.shape();
  shape.back() = out_features;
  Buffer<T> out(rows * out_features);
  Eigen::Map<RowMatrix<T>>(out.data(), rows, out_features).noalias() = x.matrix() * w.matrix().transpose();
  return finish(tape, std::move(shape), std::move(out),
                [x, w, rows, out_features](const Buffer<T>& g, GradSink<T>& sink) {
                  const Eigen::Map<const RowMatrix<T>> gm(g.data(), rows, out_features);
                  if (x.node() >= 0) {
                    Buffer<T> gx(x.numel());
                    Eigen::Map<RowMatrix<T>>(gx.data(), rows, w.dim(1)).noalias() = gm * w.matrix();
                    sink.accumulate(x.node(), gx);
                  }
                  if (w.node() >= 0) {
                    Buffer<T> gw(w.numel());
                    Eigen::Map<RowMatrix<T>>(gw.data(), out_features, w.dim(1)).noalias() =
                        gm.transpose() * x.matrix();
                    sink.accumulate(w.node(), gw);
                  }
                });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const bool ok_rank = a.rank() >= 2 && a.rank() == b.rank() &&
                       std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
  const Index m = ok_rank ? a.dim(-2) : 0;
  const Index k = ok_rank ? a.dim(-1) : 0;
  const Index kb = ok_rank ? (transpose_b ? b.dim(-1) : b.dim(-2)) : -1;
  if (!ok_rank || k != kb) {
    throw DimensionError("bmm shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         (transpose_b ? "^T" : ""));
  }
  Tape<T>* tape = common_tape({&a, &b});
  const Index n = transpose_b ? b.dim(-2) : b.dim(-1);
  const Index batches = a.numel() / (m * k);
  Shape shape = a.shape();
  shape.back() = n;
  Buffer<T> out(batches * m * n);
  using CMap = Eigen::Map<const RowMatrix<T>>;
  using MMap = Eigen::Map<RowMatrix<T>>;
  for (Index i = 0; i < batches; ++i) {
    CMap am(a.data() + i * m * k, m, k);
    MMap om(out.data() + i * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * CMap(b.data() + i * n * k, n, k).transpose();
    } else {
      om.noalias() = am * CMap(b.data() + i * k * n, k, n);
    }
  }
  return finish(tape, std::move(shape), std::move(out),
                [a, b, transpose_b, m, k, n, batches](const Buffer<T>& g, GradSink<T>& sink) {
                  Buffer<T> ga, gb;
                  if (a.node() >= 0) ga.resize(a.numel());
                  if (b.node() >= 0) gb.resize(b.numel());
                  for (Index i = 0; i < batches; ++i) {
                    CMap gm(g.data() + i * m * n, m, n);
                    CMap am(a.data() + i * m * k, m, k);
                    if (transpose_b) {
                      CMap bm(b.data() + i * n * k, n, k);
                      if (a.node() >= 0) MMap(ga.data() + i * m * k, m, k).noalias() = gm * bm;
                      if (b.node() >= 0) MMap(gb.data() + i * n * k, n, k).noalias() = gm.transpose() * am;
                    } else {
                      CMap bm(b.data() + i * k * n, k, n);
                      if (a.node() >= 0) MMap(ga.data() + i * m * k, m, k).noalias() = gm * bm.transpose();
                      if (b.node() >= 0) MMap(gb.data() + i * k * n, k, n).noalias() = am.transpose() * gm;
                    }
                  }
                  if (a.node() >= 0) sink.accumulate(a.node(), ga);
                  if (b.node() >= 0) sink.accumulate(b.node(), gb);
                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return finish(x.tape(), std::move(shape), Buffer<T>(x.array()),
                [x](const Buffer<T>& g, GradSink<T>& sink) { sink.accumulate(x.node(), g); });
}

namespace {

template <typename T>
Buffer<T> swap12(const T* src, Index d0, Index d1, Index d2, Index d3) {
  Buffer<T> out(d0 * d1 * d2 * d3);
  for (Index i = 0; i < d0; ++i) {
    for (Index j = 0; j < d1; ++j) {
      for (Index l = 0; l < d2; ++l) {
        const T* from = src + ((i * d1 + j) * d2 + l) * d3;
        T* to = out.data() + ((i * d2 + l) * d1 + j) * d3;
        std::copy(from, from + d3, to);
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> swap_axes12(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("swap_axes12 expects rank 4, got " + shape_str(x.shape()));
  const Index d0 = x.dim(0), d1 = x.dim(1), d2 = x.dim(2), d3 = x.dim(3);
  return finish(x.tape(), {d0, d2, d1, d3}, swap12(x.data(), d0, d1, d2, d3),
                [x, d0, d1, d2, d3](const Buffer<T>& g, GradSink<T>& sink) {
                  sink.accumulate(x.node(), swap12(g.data(), d0, d2, d1, d3));
                });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw DimensionError("softmax over empty last dimension");
  const Index cols = x.dim(-1);
  const auto xv = rows_view(x.array(), cols);
  Buffer<T> out(x.numel());
  RowsMap<T> ov(out.data(), xv.rows(), cols);
  ov = (xv.colwise() - xv.rowwise().maxCoeff()).exp();
  ov.colwise() /= ov.rowwise().sum();
  auto y = std::make_shared<const Buffer<T>>(out);
  return finish(x.tape(), x.shape(), std::move(out), [x, y, cols](const Buffer<T>& g, GradSink<T>& sink) {
    const auto yv = rows_view(*y, cols);
    const auto gv = rows_view(g, cols);
    Buffer<T> gx(g.size());
    RowsMap<T>(gx.data(), yv.rows(), cols) = yv * (gv.colwise() - (gv * yv).rowwise().sum());
    sink.accumulate(x.node(), gx);
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() < 1 || gamma.shape() != Shape{x.dim(-1)} || beta.shape() != Shape{x.dim(-1)}) {
    throw DimensionError("layer_norm affine shapes " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match input " + shape_str(x.shape()));
  }
  Tape<T>* tape = common_tape({&x, &gamma, &beta});
  const Index cols = x.dim(-1);
  const auto xv = rows_view(x.array(), cols);
  const Index rows = xv.rows();
  Eigen::Array<T, Eigen::Dynamic, 1> mean = xv.rowwise().mean();
  ArrayRows<T> centered = xv.colwise() - mean;
  Eigen::Array<T, Eigen::Dynamic, 1> inv_std = ((centered.square().rowwise().sum() / T(cols)) + eps).rsqrt();
  auto xhat = std::make_shared<ArrayRows<T>>(centered.colwise() * inv_std);
  auto inv = std::make_shared<const Buffer<T>>(std::move(inv_std));
  Buffer<T> out(x.numel());
  RowsMap<T>(out.data(), rows, cols) =
      (xhat->rowwise() * gamma.array().transpose()).rowwise() + beta.array().transpose();
  return finish(tape, x.shape(), std::move(out),
                [x, gamma, beta, xhat, inv, cols, rows](const Buffer<T>& g, GradSink<T>& sink) {
                  const auto gv = rows_view(g, cols);
                  if (gamma.node() >= 0) sink.accumulate(gamma.node(), (gv * *xhat).colwise().sum().transpose());
                  if (beta.node() >= 0) sink.accumulate(beta.node(), gv.colwise().sum().transpose());
                  if (x.node() >= 0) {
                    ArrayRows<T> dxhat = gv.rowwise() * gamma.array().transpose();
                    const Buffer<T> s1 = dxhat.rowwise().sum();
                    const Buffer<T> s2 = (dxhat * *xhat).rowwise().sum();
                    Buffer<T> gx(g.size());
                    RowsMap<T> gxv(gx.data(), rows, cols);
                    gxv = ((dxhat * T(cols)).colwise() - s1 - xhat->colwise() * s2).colwise() * (*inv / T(cols));
                    sink.accumulate(x.node(), gx);
                  }
                });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  const auto& v = x.array();
  Buffer<T> th = (kC * (v + kA * v.cube())).tanh();
  Buffer<T> out = T(0.5) * v * (T(1) + th);
  return finish(x.tape(), x.shape(), std::move(out), [x, th, kC, kA](const Buffer<T>& g, GradSink<T>& sink) {
    const auto& v = x.array();
    const Buffer<T> d =
        T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th.square()) * kC * (T(1) + T(3) * kA * v.square());
    sink.accumulate(x.node(), g * d);
  });
}

template <typename T>
Tensor<T> round_ste(const Tensor<T>& x) {
  Buffer<T> out = x.array().unaryExpr([](T v) { return std::nearbyint(v); });
  return finish(x.tape(), x.shape(), std::move(out),
                [x](const Buffer<T>& g, GradSink<T>& sink) { sink.accumulate(x.node(), g); });
}

template <typename T>
Tensor<T> clip_ste(const Tensor<T>& x, T lo, T hi) {
  if (lo > hi) throw ArgumentError("clip_ste bounds reversed: lo > hi");
  Buffer<T> out = x.array().max(lo).min(hi);
  return finish(x.tape(), x.shape(), std::move(out), [x, lo, hi](const Buffer<T>& g, GradSink<T>& sink) {
    sink.accumulate(x.node(), (x.array() >= lo && x.array() <= hi).select(g, T(0)));
  });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse_loss shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tape<T>* tape = common_tape({&a, &b});
  const T n = static_cast<T>(a.numel());
  Buffer<T> out(1);
  out(0) = (a.array() - b.array()).square().sum() / n;
  return finish(tape, {}, std::move(out), [a, b, n](const Buffer<T>& g, GradSink<T>& sink) {
    const Buffer<T> d = (a.array() - b.array()) * (T(2) * g(0) / n);
    if (a.node() >= 0) sink.accumulate(a.node(), d);
    if (b.node() >= 0) sink.accumulate(b.node(), -d);
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Buffer<T> out(1);
  out(0) = x.array().sum();
  return finish(x.tape(), {}, std::move(out), [x](const Buffer<T>& g, GradSink<T>& sink) {
    sink.accumulate(x.node(), Buffer<T>::Constant(x.numel(), g(0)));
  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const Index> ids, Shape shape) {
  if (table.rank() != 2) throw DimensionError("embedding table must be 2-D, got " + shape_str(table.shape()));
  const Index n = table.dim(0), d = table.dim(1);
  if (shape.empty() || shape.back() != d || shape_numel(shape) != static_cast<Index>(ids.size()) * d) {
    throw DimensionError("embedding output " + shape_str(shape) + " does not hold " + std::to_string(ids.size()) +
                         " rows of width " + std::to_string(d));
  }
  std::vector<Index> rows(ids.begin(), ids.end());
  Buffer<T> out(static_cast<Index>(rows.size()) * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n) throw ArgumentError("embedding id " + std::to_string(rows[i]) + " out of range");
    out.segment(static_cast<Index>(i) * d, d) = table.array().segment(rows[i] * d, d);
  }
  return finish(table.tape(), std::move(shape), std::move(out),
                [table, rows = std::move(rows), d](const Buffer<T>& g, GradSink<T>& sink) {
                  Buffer<T> gt = Buffer<T>::Zero(table.numel());
                  for (std::size_t i = 0; i < rows.size(); ++i) {
                    gt.segment(rows[i] * d, d) += g.segment(static_cast<Index>(i) * d, d);
                  }
                  sink.accumulate(table.node(), gt);
                });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const Index> targets) {
  if (logits.rank() < 1) throw DimensionError("cross_entropy on a scalar");
  const Index v = logits.dim(-1);
  const Index rows = logits.numel() / v;
  if (rows != static_cast<Index>(targets.size()) || rows == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  const auto lv = logits.matrix();
  RowMatrix<T> prob(rows, v);
  std::vector<Index> tgt(targets.begin(), targets.end());
  T total = 0;
  for (Index r = 0; r < rows; ++r) {
    const Index t = tgt[static_cast<std::size_t>(r)];
    if (t < 0 || t >= v) throw ArgumentError("cross_entropy target " + std::to_string(t) + " out of range");
    const T m = lv.row(r).maxCoeff();
    const auto e = (lv.row(r).array() - m).exp();
    const T z = e.sum();
    prob.row(r) = (e / z).matrix();
    total += std::log(z) + m - lv(r, t);
  }
  Buffer<T> out(1);
  out(0) = total / static_cast<T>(rows);
  return finish(logits.tape(), {}, std::move(out),
                [logits, prob = std::move(prob), tgt = std::move(tgt)](const Buffer<T>& g, GradSink<T>& sink) {
                  RowMatrix<T> d = prob;
                  for (Index r = 0; r < d.rows(); ++r) d(r, tgt[static_cast<std::size_t>(r)]) -= T(1);
                  const T c = g(0) / static_cast<T>(d.rows());
                  sink.accumulate(logits.node(), Eigen::Map<const Buffer<T>>(d.data(), d.size()) * c);
                });
}

#define ROUNDFIT_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> elementwise(const Tensor<T>&, const Tensor<T>&, Elementwise);             \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> div_scalar(const Tensor<T>&, T);                                           \
  template Tensor<T> floor_at(const Tensor<T>&, T);                                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool);                             \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> swap_axes12(const Tensor<T>&);                                             \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> round_ste(const Tensor<T>&);                                               \
  template Tensor<T> clip_ste(const Tensor<T>&, T, T);                                          \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const Index>, Shape);                \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const Index>);

ROUNDFIT_INSTANTIATE_OPS(float)
ROUNDFIT_INSTANTIATE_OPS(double)

}  // namespace roundfit
