#pragma once

// Differentiable primitives recorded on a Tape. Every primitive validates
// shapes up front, adds its forward cost to the tape's OpCounter, and
// registers a backward rule that accumulates into its inputs.
//
// Matrix kernels run through Eigen maps over the row-major buffers.

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "rmpg/errors.hpp"
#include "rmpg/tape.hpp"
#include "rmpg/tensor.hpp"

namespace rmpg::ops {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <class T>
ConstMatMap<T> view(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <class T>
MatMap<T> view(Tensor<T>& t) {
  return MatMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <class T>
MatMap<T> view(std::span<T> buf, std::size_t rows, std::size_t cols) {
  return MatMap<T>(buf.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <class T>
void require_matrix(const Tensor<T>& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected rank-2 operand, got " + to_string(t.shape()));
}

}  // namespace detail

/// a[m x k] * b[k x n]. Counts m*n*k mul-adds.
template <class T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  detail::require(A.cols() == B.rows(),
                  "matmul: inner extents differ " + to_string(A.shape()) + " x " + to_string(B.shape()));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor<T> out({m, n});
  detail::view(out).noalias() = detail::view(A) * detail::view(B);
  tape.counter().mul_adds += static_cast<std::uint64_t>(m) * n * k;
  return tape.record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& tp, Var, const Tensor<T>& g) {
    const auto G = detail::view(g);
    if (auto ga = tp.grad_buffer(a); !ga.empty()) {
      detail::view(ga, m, k).noalias() += G * detail::view(tp.value(b)).transpose();
    }
    if (auto gb = tp.grad_buffer(b); !gb.empty()) {
      detail::view(gb, k, n).noalias() += detail::view(tp.value(a)).transpose() * G;
    }
  });
}

template <class T>
Var transpose(Tape<T>& tape, Var a) {
  const auto& A = tape.value(a);
  detail::require_matrix(A, "transpose");
  const std::size_t r = A.rows(), c = A.cols();
  Tensor<T> out({c, r});
  detail::view(out) = detail::view(A).transpose();
  tape.counter().bytes_moved += A.size() * sizeof(T);
  return tape.record(std::move(out), {a}, [a, r, c](Tape<T>& tp, Var, const Tensor<T>& g) {
    if (auto ga = tp.grad_buffer(a); !ga.empty()) detail::view(ga, r, c) += detail::view(g).transpose();
  });
}

/// Row-wise softmax with max subtraction. Counts one exp per element.
template <class T>
Var softmax_rows(Tape<T>& tape, Var m) {
  const auto& M = tape.value(m);
  detail::require_matrix(M, "softmax_rows");
  const std::size_t r = M.rows(), c = M.cols();
  Tensor<T> out = M;
  auto Y = detail::view(out);
  for (Eigen::Index i = 0; i < Y.rows(); ++i) {
    auto row = Y.row(i).array();
    row = (row - row.maxCoeff()).exp();
    row /= row.sum();
  }
  tape.counter().exp_evals += static_cast<std::uint64_t>(r) * c;
  return tape.record(std::move(out), {m}, [m, r, c](Tape<T>& tp, Var self, const Tensor<T>& g) {
    auto gm = tp.grad_buffer(m);
    if (gm.empty()) return;
    const auto Yv = detail::view(tp.value(self)).array();
    const auto G = detail::view(g).array();
    // dx = y * (dy - <dy, y>) per row
    Eigen::Array<T, Eigen::Dynamic, 1> dots = (G * Yv).rowwise().sum();
    detail::view(gm, r, c).array() += Yv * (G.colwise() - dots);
  });
}

/// Fused self-attention softmax(factor * X X^T) X over the rows of X
/// (n x c). Rows are processed in blocks so the n x n weights are never
/// materialised; backward recomputes them from the stored per-row
/// log-normaliser. Counts 2*n*n*c mul-adds and n*n exps, the same as the
/// unfused chain matmul, scale, softmax_rows, matmul.
template <class T>
Var self_attention(Tape<T>& tape, Var x, T factor) {
  static constexpr Eigen::Index block = 64;
  using Rows = detail::RowMatrix<T>;
  using Column = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  const auto& X = tape.value(x);
  detail::require_matrix(X, "self_attention");
  const std::size_t n = X.rows(), c = X.cols();
  const auto Xv = detail::view(X);
  const auto N = static_cast<Eigen::Index>(n);
  auto lse = std::make_shared<Column>(N);
  Tensor<T> out({n, c});
  auto Y = detail::view(out);
  Rows P(std::min(block, N), N);
  for (Eigen::Index r0 = 0; r0 < N; r0 += block) {
    const Eigen::Index b = std::min(block, N - r0);
    auto Pb = P.topRows(b);
    Pb.noalias() = Xv.middleRows(r0, b) * Xv.transpose();
    for (Eigen::Index i = 0; i < b; ++i) {
      auto row = Pb.row(i).array();
      const T m = row.maxCoeff();
      row = ((row - m) * factor).exp();
      const T total = row.sum();
      row /= total;
      (*lse)(r0 + i) = m * factor + std::log(total);
    }
    Y.middleRows(r0, b).noalias() = Pb * Xv;
  }
  tape.counter().mul_adds += 2 * static_cast<std::uint64_t>(n) * n * c;
  tape.counter().exp_evals += static_cast<std::uint64_t>(n) * n;
  return tape.record(std::move(out), {x}, [x, lse, factor, N, c](Tape<T>& tp, Var self, const Tensor<T>& g) {
    auto gx = tp.grad_buffer(x);
    if (gx.empty()) return;
    const auto Xv = detail::view(tp.value(x));
    const auto Yv = detail::view(tp.value(self));
    const auto G = detail::view(g);
    auto GX = detail::view(gx, static_cast<std::size_t>(N), c);
    Rows P(std::min(block, N), N), dS(std::min(block, N), N);
    for (Eigen::Index r0 = 0; r0 < N; r0 += block) {
      const Eigen::Index b = std::min(block, N - r0);
      auto Pb = P.topRows(b);
      auto Db = dS.topRows(b);
      Pb.noalias() = Xv.middleRows(r0, b) * Xv.transpose();
      Db.noalias() = G.middleRows(r0, b) * Xv.transpose();
      for (Eigen::Index i = 0; i < b; ++i) {
        auto p = Pb.row(i).array();
        p = (p * factor - (*lse)(r0 + i)).exp();
        // softmax backward: p * (dp - <dp, p>), where <dp, p> = <dy, y>
        const T dot = G.row(r0 + i).dot(Yv.row(r0 + i));
        Db.row(i).array() = p * (Db.row(i).array() - dot) * factor;
      }
      GX.noalias() += Pb.transpose() * G.middleRows(r0, b);
      GX.middleRows(r0, b).noalias() += Db * Xv;
      GX.noalias() += Db.transpose() * Xv.middleRows(r0, b);
    }
  });
}

template <class T>
Var scale(Tape<T>& tape, Var a, T factor) {
  Tensor<T> out = tape.value(a);
  for (auto& v : out.data()) v *= factor;
  return tape.record(std::move(out), {a}, [a, factor](Tape<T>& tp, Var, const Tensor<T>& g) {
    auto ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * g[i];
  });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  detail::require(A.shape() == B.shape(), "add: shape mismatch " + to_string(A.shape()) + " vs " + to_string(B.shape()));
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, Var, const Tensor<T>& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

/// Elementwise product.
template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  detail::require(A.shape() == B.shape(), "mul: shape mismatch " + to_string(A.shape()) + " vs " + to_string(B.shape()));
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, Var, const Tensor<T>& g) {
    if (auto ga = tp.grad_buffer(a); !ga.empty()) {
      const auto& Bv = tp.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * Bv[i];
    }
    if (auto gb = tp.grad_buffer(b); !gb.empty()) {
      const auto& Av = tp.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * Av[i];
    }
  });
}

template <class T>
Var relu(Tape<T>& tape, Var a) {
  Tensor<T> out = tape.value(a);
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return tape.record(std::move(out), {a}, [a](Tape<T>& tp, Var self, const Tensor<T>& g) {
    auto ga = tp.grad_buffer(a);
    const auto& Y = tp.value(self);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (Y[i] > T{0}) ga[i] += g[i];
    }
  });
}

/// Sum of all elements, as a shape-(1) tensor.
template <class T>
Var sum(Tape<T>& tape, Var a) {
  T total{0};
  for (T v : tape.value(a).data()) total += v;
  return tape.record(Tensor<T>({1}, total), {a}, [a](Tape<T>& tp, Var, const Tensor<T>& g) {
    auto ga = tp.grad_buffer(a);
    for (auto& v : ga) v += g[0];
  });
}

/// sum((a - target)^2) / rows: the mean squared error of each column
/// (one heatmap per column), summed over columns.
template <class T>
Var column_mse_sum(Tape<T>& tape, Var a, const Tensor<T>& target) {
  const auto& A = tape.value(a);
  detail::require_matrix(A, "column_mse_sum");
  detail::require(A.shape() == target.shape(),
                  "column_mse_sum: shape mismatch " + to_string(A.shape()) + " vs " + to_string(target.shape()));
  const T inv_rows = T{1} / static_cast<T>(A.rows());
  T total{0};
  for (std::size_t i = 0; i < A.size(); ++i) {
    const T d = A[i] - target[i];
    total += d * d;
  }
  return tape.record(Tensor<T>({1}, total * inv_rows), {a},
                     [a, target, inv_rows](Tape<T>& tp, Var, const Tensor<T>& g) {
                       auto ga = tp.grad_buffer(a);
                       if (ga.empty()) return;
                       const auto& Av = tp.value(a);
                       const T s = T{2} * inv_rows * g[0];
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * (Av[i] - target[i]);
                     });
}

template <class T>
Var reshape(Tape<T>& tape, Var a, Shape shape) {
  Tensor<T> out = tape.value(a).reshaped(std::move(shape));
  tape.counter().bytes_moved += out.size() * sizeof(T);
  return tape.record(std::move(out), {a}, [a](Tape<T>& tp, Var, const Tensor<T>& g) {
    auto ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

/// Stacks row blocks in list order.
template <class T>
Var concat_rows(Tape<T>& tape, const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows: empty part list");
  const std::size_t c = tape.value(parts.front()).cols();
  std::size_t total_rows = 0;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    const auto& P = tape.value(p);
    detail::require_matrix(P, "concat_rows");
    detail::require(P.cols() == c, "concat_rows: column extents differ (" + std::to_string(P.cols()) + " vs " +
                                       std::to_string(c) + ")");
    offsets.push_back(total_rows);
    total_rows += P.rows();
  }
  Tensor<T> out({total_rows, c});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& P = tape.value(parts[i]);
    std::copy(P.data().begin(), P.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[i] * c));
  }
  tape.counter().bytes_moved += out.size() * sizeof(T);
  return tape.record(std::move(out), parts, [parts, offsets, c](Tape<T>& tp, Var, const Tensor<T>& g) {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      auto gp = tp.grad_buffer(parts[i]);
      const T* src = g.data().data() + offsets[i] * c;
      for (std::size_t j = 0; j < gp.size(); ++j) gp[j] += src[j];
    }
  });
}

/// Places column blocks side by side in list order.
template <class T>
Var concat_cols(Tape<T>& tape, const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols: empty part list");
  const std::size_t r = tape.value(parts.front()).rows();
  std::size_t total_cols = 0;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    const auto& P = tape.value(p);
    detail::require_matrix(P, "concat_cols");
    detail::require(P.rows() == r, "concat_cols: row extents differ (" + std::to_string(P.rows()) + " vs " +
                                       std::to_string(r) + ")");
    offsets.push_back(total_cols);
    total_cols += P.cols();
  }
  Tensor<T> out({r, total_cols});
  auto O = detail::view(out);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& P = tape.value(parts[i]);
    O.middleCols(static_cast<Eigen::Index>(offsets[i]), static_cast<Eigen::Index>(P.cols())) = detail::view(P);
  }
  tape.counter().bytes_moved += out.size() * sizeof(T);
  return tape.record(std::move(out), parts, [parts, offsets, r](Tape<T>& tp, Var, const Tensor<T>& g) {
    const auto G = detail::view(g);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      auto gp = tp.grad_buffer(parts[i]);
      if (gp.empty()) continue;
      const std::size_t w = tp.value(parts[i]).cols();
      detail::view(gp, r, w) += G.middleCols(static_cast<Eigen::Index>(offsets[i]), static_cast<Eigen::Index>(w));
    }
  });
}

template <class T>
Var slice_rows(Tape<T>& tape, Var a, std::size_t begin, std::size_t count) {
  const auto& A = tape.value(a);
  detail::require_matrix(A, "slice_rows");
  detail::require(count > 0 && begin + count <= A.rows(), "slice_rows: range out of bounds");
  const std::size_t c = A.cols();
  std::vector<T> data(A.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                      A.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  Tensor<T> out({count, c}, std::move(data));
  tape.counter().bytes_moved += out.size() * sizeof(T);
  return tape.record(std::move(out), {a}, [a, begin, c](Tape<T>& tp, Var, const Tensor<T>& g) {
    auto ga = tp.grad_buffer(a);
    if (ga.empty()) return;
    T* dst = ga.data() + begin * c;
    for (std::size_t j = 0; j < g.size(); ++j) dst[j] += g[j];
  });
}

template <class T>
Var slice_cols(Tape<T>& tape, Var a, std::size_t begin, std::size_t count) {
  const auto& A = tape.value(a);
  detail::require_matrix(A, "slice_cols");
  detail::require(count > 0 && begin + count <= A.cols(), "slice_cols: range out of bounds");
  const std::size_t r = A.rows(), c = A.cols();
  Tensor<T> out({r, count});
  detail::view(out) =
      detail::view(A).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  tape.counter().bytes_moved += out.size() * sizeof(T);
  return tape.record(std::move(out), {a}, [a, begin, count, r, c](Tape<T>& tp, Var, const Tensor<T>& g) {
    auto ga = tp.grad_buffer(a);
    if (ga.empty()) return;
    detail::view(ga, r, c).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
        detail::view(g);
  });
}

/// x[L x C_in] * w[C_in x C_out] + b broadcast over rows. Counts
/// L*C_in*C_out mul-adds; the bias add is not counted.
template <class T>
Var affine_channels(Tape<T>& tape, Var x, Var w, Var b) {
  const auto& X = tape.value(x);
  const auto& W = tape.value(w);
  const auto& B = tape.value(b);
  detail::require_matrix(X, "affine_channels");
  detail::require_matrix(W, "affine_channels");
  detail::require(X.cols() == W.rows(),
                  "affine_channels: input channels " + std::to_string(X.cols()) + " vs weight " + to_string(W.shape()));
  detail::require(B.size() == W.cols(), "affine_channels: bias length " + std::to_string(B.size()) +
                                            " vs output channels " + std::to_string(W.cols()));
  const std::size_t L = X.rows(), cin = X.cols(), cout = W.cols();
  Tensor<T> out({L, cout});
  auto O = detail::view(out);
  O.noalias() = detail::view(X) * detail::view(W);
  const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(B.data().data(), static_cast<Eigen::Index>(cout));
  O.rowwise() += bias;
  tape.counter().mul_adds += static_cast<std::uint64_t>(L) * cin * cout;
  return tape.record(std::move(out), {x, w, b}, [x, w, b, L, cin, cout](Tape<T>& tp, Var, const Tensor<T>& g) {
    const auto G = detail::view(g);
    if (auto gx = tp.grad_buffer(x); !gx.empty()) {
      detail::view(gx, L, cin).noalias() += G * detail::view(tp.value(w)).transpose();
    }
    if (auto gw = tp.grad_buffer(w); !gw.empty()) {
      detail::view(gw, cin, cout).noalias() += detail::view(tp.value(x)).transpose() * G;
    }
    if (auto gb = tp.grad_buffer(b); !gb.empty()) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), static_cast<Eigen::Index>(cout)) += G.colwise().sum();
    }
  });
}

/// Unfolds 3x3 neighbourhoods (zero padding 1) of a feature map stored as
/// tokens x channels, token = y * width + x. Output column order is
/// (ky, kx, channel).
template <class T>
Var im2col3x3(Tape<T>& tape, Var a, std::size_t height, std::size_t width, std::size_t stride) {
  const auto& A = tape.value(a);
  detail::require_matrix(A, "im2col3x3");
  detail::require(A.rows() == height * width, "im2col3x3: token count does not match height*width");
  detail::require(stride >= 1, "im2col3x3: stride must be positive");
  const std::size_t C = A.cols();
  const std::size_t ho = (height - 1) / stride + 1, wo = (width - 1) / stride + 1;
  Tensor<T> out({ho * wo, 9 * C});
  // (output index, input index) per copied channel run
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  runs.reserve(ho * wo * 9);
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
          const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(height) ||
              ix >= static_cast<std::ptrdiff_t>(width)) {
            continue;
          }
          const std::size_t dst = (oy * wo + ox) * 9 * C + (ky * 3 + kx) * C;
          const std::size_t src = (static_cast<std::size_t>(iy) * width + static_cast<std::size_t>(ix)) * C;
          runs.emplace_back(dst, src);
        }
      }
    }
  }
  for (auto [dst, src] : runs) std::copy_n(A.data().data() + src, C, out.data().data() + dst);
  tape.counter().bytes_moved += out.size() * sizeof(T);
  return tape.record(std::move(out), {a}, [a, runs = std::move(runs), C](Tape<T>& tp, Var, const Tensor<T>& g) {
    auto ga = tp.grad_buffer(a);
    if (ga.empty()) return;
    for (auto [dst, src] : runs) {
      for (std::size_t k = 0; k < C; ++k) ga[src + k] += g[dst + k];
    }
  });
}

/// Nearest-neighbour 2x upsampling of a tokens x channels map.
template <class T>
Var upsample2x(Tape<T>& tape, Var a, std::size_t height, std::size_t width) {
  const auto& A = tape.value(a);
  detail::require_matrix(A, "upsample2x");
  detail::require(A.rows() == height * width, "upsample2x: token count does not match height*width");
  const std::size_t C = A.cols(), w2 = 2 * width;
  Tensor<T> out({4 * height * width, C});
  for (std::size_t y = 0; y < 2 * height; ++y) {
    for (std::size_t x = 0; x < w2; ++x) {
      std::copy_n(A.data().data() + ((y / 2) * width + x / 2) * C, C, out.data().data() + (y * w2 + x) * C);
    }
  }
  tape.counter().bytes_moved += out.size() * sizeof(T);
  return tape.record(std::move(out), {a}, [a, height, width, C](Tape<T>& tp, Var, const Tensor<T>& g) {
    auto ga = tp.grad_buffer(a);
    if (ga.empty()) return;
    const std::size_t w2 = 2 * width;
    for (std::size_t y = 0; y < 2 * height; ++y) {
      for (std::size_t x = 0; x < w2; ++x) {
        const T* src = g.data().data() + (y * w2 + x) * C;
        T* dst = ga.data() + ((y / 2) * width + x / 2) * C;
        for (std::size_t k = 0; k < C; ++k) dst[k] += src[k];
      }
    }
  });
}

}  // namespace rmpg::ops
