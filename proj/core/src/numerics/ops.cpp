#include "s2gr/numerics/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace s2gr::nx {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<MatR<T>>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;
// Column block of a row-major matrix (e.g. one attention head).
template <typename T>
using StrideMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStrideMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
CMap<T> cmat(const Tensor<T>& t) {
  return CMap<T>(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}
template <typename T>
Map<T> mat(Tensor<T>& t) {
  return Map<T>(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
Tape<T>& tape_of(const Var<T>& a) {
  require(a.valid(), "op on an invalid Var");
  return *a.tape();
}

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b) {
  require(a.tape() == b.tape(), "vars belong to different tapes");
}

template <typename T>
bool needs(const Var<T>& a) {
  return a.requires_grad();
}

template <typename T>
void accumulate(Tape<T>& t, int id, const Tensor<T>& g) {
  auto& dst = t.grad(id);
  for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  same_tape(a, b);
  require(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
  const int ia = a.id(), ib = b.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a) || needs(b), [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) accumulate(t, ia, g);
    if (t.requires_grad(ib)) accumulate(t, ib, g);
  }));
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  same_tape(a, b);
  require(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
  const int ia = a.id(), ib = b.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a) || needs(b), [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) accumulate(t, ia, g);
    if (t.requires_grad(ib)) {
      auto& d = t.grad(ib);
      for (std::size_t i = 0; i < g.data.size(); ++i) d.data[i] -= g.data[i];
    }
  }));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  same_tape(a, b);
  require(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
  const int ia = a.id(), ib = b.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a) || needs(b), [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) {
      const auto& bv = t.value(ib).data;
      auto& d = t.grad(ia);
      for (std::size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      const auto& av = t.value(ia).data;
      auto& d = t.grad(ib);
      for (std::size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i] * av[i];
    }
  }));
}

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
  Tensor<T> out = a.value();
  const T f = static_cast<T>(s);
  for (auto& v : out.data) v *= f;
  const int ia = a.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a), [ia, f](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < g.data.size(); ++i) d.data[i] += f * g.data[i];
  }));
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, double s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v += static_cast<T>(s);
  const int ia = a.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a), [ia](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    accumulate(t, ia, g);
  }));
}

template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  same_tape(a, row);
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  Tensor<T> out = a.value();
  const std::size_t n = a.cols();
  const auto& rv = row.value().data;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] += rv[c];
  const int ia = a.id(), ir = row.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a) || needs(row),
                           [ia, ir, n](Tape<T>& t, int self) {
                             const Tensor<T>& g = t.grad(self);
                             if (t.requires_grad(ia)) accumulate(t, ia, g);
                             if (t.requires_grad(ir)) {
                               auto& d = t.grad(ir);
                               for (std::size_t r = 0; r < g.rows(); ++r)
                                 for (std::size_t c = 0; c < n; ++c) d.data[c] += g.data[r * n + c];
                             }
                           }));
}

template <typename T>
Var<T> mul_col(const Var<T>& a, const Var<T>& col) {
  same_tape(a, col);
  require(col.cols() == 1 && col.rows() == a.rows(), "mul_col: shape mismatch");
  Tensor<T> out = a.value();
  const std::size_t n = a.cols();
  const auto& cv = col.value().data;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] *= cv[r];
  const int ia = a.id(), ic = col.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a) || needs(col),
                           [ia, ic, n](Tape<T>& t, int self) {
                             const Tensor<T>& g = t.grad(self);
                             if (t.requires_grad(ia)) {
                               const auto& cv = t.value(ic).data;
                               auto& d = t.grad(ia);
                               for (std::size_t r = 0; r < g.rows(); ++r)
                                 for (std::size_t c = 0; c < n; ++c)
                                   d.data[r * n + c] += g.data[r * n + c] * cv[r];
                             }
                             if (t.requires_grad(ic)) {
                               const auto& av = t.value(ia).data;
                               auto& d = t.grad(ic);
                               for (std::size_t r = 0; r < g.rows(); ++r) {
                                 T acc = 0;
                                 for (std::size_t c = 0; c < n; ++c)
                                   acc += g.data[r * n + c] * av[r * n + c];
                                 d.data[r] += acc;
                               }
                             }
                           }));
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  same_tape(a, b);
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Tensor<T> out(a.rows(), b.cols());
  mat(out).noalias() = cmat(a.value()) * cmat(b.value());
  const int ia = a.id(), ib = b.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a) || needs(b), [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) mat(t.grad(ia)).noalias() += cmat(g) * cmat(t.value(ib)).transpose();
    if (t.requires_grad(ib)) mat(t.grad(ib)).noalias() += cmat(t.value(ia)).transpose() * cmat(g);
  }));
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  same_tape(a, b);
  require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  Tensor<T> out(a.rows(), b.rows());
  mat(out).noalias() = cmat(a.value()) * cmat(b.value()).transpose();
  const int ia = a.id(), ib = b.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a) || needs(b), [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) mat(t.grad(ia)).noalias() += cmat(g) * cmat(t.value(ib));
    if (t.requires_grad(ib)) mat(t.grad(ib)).noalias() += cmat(g).transpose() * cmat(t.value(ia));
  }));
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Var<T> y = matmul(x, w);
  return b.valid() ? add_row(y, b) : y;
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  const int ia = a.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a), [ia](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const auto& av = t.value(ia).data;
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < g.data.size(); ++i)
      if (av[i] > T(0)) d.data[i] += g.data[i];
  }));
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = std::exp(v);
  const int ia = a.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a), [ia](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const auto& y = t.value(self).data;
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i] * y[i];
  }));
}

template <typename T>
Var<T> log(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) {
    if (!(v > T(0))) throw DomainError("log: non-positive input");
    v = std::log(v);
  }
  const int ia = a.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a), [ia](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const auto& x = t.value(ia).data;
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i] / x[i];
  }));
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().data) acc += v;
  const int ia = a.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(Tensor<T>::scalar(acc), needs(a), [ia](Tape<T>& t, int self) {
    const T g = t.grad(self).data[0];
    auto& d = t.grad(ia);
    for (auto& v : d.data) v += g;
  }));
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().numel()));
}

template <typename T>
Var<T> sum_cols(const Var<T>& a) {
  const std::size_t rows = a.rows(), n = a.cols();
  Tensor<T> out(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t c = 0; c < n; ++c) acc += a.value().data[r * n + c];
    out.data[r] = acc;
  }
  const int ia = a.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a), [ia, n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    auto& d = t.grad(ia);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < n; ++c) d.data[r * n + c] += g.data[r];
  }));
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t count) {
  require(begin + count <= a.rows(), "slice_rows: out of range");
  const std::size_t n = a.cols();
  Tensor<T> out(count, n);
  std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(begin * n), count * n,
              out.data.begin());
  const int ia = a.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a), [ia, begin, n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < g.data.size(); ++i) d.data[begin * n + i] += g.data[i];
  }));
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t count) {
  require(begin + count <= a.cols(), "slice_cols: out of range");
  const std::size_t rows = a.rows(), n = a.cols();
  Tensor<T> out(rows, count);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) out.data[r * count + c] = a.value().data[r * n + begin + c];
  const int ia = a.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a), [ia, begin, count, n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    auto& d = t.grad(ia);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) d.data[r * n + begin + c] += g.data[r * count + c];
  }));
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const int> ids) {
  const std::size_t n = a.cols(), rows = a.rows();
  Tensor<T> out(ids.size(), n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows)
      throw IndexError("gather_rows: index " + std::to_string(ids[i]) + " out of range");
    std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(ids[i] * n), n,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  std::vector<int> idx(ids.begin(), ids.end());
  const int ia = a.id();
  auto& t = tape_of(a);
  return Var<T>(&t, t.push(std::move(out), needs(a),
                           [ia, n, idx = std::move(idx)](Tape<T>& t, int self) {
                             const Tensor<T>& g = t.grad(self);
                             auto& d = t.grad(ia);
                             for (std::size_t i = 0; i < idx.size(); ++i)
                               for (std::size_t c = 0; c < n; ++c)
                                 d.data[idx[i] * n + c] += g.data[i * n + c];
                           }));
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p.cols() == n, "concat_rows: column mismatch");
    same_tape(parts[0], p);
    rows += p.rows();
    rg = rg || needs(p);
  }
  Tensor<T> out(rows, n);
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(off));
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.value().numel();
  }
  auto& t = tape_of(parts[0]);
  return Var<T>(&t, t.push(std::move(out), rg,
                           [ids = std::move(ids), offsets = std::move(offsets)](Tape<T>& t, int self) {
                             const Tensor<T>& g = t.grad(self);
                             for (std::size_t k = 0; k < ids.size(); ++k) {
                               if (!t.requires_grad(ids[k])) continue;
                               auto& d = t.grad(ids[k]);
                               for (std::size_t i = 0; i < d.data.size(); ++i)
                                 d.data[i] += g.data[offsets[k] + i];
                             }
                           }));
}

template <typename T>
Var<T> interleave_rows(std::span<const Var<T>> parts, std::span<const int> part_of_row,
                       std::span<const int> row_in_part) {
  require(!parts.empty(), "interleave_rows: no parts");
  require(part_of_row.size() == row_in_part.size(), "interleave_rows: index length mismatch");
  const std::size_t n = parts[0].cols();
  bool rg = false;
  for (const auto& p : parts) {
    require(p.cols() == n, "interleave_rows: column mismatch");
    same_tape(parts[0], p);
    rg = rg || needs(p);
  }
  const std::size_t rows = part_of_row.size();
  Tensor<T> out(rows, n);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& src = parts[static_cast<std::size_t>(part_of_row[r])];
    if (static_cast<std::size_t>(row_in_part[r]) >= src.rows())
      throw IndexError("interleave_rows: row out of range");
    std::copy_n(src.value().data.begin() + static_cast<std::ptrdiff_t>(row_in_part[r] * n), n,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  std::vector<int> pr(part_of_row.begin(), part_of_row.end());
  std::vector<int> rp(row_in_part.begin(), row_in_part.end());
  auto& t = tape_of(parts[0]);
  return Var<T>(&t, t.push(std::move(out), rg,
                           [ids = std::move(ids), pr = std::move(pr), rp = std::move(rp), n](
                               Tape<T>& t, int self) {
                             const Tensor<T>& g = t.grad(self);
                             for (std::size_t r = 0; r < pr.size(); ++r) {
                               const int id = ids[pr[r]];
                               if (!t.requires_grad(id)) continue;
                               auto& d = t.grad(id);
                               for (std::size_t c = 0; c < n; ++c)
                                 d.data[rp[r] * n + c] += g.data[r * n + c];
                             }
                           }));
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps) {
  same_tape(x, gain);
  same_tape(x, bias);
  const std::size_t rows = x.rows(), n = x.cols();
  require(gain.value().numel() == n && bias.value().numel() == n, "layer_norm: parameter size");
  Tensor<T> out(rows, n);
  // Cache normalised values and inverse std for backward.
  auto xhat = std::make_shared<std::vector<T>>(rows * n);
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const auto& xv = x.value().data;
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    T mu = 0;
    for (std::size_t c = 0; c < n; ++c) mu += xv[r * n + c];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const T dlt = xv[r * n + c] - mu;
      var += dlt * dlt;
    }
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (xv[r * n + c] - mu) * is;
      (*xhat)[r * n + c] = h;
      out.data[r * n + c] = h * gv[c] + bv[c];
    }
  }
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  auto& t = tape_of(x);
  return Var<T>(&t, t.push(std::move(out), needs(x) || needs(gain) || needs(bias),
                           [ix, ig, ib, n, xhat, inv_std](Tape<T>& t, int self) {
                             const Tensor<T>& g = t.grad(self);
                             const std::size_t rows = g.rows();
                             const auto& gv = t.value(ig).data;
                             if (t.requires_grad(ig)) {
                               auto& d = t.grad(ig);
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < n; ++c)
                                   d.data[c] += g.data[r * n + c] * (*xhat)[r * n + c];
                             }
                             if (t.requires_grad(ib)) {
                               auto& d = t.grad(ib);
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < n; ++c) d.data[c] += g.data[r * n + c];
                             }
                             if (t.requires_grad(ix)) {
                               auto& d = t.grad(ix);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 T m1 = 0, m2 = 0;
                                 for (std::size_t c = 0; c < n; ++c) {
                                   const T dh = g.data[r * n + c] * gv[c];
                                   m1 += dh;
                                   m2 += dh * (*xhat)[r * n + c];
                                 }
                                 m1 /= static_cast<T>(n);
                                 m2 /= static_cast<T>(n);
                                 for (std::size_t c = 0; c < n; ++c) {
                                   const T dh = g.data[r * n + c] * gv[c];
                                   d.data[r * n + c] +=
                                       (*inv_std)[r] * (dh - m1 - (*xhat)[r * n + c] * m2);
                                 }
                               }
                             }
                           }));
}

template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask = Tensor<T>::zeros_like(x.value());
  for (auto& m : mask.data) m = rng->uniform() >= p ? keep_scale : T(0);
  auto& t = tape_of(x);
  return mul(x, t.constant(std::move(mask)));
}

template <typename T>
Var<T> normalize_rows(const Var<T>& x) {
  const std::size_t rows = x.rows(), n = x.cols();
  Tensor<T> out = x.value();
  auto norms = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t c = 0; c < n; ++c) s += out.data[r * n + c] * out.data[r * n + c];
    const T nr = std::sqrt(s);
    if (!(nr > T(0))) throw DomainError("cosine similarity of a zero-norm vector");
    (*norms)[r] = nr;
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] /= nr;
  }
  const int ix = x.id();
  auto& t = tape_of(x);
  return Var<T>(&t, t.push(std::move(out), needs(x), [ix, n, norms](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const auto& y = t.value(self).data;
    auto& d = t.grad(ix);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < n; ++c) dot += y[r * n + c] * g.data[r * n + c];
      for (std::size_t c = 0; c < n; ++c)
        d.data[r * n + c] += (g.data[r * n + c] - y[r * n + c] * dot) / (*norms)[r];
    }
  }));
}

template <typename T>
Var<T> cosine_rows(const Var<T>& a, const Var<T>& b) {
  return sum_cols(mul(normalize_rows(a), normalize_rows(b)));
}

template <typename T>
Var<T> cosine_matrix(const Var<T>& a, const Var<T>& b) {
  return matmul_nt(normalize_rows(a), normalize_rows(b));
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& x) {
  const std::size_t rows = x.rows(), n = x.cols();
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T s = 0;
    for (T v : row) s += std::exp(v - mx);
    const T lse = mx + std::log(s);
    for (T& v : row) v -= lse;
  }
  const int ix = x.id();
  auto& t = tape_of(x);
  return Var<T>(&t, t.push(std::move(out), needs(x), [ix, n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const auto& y = t.value(self).data;
    auto& d = t.grad(ix);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      T gs = 0;
      for (std::size_t c = 0; c < n; ++c) gs += g.data[r * n + c];
      for (std::size_t c = 0; c < n; ++c)
        d.data[r * n + c] += g.data[r * n + c] - std::exp(y[r * n + c]) * gs;
    }
  }));
}

template <typename T>
Var<T> pick(const Var<T>& x, std::span<const int> idx) {
  const std::size_t rows = x.rows(), n = x.cols();
  require(idx.size() == rows, "pick: one index per row required");
  Tensor<T> out(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n)
      throw IndexError("target index " + std::to_string(idx[r]) + " out of range [0, " +
                       std::to_string(n) + ")");
    out.data[r] = x.value().data[r * n + static_cast<std::size_t>(idx[r])];
  }
  std::vector<int> ids(idx.begin(), idx.end());
  const int ix = x.id();
  auto& t = tape_of(x);
  return Var<T>(&t, t.push(std::move(out), needs(x), [ix, n, ids = std::move(ids)](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    auto& d = t.grad(ix);
    for (std::size_t r = 0; r < ids.size(); ++r) d.data[r * n + static_cast<std::size_t>(ids[r])] += g.data[r];
  }));
}

template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, std::span<const int> targets) {
  return scale(pick(log_softmax_rows(logits), targets), -1.0);
}

template <typename T>
Var<T> stop_gradient(const Var<T>& x) {
  auto& t = tape_of(x);
  return t.constant(t.stop_grad_value(x.value()));
}

template <typename T>
Var<T> pairwise_sq_dist(const Var<T>& x) {
  const std::size_t k = x.rows(), n = x.cols();
  Tensor<T> out(k, k);
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      T s = 0;
      for (std::size_t c = 0; c < n; ++c) {
        const T dlt = xv[i * n + c] - xv[j * n + c];
        s += dlt * dlt;
      }
      out.data[i * k + j] = s;
      out.data[j * k + i] = s;
    }
  const int ix = x.id();
  auto& t = tape_of(x);
  return Var<T>(&t, t.push(std::move(out), needs(x), [ix, k, n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const auto& xv = t.value(ix).data;
    auto& d = t.grad(ix);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j) {
        const T w = T(2) * (g.data[i * k + j] + g.data[j * k + i]);
        if (w == T(0)) continue;
        for (std::size_t c = 0; c < n; ++c) {
          const T dlt = w * (xv[i * n + c] - xv[j * n + c]);
          d.data[i * n + c] += dlt;
          d.data[j * n + c] -= dlt;
        }
      }
  }));
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionSpec& spec) {
  same_tape(q, k);
  same_tape(q, v);
  const int d = static_cast<int>(q.cols());
  require(spec.heads > 0 && d % spec.heads == 0, "attention: d not divisible by heads");
  require(k.cols() == q.cols() && v.cols() == q.cols(), "attention: width mismatch");
  require(static_cast<int>(q.rows()) == spec.batch * spec.q_len, "attention: query rows");
  require(k.rows() == v.rows() && k.rows() % static_cast<std::size_t>(spec.k_len) == 0,
          "attention: key rows");
  const int kv_blocks = static_cast<int>(k.rows()) / spec.k_len;
  std::vector<int> kv_index = spec.kv_index;
  if (kv_index.empty()) {
    require(kv_blocks == spec.batch, "attention: key blocks must match batch");
    kv_index.resize(static_cast<std::size_t>(spec.batch));
    for (int b = 0; b < spec.batch; ++b) kv_index[static_cast<std::size_t>(b)] = b;
  }
  std::vector<int> key_len = spec.key_len;
  if (key_len.empty()) key_len.assign(static_cast<std::size_t>(spec.batch), spec.k_len);
  require(static_cast<int>(kv_index.size()) == spec.batch &&
              static_cast<int>(key_len.size()) == spec.batch,
          "attention: per-block vectors must have batch entries");

  const int dh = d / spec.heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const int ql = spec.q_len, kl = spec.k_len;
  // Probabilities cached per (batch, head) for the backward pass.
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(spec.batch) *
                                                static_cast<std::size_t>(spec.heads) * ql * kl);
  Tensor<T> out(q.rows(), q.cols());
  const auto ninf = -std::numeric_limits<T>::infinity();
  MatR<T> scores(ql, kl);
  for (int b = 0; b < spec.batch; ++b) {
    const int kb = kv_index[static_cast<std::size_t>(b)];
    require(kb >= 0 && kb < kv_blocks, "attention: kv_index out of range");
    const int valid = key_len[static_cast<std::size_t>(b)];
    require(valid >= 1 && valid <= kl, "attention: key_len out of range");
    for (int h = 0; h < spec.heads; ++h) {
      CStrideMap<T> qh(q.value().data.data() + static_cast<std::ptrdiff_t>(b) * ql * d + h * dh, ql, dh,
                       Eigen::OuterStride<>(d));
      CStrideMap<T> kh(k.value().data.data() + static_cast<std::ptrdiff_t>(kb) * kl * d + h * dh, kl, dh,
                       Eigen::OuterStride<>(d));
      CStrideMap<T> vh(v.value().data.data() + static_cast<std::ptrdiff_t>(kb) * kl * d + h * dh, kl, dh,
                       Eigen::OuterStride<>(d));
      scores.noalias() = (qh * kh.transpose()) * inv_sqrt;
      for (int i = 0; i < ql; ++i) {
        const int limit = spec.causal ? std::min(valid, spec.q_offset + i + 1) : valid;
        require(limit >= 1, "attention: a query sees no keys");
        T mx = ninf;
        for (int j = 0; j < kl; ++j) {
          if (j >= limit) scores(i, j) = ninf;
          mx = std::max(mx, scores(i, j));
        }
        T s = 0;
        for (int j = 0; j < kl; ++j) {
          const T e = j < limit ? std::exp(scores(i, j) - mx) : T(0);
          scores(i, j) = e;
          s += e;
        }
        for (int j = 0; j < kl; ++j) scores(i, j) /= s;
      }
      Map<T>(probs->data() + (static_cast<std::size_t>(b) * spec.heads + h) * ql * kl, ql, kl) = scores;
      StrideMap<T> oh(out.data.data() + static_cast<std::ptrdiff_t>(b) * ql * d + h * dh, ql, dh,
                      Eigen::OuterStride<>(d));
      oh.noalias() = scores * vh;
    }
  }

  const int iq = q.id(), ik = k.id(), iv = v.id();
  const int batch = spec.batch, heads = spec.heads;
  auto& t = tape_of(q);
  return Var<T>(&t, t.push(std::move(out), needs(q) || needs(k) || needs(v),
                           [=, kv_index = std::move(kv_index)](Tape<T>& t, int self) {
                             const Tensor<T>& g = t.grad(self);
                             const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik),
                                        gv = t.requires_grad(iv);
                             T* dq = gq ? t.grad(iq).data.data() : nullptr;
                             T* dk = gk ? t.grad(ik).data.data() : nullptr;
                             T* dv = gv ? t.grad(iv).data.data() : nullptr;
                             const T* qd = t.value(iq).data.data();
                             const T* kd = t.value(ik).data.data();
                             const T* vd = t.value(iv).data.data();
                             MatR<T> dp(ql, kl), ds(ql, kl);
                             for (int b = 0; b < batch; ++b) {
                               const int kb = kv_index[static_cast<std::size_t>(b)];
                               for (int h = 0; h < heads; ++h) {
                                 CMap<T> p(probs->data() + (static_cast<std::size_t>(b) * heads + h) * ql * kl,
                                           ql, kl);
                                 CStrideMap<T> go(g.data.data() + static_cast<std::ptrdiff_t>(b) * ql * d + h * dh,
                                                  ql, dh, Eigen::OuterStride<>(d));
                                 CStrideMap<T> vh(vd + static_cast<std::ptrdiff_t>(kb) * kl * d + h * dh, kl, dh,
                                                  Eigen::OuterStride<>(d));
                                 CStrideMap<T> kh(kd + static_cast<std::ptrdiff_t>(kb) * kl * d + h * dh, kl, dh,
                                                  Eigen::OuterStride<>(d));
                                 CStrideMap<T> qh(qd + static_cast<std::ptrdiff_t>(b) * ql * d + h * dh, ql, dh,
                                                  Eigen::OuterStride<>(d));
                                 if (gv) {
                                   StrideMap<T> dvh(dv + static_cast<std::ptrdiff_t>(kb) * kl * d + h * dh, kl, dh,
                                                    Eigen::OuterStride<>(d));
                                   dvh.noalias() += p.transpose() * go;
                                 }
                                 if (!gq && !gk) continue;
                                 dp.noalias() = go * vh.transpose();
                                 for (int i = 0; i < ql; ++i) {
                                   T dot = 0;
                                   for (int j = 0; j < kl; ++j) dot += dp(i, j) * p(i, j);
                                   for (int j = 0; j < kl; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
                                 }
                                 if (gq) {
                                   StrideMap<T> dqh(dq + static_cast<std::ptrdiff_t>(b) * ql * d + h * dh, ql, dh,
                                                    Eigen::OuterStride<>(d));
                                   dqh.noalias() += ds * kh;
                                 }
                                 if (gk) {
                                   StrideMap<T> dkh(dk + static_cast<std::ptrdiff_t>(kb) * kl * d + h * dh, kl, dh,
                                                    Eigen::OuterStride<>(d));
                                   dkh.noalias() += ds.transpose() * qh;
                                 }
                               }
                             }
                           }));
}

#define S2GR_INSTANTIATE_OPS(T)                                                                   \
  template Var<T> add(const Var<T>&, const Var<T>&);                                              \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                              \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                              \
  template Var<T> scale(const Var<T>&, double);                                                   \
  template Var<T> add_scalar(const Var<T>&, double);                                              \
  template Var<T> add_row(const Var<T>&, const Var<T>&);                                          \
  template Var<T> mul_col(const Var<T>&, const Var<T>&);                                          \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                           \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                                        \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                            \
  template Var<T> relu(const Var<T>&);                                                            \
  template Var<T> exp(const Var<T>&);                                                             \
  template Var<T> log(const Var<T>&);                                                             \
  template Var<T> sum(const Var<T>&);                                                             \
  template Var<T> mean(const Var<T>&);                                                            \
  template Var<T> sum_cols(const Var<T>&);                                                        \
  template Var<T> slice_rows(const Var<T>&, std::size_t, std::size_t);                            \
  template Var<T> slice_cols(const Var<T>&, std::size_t, std::size_t);                            \
  template Var<T> gather_rows(const Var<T>&, std::span<const int>);                               \
  template Var<T> concat_rows(std::span<const Var<T>>);                                           \
  template Var<T> interleave_rows(std::span<const Var<T>>, std::span<const int>,                  \
                                  std::span<const int>);                                          \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);                \
  template Var<T> dropout(const Var<T>&, double, Rng*);                                           \
  template Var<T> normalize_rows(const Var<T>&);                                                  \
  template Var<T> cosine_rows(const Var<T>&, const Var<T>&);                                      \
  template Var<T> cosine_matrix(const Var<T>&, const Var<T>&);                                    \
  template Var<T> log_softmax_rows(const Var<T>&);                                                \
  template Var<T> pick(const Var<T>&, std::span<const int>);                                      \
  template Var<T> cross_entropy_rows(const Var<T>&, std::span<const int>);                        \
  template Var<T> stop_gradient(const Var<T>&);                                                   \
  template Var<T> pairwise_sq_dist(const Var<T>&);                                                \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, const AttentionSpec&);

S2GR_INSTANTIATE_OPS(float)
S2GR_INSTANTIATE_OPS(double)

#undef S2GR_INSTANTIATE_OPS

}  // namespace s2gr::nx
