#include "cvt/graph.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace cvt {

// ---- ParameterStore ---------------------------------------------------------

Parameter& ParameterStore::create(const std::string& name, int rows, int cols,
                                  Init init, Rng& rng) {
  if (rows <= 0 || cols <= 0) {
    throw std::invalid_argument("parameter '" + name + "' has empty shape");
  }
  if (index_.count(name) > 0) {
    throw std::invalid_argument("duplicate parameter '" + name + "'");
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value.resize(rows, cols);
  switch (init) {
    case Init::kZero:
      p->value.setZero();
      break;
    case Init::kEmbedding:
      for (Eigen::Index i = 0; i < p->value.size(); ++i) {
        p->value.data()[i] = rng.uniform(-0.05, 0.05);
      }
      break;
    case Init::kGlorot: {
      const double bound = std::sqrt(6.0 / (rows + cols));
      for (Eigen::Index i = 0; i < p->value.size(); ++i) {
        p->value.data()[i] = rng.uniform(-bound, bound);
      }
      break;
    }
  }
  p->grad = Matrix::Zero(rows, cols);
  Parameter* raw = p.get();
  owned_.push_back(std::move(p));
  ordered_.push_back(raw);
  index_.emplace(name, raw);
  return *raw;
}

Parameter& ParameterStore::get(const std::string& name) {
  Parameter* p = find(name);
  if (p == nullptr) throw std::out_of_range("no parameter '" + name + "'");
  return *p;
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : it->second;
}

std::vector<Parameter*> ParameterStore::with_prefix(
    std::string_view prefix) const {
  std::vector<Parameter*> out;
  for (Parameter* p : ordered_) {
    if (std::string_view(p->name).substr(0, prefix.size()) == prefix) {
      out.push_back(p);
    }
  }
  return out;
}

void ParameterStore::zero_grad() {
  for (Parameter* p : ordered_) p->grad.setZero();
}

void ParameterStore::set_frozen(std::string_view prefix, bool frozen) {
  for (Parameter* p : with_prefix(prefix)) p->frozen = frozen;
}

uint64_t ParameterStore::checksum(std::string_view prefix) const {
  uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* data, size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const Parameter* p : with_prefix(prefix)) {
    feed(p->name.data(), p->name.size());
    feed(p->value.data(), sizeof(double) * static_cast<size_t>(p->value.size()));
  }
  return h;
}

// ---- Graph ------------------------------------------------------------------

const Matrix& Expr::value() const { return graph_->value(id_); }

double Expr::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::invalid_argument("expression is not a scalar");
  return v(0, 0);
}

bool Expr::requires_grad() const { return graph_->needs_grad(id_); }

const Matrix& Graph::value(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  return n.ref != nullptr ? *n.ref : n.value;
}

Matrix& Graph::grad_buffer(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.size() == 0) {
    const Matrix& v = value(id);
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

Expr Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Expr(this, static_cast<int>(nodes_.size()) - 1);
}

Expr Graph::input(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = tracking_;
  nodes_.push_back(std::move(n));
  return Expr(this, static_cast<int>(nodes_.size()) - 1);
}

Expr Graph::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Expr(this, it->second);
  Node n;
  n.ref = &p.value;
  n.param = &p;
  n.requires_grad = tracking_ && !p.frozen;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, id);
  return Expr(this, id);
}

Expr Graph::emit(Matrix value, std::initializer_list<Expr> inputs,
                 BackwardFn fn) {
  return emit(std::move(value), std::span<const Expr>(inputs.begin(), inputs.size()),
              std::move(fn));
}

Expr Graph::emit(Matrix value, std::span<const Expr> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (tracking_) {
    for (const Expr& e : inputs) {
      if (e.graph_ != this) {
        throw std::invalid_argument("expression belongs to another graph");
      }
      if (nodes_[static_cast<size_t>(e.id_)].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Expr(this, static_cast<int>(nodes_.size()) - 1);
}

void Graph::backward(Expr loss) {
  if (loss.graph_ != this) {
    throw std::invalid_argument("loss belongs to another graph");
  }
  const Matrix& lv = value(loss.id_);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw std::invalid_argument("backward() needs a scalar loss");
  }
  if (!needs_grad(loss.id_)) return;
  grad_buffer(loss.id_)(0, 0) += 1.0;
  for (int i = loss.id_; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, i);
  }
  for (Node& n : nodes_) {
    if (n.param != nullptr && n.grad.size() != 0) {
      n.param->grad += n.grad;
    }
  }
}

// ---- Helpers ----------------------------------------------------------------

namespace {

void require(bool condition, const char* message) {
  if (!condition) throw std::invalid_argument(message);
}

Matrix row_softmax(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    // The vectorized exp clamps its argument near -709, so shifts past the
    // double underflow point are zeroed explicitly.
    const auto shifted = x.row(r).array() - m;
    y.row(r) = (shifted < -746.0).select(0.0, shifted.exp());
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

// Both KL arguments are floored inside the log, so KL(p || p) is exactly 0
// even when p has entries below the floor.
double floored_log(double x) { return std::log(std::max(x, kProbabilityFloor)); }

Matrix row_log_softmax(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    y.row(r) = x.row(r).array() - lse;
  }
  return y;
}

}  // namespace

// ---- Elementwise and linear -------------------------------------------------

namespace {

namespace ei = Eigen::internal;
using Packet = ei::packet_traits<double>::type;
constexpr int kLanes = ei::packet_traits<double>::size;

// Rounds like pmadd: fused when the packets are.
inline double madd(double a, double b, double c) {
#ifdef EIGEN_VECTORIZE_FMA
  return std::fma(a, b, c);
#else
  const volatile double p = a * b;
  return p + c;
#endif
}

// R rows of c by C packets of columns, accumulated over k in order.
template <int R, int C>
void product_tile(const double* a, int lda, const double* b, int ldb, double* c, int ldc,
                  int depth) {
  Packet acc[R][C];
  for (int r = 0; r < R; ++r) {
    for (int q = 0; q < C; ++q) acc[r][q] = ei::pset1<Packet>(0.0);
  }
  for (int k = 0; k < depth; ++k) {
    Packet bk[C];
    for (int q = 0; q < C; ++q) bk[q] = ei::ploadu<Packet>(b + static_cast<size_t>(k) * ldb + q * kLanes);
    for (int r = 0; r < R; ++r) {
      const Packet ar = ei::pset1<Packet>(a[static_cast<size_t>(r) * lda + k]);
      for (int q = 0; q < C; ++q) acc[r][q] = ei::pmadd(ar, bk[q], acc[r][q]);
    }
  }
  for (int r = 0; r < R; ++r) {
    for (int q = 0; q < C; ++q) ei::pstoreu(c + static_cast<size_t>(r) * ldc + q * kLanes, acc[r][q]);
  }
}

template <int R>
void product_rows(const double* a, int depth, const double* b, int n, double* c) {
  int j = 0;
  for (; j + 3 * kLanes <= n; j += 3 * kLanes) product_tile<R, 3>(a, depth, b + j, n, c + j, n, depth);
  for (; j + kLanes <= n; j += kLanes) product_tile<R, 1>(a, depth, b + j, n, c + j, n, depth);
  for (; j < n; ++j) {
    for (int r = 0; r < R; ++r) {
      double s = 0.0;
      for (int k = 0; k < depth; ++k) {
        s = madd(a[static_cast<size_t>(r) * depth + k], b[static_cast<size_t>(k) * n + j], s);
      }
      c[static_cast<size_t>(r) * n + j] = s;
    }
  }
}

}  // namespace

Matrix product(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "product: inner dimensions differ");
  const int m = static_cast<int>(a.rows());
  const int depth = static_cast<int>(a.cols());
  const int n = static_cast<int>(b.cols());
  Matrix c(m, n);
  if (m == 0 || n == 0) return c;
  int i = 0;
  for (; i + 8 <= m; i += 8) {
    product_rows<8>(a.data() + static_cast<size_t>(i) * depth, depth, b.data(), n,
                    c.data() + static_cast<size_t>(i) * n);
  }
  for (; i < m; ++i) {
    product_rows<1>(a.data() + static_cast<size_t>(i) * depth, depth, b.data(), n,
                    c.data() + static_cast<size_t>(i) * n);
  }
  return c;
}

Matrix product_nt(const Matrix& a, const Matrix& b) {
  const Matrix bt = b.transpose();
  return product(a, bt);
}

Expr matmul(Expr a, Expr b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Graph& g = a.graph();
  Matrix out = product(a.value(), b.value());
  const int ia = a.id(), ib = b.id();
  return g.emit(std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    if (g.needs_grad(ia)) g.grad_buffer(ia).noalias() += d * g.value(ib).transpose();
    if (g.needs_grad(ib)) g.grad_buffer(ib).noalias() += g.value(ia).transpose() * d;
  });
}

Expr matmul_nt(Expr a, Expr b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Graph& g = a.graph();
  Matrix out = product_nt(a.value(), b.value());
  const int ia = a.id(), ib = b.id();
  return g.emit(std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    if (g.needs_grad(ia)) g.grad_buffer(ia).noalias() += d * g.value(ib);
    if (g.needs_grad(ib)) g.grad_buffer(ib).noalias() += d.transpose() * g.value(ia);
  });
}

namespace {

Expr add_scaled(Expr a, Expr b, double sign) {
  Graph& g = a.graph();
  const bool broadcast =
      b.rows() == 1 && a.rows() != 1 && a.cols() == b.cols();
  require(broadcast || (a.rows() == b.rows() && a.cols() == b.cols()),
          "add: shape mismatch");
  Matrix out = a.value();
  if (broadcast) {
    out.rowwise() += sign * b.value().row(0);
  } else {
    out += sign * b.value();
  }
  const int ia = a.id(), ib = b.id();
  return g.emit(std::move(out), {a, b},
                [ia, ib, broadcast, sign](Graph& g, int self) {
                  const Matrix& d = g.grad(self);
                  if (g.needs_grad(ia)) g.grad_buffer(ia) += d;
                  if (g.needs_grad(ib)) {
                    if (broadcast) {
                      g.grad_buffer(ib) += sign * d.colwise().sum();
                    } else {
                      g.grad_buffer(ib) += sign * d;
                    }
                  }
                });
}

}  // namespace

Expr add(Expr a, Expr b) { return add_scaled(a, b, 1.0); }
Expr sub(Expr a, Expr b) { return add_scaled(a, b, -1.0); }

Expr cwise_mul(Expr a, Expr b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          "cwise_mul: shape mismatch");
  Graph& g = a.graph();
  Matrix out = a.value().cwiseProduct(b.value());
  const int ia = a.id(), ib = b.id();
  return g.emit(std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    if (g.needs_grad(ia)) g.grad_buffer(ia) += d.cwiseProduct(g.value(ib));
    if (g.needs_grad(ib)) g.grad_buffer(ib) += d.cwiseProduct(g.value(ia));
  });
}

Expr scale(Expr a, double factor) {
  Graph& g = a.graph();
  Matrix out = a.value() * factor;
  const int ia = a.id();
  return g.emit(std::move(out), {a}, [ia, factor](Graph& g, int self) {
    g.grad_buffer(ia) += factor * g.grad(self);
  });
}

Expr tanh(Expr a) {
  Graph& g = a.graph();
  Matrix out = a.value().array().tanh().matrix();
  const int ia = a.id();
  return g.emit(std::move(out), {a}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    g.grad_buffer(ia).array() +=
        g.grad(self).array() * (1.0 - y.array().square());
  });
}

Expr sigmoid(Expr a) {
  Graph& g = a.graph();
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  const int ia = a.id();
  return g.emit(std::move(out), {a}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    g.grad_buffer(ia).array() +=
        g.grad(self).array() * y.array() * (1.0 - y.array());
  });
}

Expr relu(Expr a) {
  Graph& g = a.graph();
  Matrix out = a.value().cwiseMax(0.0);
  const int ia = a.id();
  return g.emit(std::move(out), {a}, [ia](Graph& g, int self) {
    const Matrix& x = g.value(ia);
    g.grad_buffer(ia).array() +=
        (x.array() > 0.0).select(g.grad(self).array(), 0.0);
  });
}

Expr sum(Expr a) {
  Graph& g = a.graph();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return g.emit(std::move(out), {a}, [ia](Graph& g, int self) {
    g.grad_buffer(ia).array() += g.grad(self)(0, 0);
  });
}

// ---- Shape ------------------------------------------------------------------

Expr concat_cols(std::span<const Expr> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Graph& g = parts[0].graph();
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Expr& p : parts) {
    require(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  Eigen::Index at = 0;
  for (const Expr& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    ids.push_back(p.id());
  }
  return g.emit(std::move(out), parts, [ids](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    Eigen::Index at = 0;
    for (int id : ids) {
      const Eigen::Index c = g.value(id).cols();
      if (g.needs_grad(id)) g.grad_buffer(id) += d.middleCols(at, c);
      at += c;
    }
  });
}

Expr concat_rows(std::span<const Expr> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Graph& g = parts[0].graph();
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Expr& p : parts) {
    require(p.cols() == cols, "concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  Eigen::Index at = 0;
  for (const Expr& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    ids.push_back(p.id());
  }
  return g.emit(std::move(out), parts, [ids](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    Eigen::Index at = 0;
    for (int id : ids) {
      const Eigen::Index r = g.value(id).rows();
      if (g.needs_grad(id)) g.grad_buffer(id) += d.middleRows(at, r);
      at += r;
    }
  });
}

Expr slice_cols(Expr a, int begin, int count) {
  require(begin >= 0 && count > 0 && begin + count <= a.cols(),
          "slice_cols: out of range");
  Graph& g = a.graph();
  Matrix out = a.value().middleCols(begin, count);
  const int ia = a.id();
  return g.emit(std::move(out), {a}, [ia, begin, count](Graph& g, int self) {
    g.grad_buffer(ia).middleCols(begin, count) += g.grad(self);
  });
}

Expr slice_rows(Expr a, int begin, int count) {
  require(begin >= 0 && count > 0 && begin + count <= a.rows(),
          "slice_rows: out of range");
  Graph& g = a.graph();
  Matrix out = a.value().middleRows(begin, count);
  const int ia = a.id();
  return g.emit(std::move(out), {a}, [ia, begin, count](Graph& g, int self) {
    g.grad_buffer(ia).middleRows(begin, count) += g.grad(self);
  });
}

Expr gather_rows(Expr a, std::vector<int> index) {
  Graph& g = a.graph();
  const Matrix& x = a.value();
  Matrix out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (size_t i = 0; i < index.size(); ++i) {
    const int r = index[i];
    require(r >= -1 && r < x.rows(), "gather_rows: index out of range");
    if (r < 0) {
      out.row(static_cast<Eigen::Index>(i)).setZero();
    } else {
      out.row(static_cast<Eigen::Index>(i)) = x.row(r);
    }
  }
  const int ia = a.id();
  return g.emit(std::move(out), {a},
                [ia, index = std::move(index)](Graph& g, int self) {
                  const Matrix& d = g.grad(self);
                  Matrix& ga = g.grad_buffer(ia);
                  for (size_t i = 0; i < index.size(); ++i) {
                    if (index[i] >= 0) {
                      ga.row(index[i]) += d.row(static_cast<Eigen::Index>(i));
                    }
                  }
                });
}

Expr gather_windows(Expr a, std::vector<int> index, int width) {
  require(width > 0 && index.size() % static_cast<size_t>(width) == 0,
          "gather_windows: index size is not a multiple of width");
  Graph& g = a.graph();
  const Matrix& x = a.value();
  const Eigen::Index d = x.cols();
  const auto n = static_cast<Eigen::Index>(index.size() / static_cast<size_t>(width));
  Matrix out = Matrix::Zero(n, d * width);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < width; ++j) {
      const int r = index[static_cast<size_t>(i * width + j)];
      require(r >= -1 && r < x.rows(), "gather_windows: index out of range");
      if (r >= 0) out.block(i, j * d, 1, d) = x.row(r);
    }
  }
  const int ia = a.id();
  return g.emit(std::move(out), {a},
                [ia, width, d, index = std::move(index)](Graph& g, int self) {
                  const Matrix& dy = g.grad(self);
                  Matrix& ga = g.grad_buffer(ia);
                  for (size_t k = 0; k < index.size(); ++k) {
                    if (index[k] < 0) continue;
                    const auto i = static_cast<Eigen::Index>(k / static_cast<size_t>(width));
                    const auto j = static_cast<Eigen::Index>(k % static_cast<size_t>(width));
                    ga.row(index[k]) += dy.block(i, j * d, 1, d);
                  }
                });
}

Expr segment_max(Expr a, std::vector<int> lengths) {
  Graph& g = a.graph();
  const Matrix& x = a.value();
  Matrix out(static_cast<Eigen::Index>(lengths.size()), x.cols());
  std::vector<int> arg(lengths.size() * static_cast<size_t>(x.cols()));
  int row = 0;
  for (size_t s = 0; s < lengths.size(); ++s) {
    require(lengths[s] > 0, "segment_max: empty segment");
    require(row + lengths[s] <= x.rows(), "segment_max: lengths exceed rows");
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      int best = row;
      for (int r = row + 1; r < row + lengths[s]; ++r) {
        if (x(r, c) > x(best, c)) best = r;
      }
      out(static_cast<Eigen::Index>(s), c) = x(best, c);
      arg[s * static_cast<size_t>(x.cols()) + static_cast<size_t>(c)] = best;
    }
    row += lengths[s];
  }
  require(row == x.rows(), "segment_max: lengths do not cover rows");
  const int ia = a.id();
  return g.emit(std::move(out), {a}, [ia, arg = std::move(arg)](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    Matrix& ga = g.grad_buffer(ia);
    const Eigen::Index cols = d.cols();
    for (Eigen::Index s = 0; s < d.rows(); ++s) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        ga(arg[static_cast<size_t>(s * cols + c)], c) += d(s, c);
      }
    }
  });
}

Expr select_rows(Expr when_true, Expr when_false, std::vector<char> mask) {
  require(when_true.rows() == when_false.rows() &&
              when_true.cols() == when_false.cols(),
          "select_rows: shape mismatch");
  require(static_cast<Eigen::Index>(mask.size()) == when_true.rows(),
          "select_rows: mask size mismatch");
  Graph& g = when_true.graph();
  Matrix out = when_false.value();
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out.row(static_cast<Eigen::Index>(i)) = when_true.value().row(static_cast<Eigen::Index>(i));
  }
  const int it = when_true.id(), jf = when_false.id();
  return g.emit(std::move(out), {when_true, when_false},
                [it, jf, mask = std::move(mask)](Graph& g, int self) {
                  const Matrix& d = g.grad(self);
                  for (size_t i = 0; i < mask.size(); ++i) {
                    const int target = mask[i] ? it : jf;
                    if (g.needs_grad(target)) {
                      g.grad_buffer(target).row(static_cast<Eigen::Index>(i)) +=
                          d.row(static_cast<Eigen::Index>(i));
                    }
                  }
                });
}

// ---- Building blocks --------------------------------------------------------

Expr lstm_activation(Expr preact, Expr cell) {
  const Eigen::Index h = cell.cols();
  require(preact.rows() == cell.rows() && preact.cols() == 4 * h,
          "lstm_activation: expected B x 4H preactivations");
  Graph& g = preact.graph();
  const Matrix& p = preact.value();
  auto sig = [](const auto& x) { return (1.0 / (1.0 + (-x).exp())); };
  const Eigen::ArrayXXd i = sig(p.leftCols(h).array());
  const Eigen::ArrayXXd f = sig(p.middleCols(h, h).array());
  const Eigen::ArrayXXd o = sig(p.middleCols(2 * h, h).array());
  const Eigen::ArrayXXd gg = p.rightCols(h).array().tanh();
  const Eigen::ArrayXXd c = f * cell.value().array() + i * gg;
  Matrix out(p.rows(), 2 * h);
  out.leftCols(h) = (o * c.tanh()).matrix();
  out.rightCols(h) = c.matrix();
  const int ip = preact.id(), ic = cell.id();
  return g.emit(std::move(out), {preact, cell}, [ip, ic, h, sig](Graph& g, int self) {
    const Matrix& p = g.value(ip);
    const Matrix& y = g.value(self);
    const Matrix& d = g.grad(self);
    const Eigen::ArrayXXd i = sig(p.leftCols(h).array());
    const Eigen::ArrayXXd f = sig(p.middleCols(h, h).array());
    const Eigen::ArrayXXd o = sig(p.middleCols(2 * h, h).array());
    const Eigen::ArrayXXd gg = p.rightCols(h).array().tanh();
    const Eigen::ArrayXXd tc = y.rightCols(h).array().tanh();
    const Eigen::ArrayXXd dh = d.leftCols(h).array();
    const Eigen::ArrayXXd dc = d.rightCols(h).array() + dh * o * (1.0 - tc * tc);
    if (g.needs_grad(ip)) {
      Matrix& gp = g.grad_buffer(ip);
      gp.leftCols(h).array() += dc * gg * i * (1.0 - i);
      gp.middleCols(h, h).array() += dc * g.value(ic).array() * f * (1.0 - f);
      gp.middleCols(2 * h, h).array() += dh * tc * o * (1.0 - o);
      gp.rightCols(h).array() += dc * i * (1.0 - gg * gg);
    }
    if (g.needs_grad(ic)) g.grad_buffer(ic).array() += dc * f;
  });
}

Expr bilinear_scores(Expr heads, Expr deps, Expr rel_weights, Expr shared,
                     int relations) {
  const Eigen::Index m = shared.rows();
  require(shared.cols() == m, "bilinear_scores: shared weight must be square");
  require(relations > 0 && rel_weights.rows() == relations * m &&
              rel_weights.cols() == m,
          "bilinear_scores: relation weights must stack R square blocks");
  require(heads.cols() == m && deps.cols() == m,
          "bilinear_scores: representation size mismatch");
  Graph& g = heads.graph();
  const Eigen::Index u_count = heads.rows();
  const Eigen::Index t_count = deps.rows();
  Matrix out(t_count, u_count * relations);
  for (int r = 0; r < relations; ++r) {
    const Matrix w = rel_weights.value().middleRows(r * m, m) + shared.value();
    const Matrix hm = product(heads.value(), w);   // U x m
    const Matrix s = product_nt(deps.value(), hm);  // T x U
    for (Eigen::Index u = 0; u < u_count; ++u) {
      out.col(u * relations + r) = s.col(u);
    }
  }
  const int ih = heads.id(), id = deps.id(), iw = rel_weights.id(),
            is = shared.id();
  return g.emit(std::move(out), {heads, deps, rel_weights, shared},
                [ih, id, iw, is, m, relations](Graph& g, int self) {
                  const Matrix& d = g.grad(self);
                  const Matrix& hv = g.value(ih);
                  const Matrix& dv = g.value(id);
                  const Eigen::Index u_count = hv.rows();
                  for (int r = 0; r < relations; ++r) {
                    const Matrix w =
                        g.value(iw).middleRows(r * m, m) + g.value(is);
                    Matrix gr(dv.rows(), u_count);  // T x U
                    for (Eigen::Index u = 0; u < u_count; ++u) {
                      gr.col(u) = d.col(u * relations + r);
                    }
                    const Matrix hm = hv * w;
                    const Matrix dhm = gr.transpose() * dv;  // U x m
                    if (g.needs_grad(id)) g.grad_buffer(id).noalias() += gr * hm;
                    if (g.needs_grad(ih)) {
                      g.grad_buffer(ih).noalias() += dhm * w.transpose();
                    }
                    if (g.needs_grad(iw) || g.needs_grad(is)) {
                      const Matrix dw = hv.transpose() * dhm;
                      if (g.needs_grad(iw)) {
                        g.grad_buffer(iw).middleRows(r * m, m) += dw;
                      }
                      if (g.needs_grad(is)) g.grad_buffer(is) += dw;
                    }
                  }
                });
}

// ---- Probability ------------------------------------------------------------

Matrix softmax(const Matrix& logits, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: bad axis");
  if (logits.size() == 0) throw std::invalid_argument("softmax: empty axis");
  if (axis == 1) return row_softmax(logits);
  return row_softmax(logits.transpose()).transpose();
}

Expr softmax(Expr logits) {
  require(logits.cols() > 0, "softmax: empty axis");
  Graph& g = logits.graph();
  Matrix out = row_softmax(logits.value());
  const int ia = logits.id();
  return g.emit(std::move(out), {logits}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& d = g.grad(self);
    const Eigen::VectorXd dot = d.cwiseProduct(y).rowwise().sum();
    Matrix& ga = g.grad_buffer(ia);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      ga.row(r).array() += y.row(r).array() * (d.row(r).array() - dot(r));
    }
  });
}

Expr log_softmax(Expr logits) {
  require(logits.cols() > 0, "log_softmax: empty axis");
  Graph& g = logits.graph();
  Matrix out = row_log_softmax(logits.value());
  const int ia = logits.id();
  return g.emit(std::move(out), {logits}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& d = g.grad(self);
    const Eigen::VectorXd total = d.rowwise().sum();
    Matrix& ga = g.grad_buffer(ia);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      ga.row(r).array() += d.row(r).array() - y.row(r).array().exp() * total(r);
    }
  });
}

Expr normalize_rows(Expr a) {
  Graph& g = a.graph();
  const Eigen::VectorXd sums = a.value().rowwise().sum();
  require((sums.array() != 0.0).all(), "normalize_rows: zero row sum");
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) /= sums(r);
  const int ia = a.id();
  return g.emit(std::move(out), {a}, [ia, sums](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& d = g.grad(self);
    Matrix& ga = g.grad_buffer(ia);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = d.row(r).dot(y.row(r));
      ga.row(r).array() += (d.row(r).array() - dot) / sums(r);
    }
  });
}

Expr kl_divergence(Expr p, Expr q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) {
    throw std::invalid_argument("kl_divergence: shape mismatch");
  }
  require(p.rows() > 0 && p.cols() > 0, "kl_divergence: empty input");
  Graph& g = p.graph();
  const Matrix& pv = p.value();
  const Matrix& qv = q.value();
  double total = 0.0;
  for (Eigen::Index r = 0; r < pv.rows(); ++r) {
    double row = 0.0;
    for (Eigen::Index c = 0; c < pv.cols(); ++c) {
      const double pi = pv(r, c);
      if (pi > 0.0) {
        row += pi * (floored_log(pi) - floored_log(qv(r, c)));
      }
    }
    total += row;
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(pv.rows());
  const int ip = p.id(), iq = q.id();
  return g.emit(std::move(out), {p, q}, [ip, iq](Graph& g, int self) {
    const double d = g.grad(self)(0, 0);
    const Matrix& pv = g.value(ip);
    const Matrix& qv = g.value(iq);
    const double scale = d / static_cast<double>(pv.rows());
    for (Eigen::Index r = 0; r < pv.rows(); ++r) {
      for (Eigen::Index c = 0; c < pv.cols(); ++c) {
        const double pi = pv(r, c);
        const double qi = qv(r, c);
        if (g.needs_grad(iq) && qi >= kProbabilityFloor) {
          g.grad_buffer(iq)(r, c) -= scale * pi / qi;
        }
        if (g.needs_grad(ip) && pi > 0.0) {
          g.grad_buffer(ip)(r, c) += scale * (floored_log(pi) - floored_log(qi) +
                                              (pi >= kProbabilityFloor ? 1.0 : 0.0));
        }
      }
    }
  });
}

namespace {

Expr weighted_logit_loss(Expr logits, const Matrix& targets,
                         std::span<const double> row_weights,
                         bool subtract_entropy) {
  require(targets.rows() == logits.rows() && targets.cols() == logits.cols(),
          "loss: targets shape mismatch");
  require(static_cast<Eigen::Index>(row_weights.size()) == logits.rows(),
          "loss: one weight per row required");
  Graph& g = logits.graph();
  // The KL form takes log q from the floored softmax through the same scalar
  // log as the targets, so a student whose distribution equals the targets
  // bitwise scores exactly 0.
  const Matrix ls = subtract_entropy
                        ? Matrix(row_softmax(logits.value()).unaryExpr(&floored_log))
                        : row_log_softmax(logits.value());
  double total = 0.0;
  for (Eigen::Index r = 0; r < ls.rows(); ++r) {
    const double w = row_weights[static_cast<size_t>(r)];
    if (w == 0.0) continue;
    double row = 0.0;
    for (Eigen::Index c = 0; c < ls.cols(); ++c) {
      const double t = targets(r, c);
      if (t == 0.0) continue;
      row += subtract_entropy ? t * (floored_log(t) - ls(r, c)) : -t * ls(r, c);
    }
    total += w * row;
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  const int il = logits.id();
  std::vector<double> weights(row_weights.begin(), row_weights.end());
  return g.emit(std::move(out), {logits},
                [il, targets, subtract_entropy, weights = std::move(weights)](Graph& g, int self) {
                  const double d = g.grad(self)(0, 0);
                  const Matrix probs = row_softmax(g.value(il));
                  Matrix& gl = g.grad_buffer(il);
                  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                    const double w = weights[static_cast<size_t>(r)];
                    if (w == 0.0) continue;
                    if (!subtract_entropy) {
                      gl.row(r) += d * w * (probs.row(r) * targets.row(r).sum() - targets.row(r));
                      continue;
                    }
                    // Columns whose probability is below the floor have a
                    // constant log and contribute no gradient.
                    const auto live = probs.row(r).array() >= kProbabilityFloor;
                    const Eigen::RowVectorXd t = live.select(targets.row(r).array(), 0.0);
                    gl.row(r) += d * w * (probs.row(r) * t.sum() - t);
                  }
                });
}

}  // namespace

Expr soft_cross_entropy(Expr logits, const Matrix& targets,
                        std::span<const double> row_weights) {
  return weighted_logit_loss(logits, targets, row_weights, false);
}

Expr kl_from_logits(const Matrix& targets, Expr logits,
                    std::span<const double> row_weights) {
  return weighted_logit_loss(logits, targets, row_weights, true);
}

Expr dropout(Expr a, double drop_probability, bool train, Rng& rng) {
  if (drop_probability < 0.0 || drop_probability >= 1.0) {
    throw std::invalid_argument("dropout: probability must be in [0, 1)");
  }
  if (!train || drop_probability == 0.0) return a;
  Graph& g = a.graph();
  const double keep = 1.0 - drop_probability;
  Matrix mask(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  }
  Matrix out = a.value().cwiseProduct(mask);
  const int ia = a.id();
  return g.emit(std::move(out), {a}, [ia, mask = std::move(mask)](Graph& g, int self) {
    g.grad_buffer(ia) += g.grad(self).cwiseProduct(mask);
  });
}

Expr stop_gradient(Expr a) { return a.graph().constant(a.value()); }

Matrix smoothed_targets(std::span<const int> gold, int classes, double epsilon) {
  if (classes <= 0) throw std::invalid_argument("smoothed_targets: no classes");
  Matrix t = Matrix::Constant(static_cast<Eigen::Index>(gold.size()), classes,
                              epsilon / classes);
  for (size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] < 0 || gold[i] >= classes) {
      throw std::out_of_range("gold label out of range");
    }
    t(static_cast<Eigen::Index>(i), gold[i]) += 1.0 - epsilon;
  }
  return t;
}

// ---- Verification -----------------------------------------------------------

GradCheckResult grad_check(const std::function<Expr(Graph&)>& build_loss,
                           std::span<Parameter* const> params, double step) {
  for (Parameter* p : params) p->grad.setZero();
  {
    Graph g;
    Expr loss = build_loss(g);
    g.backward(loss);
  }
  GradCheckResult result;
  auto evaluate = [&build_loss]() {
    Graph g(false);
    return build_loss(g).scalar();
  };
  for (Parameter* p : params) {
    const Matrix analytic = p->grad;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + step;
      const double up = evaluate();
      x = saved - step;
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.data()[i];
      const double denom =
          std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.checked;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_parameter = p->name;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace cvt
