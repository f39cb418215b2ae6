#ifndef CVT_GRAPH_H_
#define CVT_GRAPH_H_

// Reverse-mode differentiation over dense row-major matrices.
//
// A Graph is a tape: every operation appends a node holding its forward value
// and a closure that pushes the node's gradient into its inputs. Nodes are
// appended in execution order, so a reverse sweep is a valid topological
// order. Nodes that cannot reach a trainable leaf carry no closure, which is
// how stop_gradient, frozen parameters and teacher passes get exact zeros.

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "cvt/random.h"

namespace cvt {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Floor applied to probabilities inside the logs of kl_divergence.
inline constexpr double kProbabilityFloor = 1e-8;
// Logit offset used to exclude candidates from a softmax.
inline constexpr double kMaskedLogit = -1e30;

enum class Init { kZero, kEmbedding, kGlorot };

// Storage precision of trainable state. kFloat32 rounds parameters, momentum
// and EMA shadows to binary32 after every update; arithmetic is always 64-bit.
enum class Precision { kFloat64, kFloat32 };

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool frozen = false;
};

class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  // Embeddings: uniform in [-0.05, 0.05]. Matrices: Glorot uniform.
  // Biases/zero: zeros.
  Parameter& create(const std::string& name, int rows, int cols, Init init,
                    Rng& rng);
  Parameter& get(const std::string& name);
  Parameter* find(const std::string& name);
  const std::vector<Parameter*>& parameters() const { return ordered_; }
  std::vector<Parameter*> with_prefix(std::string_view prefix) const;
  void zero_grad();
  void set_frozen(std::string_view prefix, bool frozen);
  size_t size() const { return ordered_.size(); }
  // Sum of all parameter values with their names mixed in; used to detect
  // bitwise changes.
  uint64_t checksum(std::string_view prefix = "") const;

 private:
  std::vector<std::unique_ptr<Parameter>> owned_;
  std::vector<Parameter*> ordered_;
  std::map<std::string, Parameter*, std::less<>> index_;
};

class Graph;

// Handle to a node of a Graph.
class Expr {
 public:
  Expr() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Expr(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  // With track_gradients=false nothing is differentiable (inference mode).
  explicit Graph(bool track_gradients = true) : tracking_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const { return tracking_; }

  Expr constant(Matrix value);
  // Differentiable leaf that is not a parameter; its gradient is read with
  // grad() after backward().
  Expr input(Matrix value);
  // One node per parameter per graph; frozen parameters are constants.
  Expr param(Parameter& p);

  // Appends an operation node. The closure is kept only when one of the
  // inputs requires a gradient.
  Expr emit(Matrix value, std::initializer_list<Expr> inputs, BackwardFn fn);
  Expr emit(Matrix value, std::span<const Expr> inputs, BackwardFn fn);

  // Accumulates d(loss)/d(parameter) into Parameter::grad.
  void backward(Expr loss);

  const Matrix& value(int id) const;
  const Matrix& grad(Expr e) const { return nodes_[e.id()].grad; }
  const Matrix& grad(int id) const { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of a node, zero-initialized on first access.
  Matrix& grad_buffer(int id);
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;  // parameter value, not copied
    Matrix grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::unordered_map<Parameter*, int> param_nodes_;
  bool tracking_;
};

// ---- Elementwise and linear operations ------------------------------------

// Forward products. Entry (i, j) is one fused multiply-add chain over k, so
// it depends only on row i of a and column j of b: a sentence's outputs do
// not change bitwise with the shapes of the batch around it.
Matrix product(const Matrix& a, const Matrix& b);
Matrix product_nt(const Matrix& a, const Matrix& b);  // a * b^T

Expr matmul(Expr a, Expr b);
// a * b^T
Expr matmul_nt(Expr a, Expr b);
// Same shapes, or b a 1 x cols row broadcast over the rows of a.
Expr add(Expr a, Expr b);
Expr sub(Expr a, Expr b);
Expr cwise_mul(Expr a, Expr b);
Expr scale(Expr a, double factor);
Expr tanh(Expr a);
Expr sigmoid(Expr a);
Expr relu(Expr a);
Expr sum(Expr a);

inline Expr operator+(Expr a, Expr b) { return add(a, b); }
inline Expr operator-(Expr a, Expr b) { return sub(a, b); }
inline Expr operator*(Expr a, double s) { return scale(a, s); }

// ---- Shape operations ------------------------------------------------------

Expr concat_cols(std::span<const Expr> parts);
Expr concat_rows(std::span<const Expr> parts);
inline Expr concat_cols(std::initializer_list<Expr> parts) {
  return concat_cols(std::span<const Expr>(parts.begin(), parts.size()));
}
inline Expr concat_rows(std::initializer_list<Expr> parts) {
  return concat_rows(std::span<const Expr>(parts.begin(), parts.size()));
}
Expr slice_cols(Expr a, int begin, int count);
Expr slice_rows(Expr a, int begin, int count);
// Row i of the result is row index[i] of a; -1 yields a zero row.
Expr gather_rows(Expr a, std::vector<int> index);
// Row i of the result is the concatenation of rows index(i, 0..w-1) of a;
// -1 entries contribute zeros. Used for convolution windows.
Expr gather_windows(Expr a, std::vector<int> index, int width);
// Elementwise max over consecutive row segments.
Expr segment_max(Expr a, std::vector<int> lengths);
// Row i is taken from when_true if mask[i], else from when_false.
Expr select_rows(Expr when_true, Expr when_false, std::vector<char> mask);

// ---- Network building blocks -----------------------------------------------

// Fused LSTM nonlinearity. preact is B x 4H laid out as [i | f | o | g];
// returns B x 2H holding [o*tanh(c') | c'] with c' = f*c + i*g.
Expr lstm_activation(Expr preact, Expr cell);
// S[t, u*R + r] = heads[u] . (rel_weights_r + shared) . deps[t], where
// rel_weights stacks R square blocks vertically.
Expr bilinear_scores(Expr heads, Expr deps, Expr rel_weights, Expr shared,
                     int relations);

// ---- Probability operations ------------------------------------------------

// Softmax along axis 1 (within each row) or axis 0 (within each column).
Matrix softmax(const Matrix& logits, int axis = 1);
Expr softmax(Expr logits);
Expr log_softmax(Expr logits);
// Divides every row by its sum.
Expr normalize_rows(Expr a);

// KL(p || q) per row with 0 log 0 := 0 and both p and q floored at
// kProbabilityFloor inside the logs, averaged over rows.
Expr kl_divergence(Expr p, Expr q);

// Weighted sum over rows of the cross-entropy between fixed targets and
// softmax(logits).
Expr soft_cross_entropy(Expr logits, const Matrix& targets,
                        std::span<const double> row_weights);
// Weighted sum over rows of KL(targets || softmax(logits)), with the same
// floor and 0 log 0 convention as kl_divergence.
Expr kl_from_logits(const Matrix& targets, Expr logits,
                    std::span<const double> row_weights);

// Inverted dropout. In eval mode (train=false) returns a itself.
Expr dropout(Expr a, double drop_probability, bool train, Rng& rng);
Expr stop_gradient(Expr a);

// Cross-entropy targets (1 - eps) * onehot + eps / K.
Matrix smoothed_targets(std::span<const int> gold, int classes, double epsilon);

// ---- Verification ----------------------------------------------------------

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  size_t checked = 0;
};

// Compares backward() against central differences on every entry of params.
// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
GradCheckResult grad_check(const std::function<Expr(Graph&)>& build_loss,
                           std::span<Parameter* const> params,
                           double step = 1e-4);

}  // namespace cvt

#endif  // CVT_GRAPH_H_
