#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

// Define-by-run reverse-mode automatic differentiation on a per-step tape.
// A Graph owns all node storage; Tensor is a cheap (graph, node-id) handle.
// backward() may be called exactly once per graph and only on a scalar root.

namespace uada {

struct GrlCoefficient {
  enum class Mode { constant, scheduled };
  Mode mode = Mode::constant;
  double lambda = 0.1;   // constant mode
  double alpha = 0.1;    // scheduled mode amplitude
  double gamma = 10.0;   // scheduled mode steepness

  // Scheduled: alpha * (2 / (1 + exp(-gamma * p)) - 1); 0 at p=0,
  // monotone in p, saturating at alpha.
  double value(double progress) const;

  static GrlCoefficient constant(double lambda);
  static GrlCoefficient scheduled(double alpha, double gamma = 10.0);
};

class Graph;

class Tensor {
 public:
  Tensor() = default;
  const std::vector<double>& data() const;
  const std::vector<double>& grad() const;
  const std::vector<std::size_t>& shape() const;
  std::size_t size() const;
  int node_id() const { return id_; }
  bool requires_grad() const;
  bool valid() const { return g_ != nullptr; }
  // Scalar convenience: value of a size-1 tensor.
  double item() const;

 private:
  friend class Graph;
  Tensor(Graph* g, int id) : g_(g), id_(id) {}
  Graph* g_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor input(std::vector<double> data, std::vector<std::size_t> shape,
               bool requires_grad);
  Tensor constant(std::vector<double> data, std::vector<std::size_t> shape);
  Tensor scalar(double v);

  // Matrix product [m x k] . [k x n] -> [m x n].
  Tensor matmul(Tensor a, Tensor b);

  // Elementwise; operands must have equal shapes, or either may be a
  // size-1 scalar that broadcasts against the other.
  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);

  Tensor square(Tensor a);
  Tensor leaky_relu(Tensor a, double slope = 0.01);
  Tensor sigmoid(Tensor a);
  Tensor log(Tensor a);  // domain error on any element <= 0
  Tensor abs(Tensor a);
  Tensor scalar_mul(Tensor a, double c);
  Tensor clamp(Tensor a, double lo, double hi);

  Tensor sum(Tensor a);   // -> size-1
  Tensor mean(Tensor a);  // -> size-1

  // Concatenation along axis. Rank-1: axis 0. Rank-2: axis 0 stacks rows,
  // axis 1 stacks columns; the non-concat dimension must agree.
  Tensor concat(Tensor a, Tensor b, std::size_t axis = 0);

  // Gradient reversal: forward is the bitwise identity; backward multiplies
  // the upstream gradient by -coeff.value(progress).
  Tensor grl(Tensor a, GrlCoefficient coeff, double progress);

  // im2col over a row-major [h*w x c] grid: 3x3 neighborhood with zero
  // padding -> [h*w x 9c]; backward scatter-adds.
  Tensor patches3x3(Tensor a, std::size_t h, std::size_t w, std::size_t c);

  // [f] -> [rows x f]; backward sums over rows.
  Tensor broadcast_rows(Tensor v, std::size_t rows);
  // Row gather by index (duplicates allowed); backward scatter-adds.
  Tensor gather_rows(Tensor a, std::vector<std::size_t> idx);
  // [n x f] -> [f] column means; backward spreads g/n to every row.
  Tensor mean_rows(Tensor a);

  // Exactly once per graph, root must be scalar. Afterwards every
  // requires-grad node with id <= root's has a gradient buffer (zeros if
  // disconnected from the root).
  void backward(Tensor root);
  bool backward_done() const { return backward_done_; }
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  friend class Tensor;
  struct Node {
    std::vector<double> data;
    std::vector<double> grad;
    std::vector<std::size_t> shape;
    bool requires_grad = false;
    std::function<void(Graph&, int)> backward_fn;  // id of this node
  };

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Tensor make(std::vector<double> data, std::vector<std::size_t> shape,
              bool requires_grad, std::function<void(Graph&, int)> bwd);
  void check_same_graph(Tensor t) const;
  std::vector<double>& grad_buf(int id);

  Tensor binary_elementwise(Tensor a, Tensor b, int kind);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Max over coordinates of |analytic - numeric| / max(1e-3, |analytic|,
// |numeric|), numeric by central differences with the given step. f must
// build a scalar from the leaf it is handed.
double grad_check(const std::function<Tensor(Graph&, Tensor)>& f,
                  const std::vector<double>& x,
                  const std::vector<std::size_t>& shape, double eps = 1e-5);

}  // namespace uada
