#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "parshare/tensor.hpp"

namespace parshare {

// Sentinel used by attention masks and softmax inputs.
template <typename T>
constexpr T masked_value() {
  return -std::numeric_limits<T>::infinity();
}

struct GraphOptions {
  bool training = false;  // enables dropout
  bool record = true;     // append backward rules to the tape
  std::uint64_t seed = 0; // dropout mask stream
};

// One forward pass plus its reverse-mode tape. The tape is append-only in
// forward order and backward() walks it once in reverse. A graph instance is
// confined to a single thread.
//
// Matrix operands are rank 2 ([rows x cols]) or rank 3 ([batch x rows x cols]);
// row-wise operations act on the last axis of any rank.
template <typename T>
class Graph {
 public:
  explicit Graph(GraphOptions options = {});

  bool training() const { return options_.training; }
  // True once a dropout with p > 0 has been applied in training mode.
  bool stochastic() const { return stochastic_; }
  std::size_t tape_size() const { return tape_.size(); }

  // a[m x k] * b[k x n], or a[m x k] * b[n x k]^T when transpose_b is set.
  // Rank-3 operands multiply batch-wise.
  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);
  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
  // Adds a length-cols vector to every row.
  Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& bias);
  // Adds a constant (non-differentiable) tensor of identical shape.
  Tensor<T> add_constant(const Tensor<T>& a, const Tensor<T>& constant);
  Tensor<T> scale(const Tensor<T>& a, T factor);
  Tensor<T> relu(const Tensor<T>& x);
  Tensor<T> softmax_rows(const Tensor<T>& x);
  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                       T eps = T(1e-6));
  Tensor<T> dropout(const Tensor<T>& x, double p);
  // Rows of table selected by ids -> [ids.size() x table.cols()].
  Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids);
  // [batch*time x heads*width] -> [batch*heads x time x width].
  Tensor<T> split_heads(const Tensor<T>& x, std::size_t batch, std::size_t heads);
  // Inverse of split_heads.
  Tensor<T> merge_heads(const Tensor<T>& x, std::size_t batch, std::size_t heads);
  // scores[batch*heads x q x k] + mask[batch x q x k]; mask entries are 0 or
  // masked_value(). The mask receives no gradient.
  Tensor<T> masked_fill(const Tensor<T>& scores, const Tensor<T>& mask, std::size_t heads);
  Tensor<T> sum(const Tensor<T>& x);
  // Sum over rows whose target != ignore_id of the cross-entropy between
  // softmax(logits row) and (1 - eps) * onehot(target) + eps / V.
  Tensor<T> smoothed_cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                                   T eps, int ignore_id);

  // Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
  // Intermediate gradients are reset first, so repeated calls add repeated
  // contributions to the leaves only.
  void backward(const Tensor<T>& loss);

 private:
  struct Node {
    const char* op;
    std::shared_ptr<TensorStorage<T>> output;
    std::function<void()> backward;
  };

  Tensor<T> make_output(Shape shape, std::vector<T> values,
                        std::initializer_list<const Tensor<T>*> inputs);
  void record(const char* op, const Tensor<T>& output, std::function<void()> rule);
  double next_uniform();

  GraphOptions options_;
  std::mt19937_64 rng_;
  bool stochastic_ = false;
  std::vector<Node> tape_;
};

extern template class Graph<float>;
extern template class Graph<double>;

// Central-difference gradient check. loss_fn must build its graph on the
// supplied Graph and return a scalar; it is re-run once per perturbed
// coordinate. Returns the worst relative error per parameter. Throws
// ConfigError if the graph applied active dropout.
struct GradCheckReport {
  std::vector<double> max_relative_error;  // one per parameter
  double worst() const;
};

using LossBuilder = std::function<Tensor<double>(Graph<double>&)>;

GradCheckReport grad_check(const LossBuilder& loss_fn, std::vector<Tensor<double>> parameters,
                           double h = 1e-3, GraphOptions options = {});

double grad_check(const LossBuilder& loss_fn, Tensor<double> parameter, double h = 1e-3,
                  GraphOptions options = {});

}  // namespace parshare
