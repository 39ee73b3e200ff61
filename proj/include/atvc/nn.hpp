#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "atvc/common.hpp"

namespace atvc {

// Rank-2 row-major tensor of doubles. Vectors are [1,n] or [n,1] as noted
// per operation.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int r, int c, double fill = 0.0);

  static Tensor row(std::vector<double> v);
  static Tensor col(std::vector<double> v);
  static Tensor scalar(double v);

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  int size() const { return rows * cols; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

std::string shape_str(const Tensor& t);
bool all_finite(const Tensor& t);

// Dense matrix kernels, row-major. The serial variants are the reference
// implementations; the plain names parallelize over output rows with OpenMP
// when `parallel` is set and the problem is big enough. Each output element
// is one serial dot product in both variants, so results are bit-identical.
void dense_nn_serial(const double* a, const double* b, double* c, int n, int k, int m);
void dense_nt_serial(const double* a, const double* b, double* c, int n, int k, int m);
void dense_tn_serial(const double* a, const double* b, double* c, int n, int k, int m);
void dense_nn(const double* a, const double* b, double* c, int n, int k, int m, bool parallel);
void dense_nt(const double* a, const double* b, double* c, int n, int k, int m, bool parallel);
void dense_tn(const double* a, const double* b, double* c, int n, int k, int m, bool parallel);

Tensor matmul_serial(const Tensor& a, const Tensor& b);

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Named parameter tensors with gradient buffers and Adam moments. Iteration
// order is the sorted name order, which makes updates and checkpoints
// deterministic.
class ParamStore {
 public:
  Tensor& create(const std::string& name, Tensor init);
  bool has(const std::string& name) const;
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;
  std::vector<std::string> names() const;
  std::size_t count() const { return entries_.size(); }

  void zero_grads();
  void adam_step(const AdamConfig& cfg);
  std::int64_t adam_steps() const { return step_; }

  // Flat-array views of everything Adam needs to resume bit-exactly.
  std::map<std::string, Tensor> to_arrays() const;
  static ParamStore from_arrays(const std::map<std::string, Tensor>& arrays);

 private:
  struct Entry {
    Tensor value, grad, m, v;
  };
  std::map<std::string, Entry> entries_;
  std::int64_t step_ = 0;
};

// Versioned checkpoint container: named rank-2 arrays, little-endian, with
// length-prefixed names. Round-trips bit-exactly.
void save_arrays(const std::string& path, const std::map<std::string, Tensor>& arrays);
std::map<std::string, Tensor> load_arrays(const std::string& path);

struct ValueRef {
  int idx = -1;
};

// Reverse-mode tape. Ops append nodes in topological order; backward walks
// the nodes once in reverse, so no graph search is needed. Constructing the
// tape with grads_enabled=false runs the same forward code without recording
// backward closures or allocating gradient buffers.
class Tape {
 public:
  explicit Tape(bool grads_enabled = true, bool parallel_kernels = true);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grads_enabled() const { return grads_enabled_; }

  ValueRef constant(Tensor t);
  ValueRef param(ParamStore& store, const std::string& name);

  const Tensor& val(ValueRef v) const;

  ValueRef matmul(ValueRef a, ValueRef b);
  ValueRef add(ValueRef a, ValueRef b);
  ValueRef sub(ValueRef a, ValueRef b);
  ValueRef mul(ValueRef a, ValueRef b);
  ValueRef minimum(ValueRef a, ValueRef b);
  ValueRef maximum(ValueRef a, ValueRef b);
  ValueRef add_row(ValueRef a, ValueRef row);
  ValueRef mul_col(ValueRef a, ValueRef col);
  ValueRef tanh(ValueRef a);
  ValueRef exp(ValueRef a);
  ValueRef log(ValueRef a);
  ValueRef sqrt(ValueRef a);
  ValueRef square(ValueRef a);
  ValueRef recip(ValueRef a);
  ValueRef affine(ValueRef a, double scale, double shift);
  ValueRef clamp(ValueRef a, double lo, double hi);
  ValueRef softmax_rows(ValueRef a);
  ValueRef log_softmax_rows(ValueRef a);
  ValueRef concat_cols(const std::vector<ValueRef>& parts);
  ValueRef slice_cols(ValueRef a, int c0, int c1);
  ValueRef gather_rows(ValueRef a, std::vector<int> idx);
  ValueRef select_cols(ValueRef a, std::vector<int> col_per_row);
  ValueRef row_sum(ValueRef a);
  ValueRef sum_all(ValueRef a);
  ValueRef mean_all(ValueRef a);

  // z = mu + sd * eps with eps ~ N(0, I); sd is the standard deviation and
  // must be positive elementwise. The fixed-eps overload replays a given
  // noise tensor (common random numbers).
  ValueRef reparam_sample(ValueRef mu, ValueRef sd, Rng& rng);
  ValueRef reparam_sample(ValueRef mu, ValueRef sd, Tensor eps);

  // Accumulates d(loss)/d(param) into each reachable parameter's gradient
  // buffer, then drops all nodes. loss must be [1,1].
  void backward(ValueRef loss);

  void clear();
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    std::function<void(Tape&, int)> back;
    ParamStore* store = nullptr;
    std::string pname;
  };

  int push(Tensor val);
  Tensor& grad_at(int idx) { return nodes_[idx].grad; }
  const Tensor& val_at(int idx) const { return nodes_[idx].val; }
  void check(ValueRef v) const;
  template <class F, class DF>
  ValueRef unary(ValueRef a, F f, DF df);

  std::vector<Node> nodes_;
  bool grads_enabled_;
  bool parallel_;
};

// Parameter initializers.
Tensor xavier_uniform(int in_dim, int out_dim, Rng& rng);
Tensor scaled_normal(int rows, int cols, double scale, Rng& rng);

}  // namespace atvc
