#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace sv4d::ad {

// Reverse-mode autodiff over row-major float64 matrices. A Tape owns the
// graph for one forward/backward pass; Vars are cheap handles into it.
// Everything is single-threaded and evaluation order is fixed, so repeated
// runs with identical inputs are bitwise identical.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat& val() const;
  long rows() const { return val().rows(); }
  long cols() const { return val().cols(); }
};

class Tape {
 public:
  Var leaf(Mat value);      // differentiable input (parameter)
  Var constant(Mat value);  // non-differentiable input

  const Mat& val(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Gradient of the last backward() target w.r.t. this node. Zero-filled on
  /// first touch.
  Mat& grad(int id);
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. `loss` must be
  /// 1x1. Gradients accumulate; call once per tape.
  void backward(Var loss);

  size_t size() const { return nodes_.size(); }

  // Internal: append a node. backward_fn may be empty for inputs.
  Var emit(Mat value, bool requires_grad, std::function<void(Tape&, int)> backward_fn);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::function<void(Tape&, int)> backward;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise / arithmetic ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var cmul(Var a, Var b);                  // elementwise product
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);
Var square(Var a);
Var exp_(Var a);
Var log_(Var a);                         // input must be positive
Var sqrt_(Var a);
Var sigmoid(Var a);
Var silu(Var a);
Var softplus(Var a);
Var tanh_(Var a);
Var reciprocal(Var a);                   // input must be nonzero

// ---- linear algebra ----
Var matmul(Var a, Var b);
Var transpose(Var a);

// ---- broadcasts ----
Var add_bias(Var x, Var b);              // b is [1, C], broadcast over rows
Var scale_rows(Var x, Var s);            // s is [R, 1], broadcast over cols
/// y = x * (1 + scale[g]) + shift[g] per row group; scale/shift are [G, C],
/// group holds the group index of every row.
Var group_affine(Var x, Var scale, Var shift, std::vector<int> group);

// ---- reductions / structure ----
Var sum_all(Var a);                      // [1,1]
Var mean_all(Var a);                     // [1,1]
Var rowwise_sum(Var a);                  // [R,1]
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, int start, int n);
Var concat_rows(const std::vector<Var>& parts);
/// Rows re-ordered (or duplicated) by idx; backward scatter-adds.
Var gather_rows(Var a, std::vector<int> idx);
/// Sum over consecutive row blocks of size segment; [R/segment, C].
Var segment_sum(Var a, int segment);
/// Each row repeated `times` consecutively; [R*times, C].
Var repeat_interleave_rows(Var a, int times);

// ---- neural blocks ----
Var softmax_rows(Var a);
/// Row-wise layer norm followed by affine; gamma/beta are [1, C].
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Multi-head scaled-dot attention within consecutive groups. q has G*Tq rows,
/// k and v have G*Tk rows, all with H*Dh columns.
Var grouped_attention(Var q, Var k, Var v, int groups, int tq, int tk, int heads);

/// 3D convolution over (frame, y, x), batched over views. x rows follow the
/// site order [v][f][y][x] with Cin columns; w is [Cin*kf*kh*kw, Cout]
/// (patch order [cin][df][dy][dx]); b is [1, Cout]. Zero padding, stride 1.
struct Conv3dShape {
  int views, frames, height, width;
  int in_channels, out_channels;
  int kf, kh, kw;
};
Var conv3d(Var x, Var w, Var b, const Conv3dShape& shape);

/// Multi-resolution hash grid lookup: positions [N,3] in the unit cube
/// (clamped), table [sum_l T_l, feat]. Differentiable in both the table and
/// the positions (trilinear weights).
struct HashGridMeta {
  int levels;
  int features;                // per level
  int table_size;              // entries per level (power of two)
  std::vector<int> resolutions;  // per level
};
Var hash_lookup(Var table, Var positions, const HashGridMeta& meta);

/// Volume-rendering weights w_i = T_i * (1 - exp(-sigma_i * delta_i)) for
/// consecutive blocks of `samples` rows (one block per ray). sigma and the
/// returned weights are [N*samples, 1]; delta is a constant per-row step size.
Var composite_weights(Var sigma, const std::vector<double>& delta, int samples);

// ---- gradient checking ----
/// Relative-error comparison of analytic vs central finite differences for a
/// scalar function of a parameter vector. Returns max relative error over the
/// probed coordinates.
double finite_difference_check(const std::function<double(const std::vector<Mat>&)>& f,
                               std::vector<Mat> params,
                               const std::vector<Mat>& analytic_grads, double step,
                               int probes_per_param, unsigned seed);

}  // namespace sv4d::ad
