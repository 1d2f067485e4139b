#include "sv4d/ad.hpp"

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>

namespace sv4d::ad {

namespace {

void check(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(std::string("ad: ") + what);
}

void same_tape(Var a, Var b) { check(a.tape == b.tape, "vars from different tapes"); }

}  // namespace

const Mat& Var::val() const { return tape->val(id); }

Var Tape::leaf(Mat value) { return emit(std::move(value), true, nullptr); }

Var Tape::constant(Mat value) { return emit(std::move(value), false, nullptr); }

Mat& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::emit(Mat value, bool requires_grad, std::function<void(Tape&, int)> backward_fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward = std::move(backward_fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var loss) {
  check(loss.tape == this, "backward: var from another tape");
  check(val(loss.id).rows() == 1 && val(loss.id).cols() == 1, "backward: loss must be 1x1");
  grad(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward) continue;
    if (n.grad.size() == 0) continue;  // node did not influence the loss
    n.backward(*this, id);
  }
}

namespace {

// Helper that packages the common pattern: compute value, remember parent ids,
// accumulate into parents if they require grad.
bool any_requires(std::initializer_list<Var> vars) {
  for (Var v : vars)
    if (v.tape->requires_grad(v.id)) return true;
  return false;
}

}  // namespace

Var add(Var a, Var b) {
  same_tape(a, b);
  check(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols(), "add: shape");
  Tape& t = *a.tape;
  return t.emit(a.val() + b.val(), any_requires({a, b}), [a, b](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(a.id)) t.grad(a.id) += g;
    if (t.requires_grad(b.id)) t.grad(b.id) += g;
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  check(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols(), "sub: shape");
  Tape& t = *a.tape;
  return t.emit(a.val() - b.val(), any_requires({a, b}), [a, b](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(a.id)) t.grad(a.id) += g;
    if (t.requires_grad(b.id)) t.grad(b.id) -= g;
  });
}

Var cmul(Var a, Var b) {
  same_tape(a, b);
  check(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols(), "cmul: shape");
  Tape& t = *a.tape;
  return t.emit(a.val().cwiseProduct(b.val()), any_requires({a, b}), [a, b](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(a.id)) t.grad(a.id) += g.cwiseProduct(t.val(b.id));
    if (t.requires_grad(b.id)) t.grad(b.id) += g.cwiseProduct(t.val(a.id));
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.emit(a.val() * s, t.requires_grad(a.id), [a, s](Tape& t, int self) {
    t.grad(a.id) += t.grad(self) * s;
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = *a.tape;
  return t.emit(a.val().array() + s, t.requires_grad(a.id), [a](Tape& t, int self) {
    t.grad(a.id) += t.grad(self);
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var square(Var a) {
  Tape& t = *a.tape;
  return t.emit(a.val().array().square(), t.requires_grad(a.id), [a](Tape& t, int self) {
    t.grad(a.id) += 2.0 * t.grad(self).cwiseProduct(t.val(a.id));
  });
}

Var exp_(Var a) {
  Tape& t = *a.tape;
  Mat v = a.val().array().exp();
  return t.emit(std::move(v), t.requires_grad(a.id), [a](Tape& t, int self) {
    t.grad(a.id) += t.grad(self).cwiseProduct(t.val(self));
  });
}

Var log_(Var a) {
  Tape& t = *a.tape;
  return t.emit(a.val().array().log(), t.requires_grad(a.id), [a](Tape& t, int self) {
    t.grad(a.id) += t.grad(self).cwiseQuotient(t.val(a.id));
  });
}

Var sqrt_(Var a) {
  Tape& t = *a.tape;
  return t.emit(a.val().array().sqrt(), t.requires_grad(a.id), [a](Tape& t, int self) {
    t.grad(a.id) += (t.grad(self).array() * 0.5 / t.val(self).array().max(1e-300)).matrix();
  });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Mat v = (1.0 / (1.0 + (-a.val().array()).exp()));
  return t.emit(std::move(v), t.requires_grad(a.id), [a](Tape& t, int self) {
    const Mat& y = t.val(self);
    t.grad(a.id).array() += t.grad(self).array() * y.array() * (1.0 - y.array());
  });
}

Var silu(Var a) {
  Tape& t = *a.tape;
  auto s = std::make_shared<Mat>(1.0 / (1.0 + (-a.val().array()).exp()));
  Mat v = a.val().cwiseProduct(*s);
  return t.emit(std::move(v), t.requires_grad(a.id), [a, s](Tape& t, int self) {
    // d(x*s)/dx = s + x*s*(1-s)
    t.grad(a.id).array() +=
        t.grad(self).array() *
        (s->array() + t.val(a.id).array() * s->array() * (1.0 - s->array()));
  });
}

Var softplus(Var a) {
  Tape& t = *a.tape;
  // log(1+exp(x)) computed stably
  Mat v = a.val().unaryExpr([](double x) {
    return x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
  });
  auto s = std::make_shared<Mat>(1.0 / (1.0 + (-a.val().array()).exp()));
  return t.emit(std::move(v), t.requires_grad(a.id), [a, s](Tape& t, int self) {
    t.grad(a.id).array() += t.grad(self).array() * s->array();
  });
}

Var tanh_(Var a) {
  Tape& t = *a.tape;
  return t.emit(a.val().array().tanh(), t.requires_grad(a.id), [a](Tape& t, int self) {
    const Mat& y = t.val(self);
    t.grad(a.id).array() += t.grad(self).array() * (1.0 - y.array().square());
  });
}

Var reciprocal(Var a) {
  Tape& t = *a.tape;
  return t.emit(a.val().cwiseInverse(), t.requires_grad(a.id), [a](Tape& t, int self) {
    const Mat& y = t.val(self);
    t.grad(a.id).array() -= t.grad(self).array() * y.array().square();
  });
}

Var matmul(Var a, Var b) {
  same_tape(a, b);
  check(a.val().cols() == b.val().rows(), "matmul: inner dims");
  Tape& t = *a.tape;
  return t.emit(a.val() * b.val(), any_requires({a, b}), [a, b](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(a.id)) t.grad(a.id) += g * t.val(b.id).transpose();
    if (t.requires_grad(b.id)) t.grad(b.id) += t.val(a.id).transpose() * g;
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  return t.emit(a.val().transpose(), t.requires_grad(a.id), [a](Tape& t, int self) {
    t.grad(a.id) += t.grad(self).transpose();
  });
}

Var add_bias(Var x, Var b) {
  same_tape(x, b);
  check(b.val().rows() == 1 && b.val().cols() == x.val().cols(), "add_bias: shape");
  Tape& t = *x.tape;
  Mat v = x.val().rowwise() + b.val().row(0);
  return t.emit(std::move(v), any_requires({x, b}), [x, b](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(x.id)) t.grad(x.id) += g;
    if (t.requires_grad(b.id)) t.grad(b.id) += g.colwise().sum();
  });
}

Var scale_rows(Var x, Var s) {
  same_tape(x, s);
  check(s.val().cols() == 1 && s.val().rows() == x.val().rows(), "scale_rows: shape");
  Tape& t = *x.tape;
  Mat v = x.val().array().colwise() * s.val().col(0).array();
  return t.emit(std::move(v), any_requires({x, s}), [x, s](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.requires_grad(x.id))
      t.grad(x.id).array() += g.array().colwise() * t.val(s.id).col(0).array();
    if (t.requires_grad(s.id))
      t.grad(s.id).col(0) += g.cwiseProduct(t.val(x.id)).rowwise().sum();
  });
}

Var group_affine(Var x, Var sc, Var sh, std::vector<int> group) {
  same_tape(x, sc);
  same_tape(x, sh);
  const long rows = x.val().rows(), cols = x.val().cols();
  check(static_cast<long>(group.size()) == rows, "group_affine: group size");
  check(sc.val().cols() == cols && sh.val().cols() == cols, "group_affine: cols");
  Tape& t = *x.tape;
  Mat v(rows, cols);
  for (long r = 0; r < rows; ++r)
    v.row(r) = x.val().row(r).cwiseProduct(Mat::Ones(1, cols) + sc.val().row(group[r])) +
               sh.val().row(group[r]);
  return t.emit(std::move(v), any_requires({x, sc, sh}),
                [x, sc, sh, group = std::move(group)](Tape& t, int self) {
                  const Mat& g = t.grad(self);
                  const long cols = g.cols();
                  for (long r = 0; r < g.rows(); ++r) {
                    const int gi = group[r];
                    if (t.requires_grad(x.id))
                      t.grad(x.id).row(r) +=
                          g.row(r).cwiseProduct(Mat::Ones(1, cols) + t.val(sc.id).row(gi));
                    if (t.requires_grad(sc.id))
                      t.grad(sc.id).row(gi) += g.row(r).cwiseProduct(t.val(x.id).row(r));
                    if (t.requires_grad(sh.id)) t.grad(sh.id).row(gi) += g.row(r);
                  }
                });
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  Mat v(1, 1);
  v(0, 0) = a.val().sum();
  return t.emit(std::move(v), t.requires_grad(a.id), [a](Tape& t, int self) {
    t.grad(a.id).array() += t.grad(self)(0, 0);
  });
}

Var mean_all(Var a) {
  const double n = static_cast<double>(a.val().size());
  return scale(sum_all(a), 1.0 / n);
}

Var rowwise_sum(Var a) {
  Tape& t = *a.tape;
  Mat v = a.val().rowwise().sum();
  return t.emit(std::move(v), t.requires_grad(a.id), [a](Tape& t, int self) {
    t.grad(a.id).colwise() += t.grad(self).col(0);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_cols: empty");
  Tape& t = *parts.front().tape;
  long cols = 0;
  const long rows = parts.front().val().rows();
  bool req = false;
  for (Var p : parts) {
    check(p.val().rows() == rows, "concat_cols: row mismatch");
    cols += p.val().cols();
    req = req || t.requires_grad(p.id);
  }
  Mat v(rows, cols);
  long at = 0;
  for (Var p : parts) {
    v.middleCols(at, p.val().cols()) = p.val();
    at += p.val().cols();
  }
  return t.emit(std::move(v), req, [parts](Tape& t, int self) {
    const Mat& g = t.grad(self);
    long at = 0;
    for (Var p : parts) {
      const long n = t.val(p.id).cols();
      if (t.requires_grad(p.id)) t.grad(p.id) += g.middleCols(at, n);
      at += n;
    }
  });
}

Var slice_cols(Var a, int start, int n) {
  check(start >= 0 && start + n <= a.val().cols(), "slice_cols: range");
  Tape& t = *a.tape;
  Mat v = a.val().middleCols(start, n);
  return t.emit(std::move(v), t.requires_grad(a.id), [a, start, n](Tape& t, int self) {
    t.grad(a.id).middleCols(start, n) += t.grad(self);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_rows: empty");
  Tape& t = *parts.front().tape;
  long rows = 0;
  const long cols = parts.front().val().cols();
  bool req = false;
  for (Var p : parts) {
    check(p.val().cols() == cols, "concat_rows: col mismatch");
    rows += p.val().rows();
    req = req || t.requires_grad(p.id);
  }
  Mat v(rows, cols);
  long at = 0;
  for (Var p : parts) {
    v.middleRows(at, p.val().rows()) = p.val();
    at += p.val().rows();
  }
  return t.emit(std::move(v), req, [parts](Tape& t, int self) {
    const Mat& g = t.grad(self);
    long at = 0;
    for (Var p : parts) {
      const long n = t.val(p.id).rows();
      if (t.requires_grad(p.id)) t.grad(p.id) += g.middleRows(at, n);
      at += n;
    }
  });
}

Var gather_rows(Var a, std::vector<int> idx) {
  Tape& t = *a.tape;
  Mat v(static_cast<long>(idx.size()), a.val().cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    check(idx[i] >= 0 && idx[i] < a.val().rows(), "gather_rows: index");
    v.row(static_cast<long>(i)) = a.val().row(idx[i]);
  }
  return t.emit(std::move(v), t.requires_grad(a.id),
                [a, idx = std::move(idx)](Tape& t, int self) {
                  const Mat& g = t.grad(self);
                  Mat& ga = t.grad(a.id);
                  for (size_t i = 0; i < idx.size(); ++i)
                    ga.row(idx[i]) += g.row(static_cast<long>(i));
                });
}

Var segment_sum(Var a, int segment) {
  check(segment >= 1 && a.val().rows() % segment == 0, "segment_sum: segment");
  Tape& t = *a.tape;
  const long out_rows = a.val().rows() / segment;
  Mat v = Mat::Zero(out_rows, a.val().cols());
  for (long r = 0; r < a.val().rows(); ++r) v.row(r / segment) += a.val().row(r);
  return t.emit(std::move(v), t.requires_grad(a.id), [a, segment](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& ga = t.grad(a.id);
    for (long r = 0; r < ga.rows(); ++r) ga.row(r) += g.row(r / segment);
  });
}

Var repeat_interleave_rows(Var a, int times) {
  check(times >= 1, "repeat_interleave_rows: times");
  Tape& t = *a.tape;
  Mat v(a.val().rows() * times, a.val().cols());
  for (long r = 0; r < a.val().rows(); ++r)
    for (int k = 0; k < times; ++k) v.row(r * times + k) = a.val().row(r);
  return t.emit(std::move(v), t.requires_grad(a.id), [a, times](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& ga = t.grad(a.id);
    for (long r = 0; r < ga.rows(); ++r)
      for (int k = 0; k < times; ++k) ga.row(r) += g.row(r * times + k);
  });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  Mat v = a.val();
  for (long r = 0; r < v.rows(); ++r) {
    const double m = v.row(r).maxCoeff();
    v.row(r) = (v.row(r).array() - m).exp();
    v.row(r) /= v.row(r).sum();
  }
  return t.emit(std::move(v), t.requires_grad(a.id), [a](Tape& t, int self) {
    const Mat& p = t.val(self);
    const Mat& g = t.grad(self);
    Mat& ga = t.grad(a.id);
    for (long r = 0; r < p.rows(); ++r) {
      const double dot = g.row(r).cwiseProduct(p.row(r)).sum();
      ga.row(r) += (g.row(r).array() - dot).matrix().cwiseProduct(p.row(r));
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  same_tape(x, gamma);
  same_tape(x, beta);
  const long cols = x.val().cols();
  check(gamma.val().cols() == cols && beta.val().cols() == cols, "layer_norm: shape");
  Tape& t = *x.tape;
  Mat xhat(x.val().rows(), cols);
  Mat inv_std(x.val().rows(), 1);
  for (long r = 0; r < x.val().rows(); ++r) {
    const double mu = x.val().row(r).mean();
    const double var = (x.val().row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(r, 0) = is;
    xhat.row(r) = (x.val().row(r).array() - mu) * is;
  }
  Mat v = (xhat.array().rowwise() * gamma.val().row(0).array()).rowwise() +
          beta.val().row(0).array();
  // keep xhat/inv_std alive for the backward pass
  auto ctx = std::make_shared<std::pair<Mat, Mat>>(std::move(xhat), std::move(inv_std));
  return t.emit(std::move(v), any_requires({x, gamma, beta}),
                [x, gamma, beta, ctx](Tape& t, int self) {
                  const Mat& g = t.grad(self);
                  const Mat& xhat = ctx->first;
                  const Mat& inv_std = ctx->second;
                  const long n = xhat.cols();
                  if (t.requires_grad(gamma.id))
                    t.grad(gamma.id) += g.cwiseProduct(xhat).colwise().sum();
                  if (t.requires_grad(beta.id)) t.grad(beta.id) += g.colwise().sum();
                  if (t.requires_grad(x.id)) {
                    Mat& gx = t.grad(x.id);
                    for (long r = 0; r < xhat.rows(); ++r) {
                      const Eigen::RowVectorXd gy =
                          g.row(r).cwiseProduct(t.val(gamma.id).row(0));
                      const double mean_gy = gy.mean();
                      const double mean_gy_xhat = gy.cwiseProduct(xhat.row(r)).mean();
                      gx.row(r) += inv_std(r, 0) *
                                   (gy.array() - mean_gy - xhat.row(r).array() * mean_gy_xhat)
                                       .matrix();
                      (void)n;
                    }
                  }
                });
}

Var grouped_attention(Var q, Var k, Var v, int groups, int tq, int tk, int heads) {
  same_tape(q, k);
  same_tape(q, v);
  const long d_model = q.val().cols();
  check(d_model % heads == 0, "grouped_attention: heads must divide model dim");
  check(q.val().rows() == static_cast<long>(groups) * tq, "grouped_attention: q rows");
  check(k.val().rows() == static_cast<long>(groups) * tk, "grouped_attention: k rows");
  check(v.val().rows() == static_cast<long>(groups) * tk, "grouped_attention: v rows");
  const long dh = d_model / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tape& t = *q.tape;

  Mat out = Mat::Zero(q.val().rows(), d_model);
  auto probs = std::make_shared<std::vector<Mat>>();
  probs->reserve(static_cast<size_t>(groups) * heads);
  for (int g = 0; g < groups; ++g) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = q.val().block(static_cast<long>(g) * tq, h * dh, tq, dh);
      const auto kb = k.val().block(static_cast<long>(g) * tk, h * dh, tk, dh);
      const auto vb = v.val().block(static_cast<long>(g) * tk, h * dh, tk, dh);
      Mat s = qb * kb.transpose() * inv_sqrt;
      for (long r = 0; r < s.rows(); ++r) {
        const double m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(static_cast<long>(g) * tq, h * dh, tq, dh) = s * vb;
      probs->push_back(std::move(s));
    }
  }
  return t.emit(std::move(out), any_requires({q, k, v}),
                [q, k, v, groups, tq, tk, heads, dh, inv_sqrt, probs](Tape& t, int self) {
                  const Mat& g_out = t.grad(self);
                  for (int g = 0; g < groups; ++g) {
                    for (int h = 0; h < heads; ++h) {
                      const Mat& p = (*probs)[static_cast<size_t>(g) * heads + h];
                      const auto qb = t.val(q.id).block(static_cast<long>(g) * tq, h * dh, tq, dh);
                      const auto kb = t.val(k.id).block(static_cast<long>(g) * tk, h * dh, tk, dh);
                      const auto vb = t.val(v.id).block(static_cast<long>(g) * tk, h * dh, tk, dh);
                      const auto go = g_out.block(static_cast<long>(g) * tq, h * dh, tq, dh);
                      if (t.requires_grad(v.id))
                        t.grad(v.id).block(static_cast<long>(g) * tk, h * dh, tk, dh) +=
                            p.transpose() * go;
                      if (t.requires_grad(q.id) || t.requires_grad(k.id)) {
                        Mat dp = go * vb.transpose();  // [tq, tk]
                        Mat ds(tq, tk);
                        for (long r = 0; r < tq; ++r) {
                          const double dot = dp.row(r).cwiseProduct(p.row(r)).sum();
                          ds.row(r) = (dp.row(r).array() - dot).matrix().cwiseProduct(p.row(r));
                        }
                        ds *= inv_sqrt;
                        if (t.requires_grad(q.id))
                          t.grad(q.id).block(static_cast<long>(g) * tq, h * dh, tq, dh) +=
                              ds * kb;
                        if (t.requires_grad(k.id))
                          t.grad(k.id).block(static_cast<long>(g) * tk, h * dh, tk, dh) +=
                              ds.transpose() * qb;
                      }
                    }
                  }
                });
}

namespace {

struct Im2ColPlan {
  std::vector<long> src;  // per (site, slot): source row, or -1 for zero pad
  long n_sites;
  long patch_cols;  // Cin * kf*kh*kw
};

Im2ColPlan build_conv_plan(const Conv3dShape& s) {
  Im2ColPlan plan;
  plan.n_sites = static_cast<long>(s.views) * s.frames * s.height * s.width;
  plan.patch_cols = static_cast<long>(s.in_channels) * s.kf * s.kh * s.kw;
  plan.src.resize(plan.n_sites * s.kf * s.kh * s.kw);
  const int of = s.kf / 2, oh = s.kh / 2, ow = s.kw / 2;
  long at = 0;
  for (int v = 0; v < s.views; ++v)
    for (int f = 0; f < s.frames; ++f)
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
          for (int df = 0; df < s.kf; ++df)
            for (int dy = 0; dy < s.kh; ++dy)
              for (int dx = 0; dx < s.kw; ++dx) {
                const int ff = f + df - of, yy = y + dy - oh, xx = x + dx - ow;
                long row = -1;
                if (ff >= 0 && ff < s.frames && yy >= 0 && yy < s.height && xx >= 0 &&
                    xx < s.width)
                  row = ((static_cast<long>(v) * s.frames + ff) * s.height + yy) * s.width + xx;
                plan.src[at++] = row;
              }
  return plan;
}

}  // namespace

Var conv3d(Var x, Var w, Var b, const Conv3dShape& shape) {
  same_tape(x, w);
  same_tape(x, b);
  const long kvol = static_cast<long>(shape.kf) * shape.kh * shape.kw;
  check(x.val().cols() == shape.in_channels, "conv3d: input channels");
  check(w.val().rows() == shape.in_channels * kvol && w.val().cols() == shape.out_channels,
        "conv3d: weight shape");
  check(b.val().rows() == 1 && b.val().cols() == shape.out_channels, "conv3d: bias shape");
  auto plan = std::make_shared<Im2ColPlan>(build_conv_plan(shape));
  check(x.val().rows() == plan->n_sites, "conv3d: site count");

  // Patch matrix [sites, Cin*kvol], patch column order [cin][df][dy][dx].
  auto patches = std::make_shared<Mat>(Mat::Zero(plan->n_sites, plan->patch_cols));
  const int cin = shape.in_channels;
  for (long site = 0; site < plan->n_sites; ++site) {
    const long* src = plan->src.data() + site * kvol;
    for (long k = 0; k < kvol; ++k) {
      if (src[k] < 0) continue;
      for (int c = 0; c < cin; ++c)
        (*patches)(site, static_cast<long>(c) * kvol + k) = x.val()(src[k], c);
    }
  }
  Tape& t = *x.tape;
  Mat out = (*patches) * w.val();
  out.rowwise() += b.val().row(0);
  return t.emit(std::move(out), any_requires({x, w, b}),
                [x, w, b, plan, patches, kvol, cin](Tape& t, int self) {
                  const Mat& g = t.grad(self);
                  if (t.requires_grad(w.id)) t.grad(w.id) += patches->transpose() * g;
                  if (t.requires_grad(b.id)) t.grad(b.id) += g.colwise().sum();
                  if (t.requires_grad(x.id)) {
                    const Mat dpatch = g * t.val(w.id).transpose();  // [sites, Cin*kvol]
                    Mat& gx = t.grad(x.id);
                    for (long site = 0; site < plan->n_sites; ++site) {
                      const long* src = plan->src.data() + site * kvol;
                      for (long k = 0; k < kvol; ++k) {
                        if (src[k] < 0) continue;
                        for (int c = 0; c < cin; ++c)
                          gx(src[k], c) += dpatch(site, static_cast<long>(c) * kvol + k);
                      }
                    }
                  }
                });
}

namespace {

inline uint32_t hash_corner(uint32_t ix, uint32_t iy, uint32_t iz, int table_size) {
  // XOR of coordinate-times-prime, modulo table size (power of two).
  const uint32_t h = ix * 1u ^ iy * 2654435761u ^ iz * 805459861u;
  return h & static_cast<uint32_t>(table_size - 1);
}

}  // namespace

Var hash_lookup(Var table, Var positions, const HashGridMeta& meta) {
  same_tape(table, positions);
  check(positions.val().cols() == 3, "hash_lookup: positions must be [N,3]");
  check(static_cast<int>(meta.resolutions.size()) == meta.levels, "hash_lookup: resolutions");
  check(table.val().rows() == static_cast<long>(meta.levels) * meta.table_size &&
            table.val().cols() == meta.features,
        "hash_lookup: table shape");
  check((meta.table_size & (meta.table_size - 1)) == 0, "hash_lookup: table size power of two");

  const long n = positions.val().rows();
  Tape& t = *positions.tape;

  struct Ctx {
    // per (point, level, corner): table row and trilinear weight, plus the
    // d(weight)/d(fraction) factors needed for position gradients
    std::vector<int> rows;        // n*levels*8
    std::vector<double> weights;  // n*levels*8
    std::vector<double> fracs;    // n*levels*3
    std::vector<uint8_t> interior;  // n*3: 1 where not clamped
  };
  auto ctx = std::make_shared<Ctx>();
  ctx->rows.resize(static_cast<size_t>(n) * meta.levels * 8);
  ctx->weights.resize(static_cast<size_t>(n) * meta.levels * 8);
  ctx->fracs.resize(static_cast<size_t>(n) * meta.levels * 3);
  ctx->interior.resize(static_cast<size_t>(n) * 3);

  const int feat = meta.features;
  Mat out = Mat::Zero(n, static_cast<long>(meta.levels) * feat);
  const double* table_data = table.val().data();
  for (long i = 0; i < n; ++i) {
    double p[3];
    for (int a = 0; a < 3; ++a) {
      const double raw = positions.val()(i, a);
      p[a] = std::clamp(raw, 0.0, 1.0);
      ctx->interior[i * 3 + a] = (raw > 0.0 && raw < 1.0) ? 1 : 0;
    }
    double* out_row = out.data() + i * (static_cast<long>(meta.levels) * feat);
    for (int l = 0; l < meta.levels; ++l) {
      const int res = meta.resolutions[l];
      double f[3];
      uint32_t base[3];
      for (int a = 0; a < 3; ++a) {
        const double scaled = p[a] * res;
        double ipart = std::floor(scaled);
        f[a] = scaled - ipart;
        base[a] = static_cast<uint32_t>(ipart);
        if (base[a] >= static_cast<uint32_t>(res)) {  // p == 1.0 lands on the last corner
          base[a] = res - 1;
          f[a] = 1.0;
        }
        ctx->fracs[(i * meta.levels + l) * 3 + a] = f[a];
      }
      double* level_out = out_row + static_cast<long>(l) * feat;
      for (int corner = 0; corner < 8; ++corner) {
        const int cx = corner & 1, cy = (corner >> 1) & 1, cz = (corner >> 2) & 1;
        const double w = (cx ? f[0] : 1.0 - f[0]) * (cy ? f[1] : 1.0 - f[1]) *
                         (cz ? f[2] : 1.0 - f[2]);
        const uint32_t hashed =
            hash_corner(base[0] + cx, base[1] + cy, base[2] + cz, meta.table_size);
        const long row = static_cast<long>(l) * meta.table_size + hashed;
        const size_t slot = (static_cast<size_t>(i) * meta.levels + l) * 8 + corner;
        ctx->rows[slot] = static_cast<int>(row);
        ctx->weights[slot] = w;
        if (w != 0.0) {
          const double* entry = table_data + row * feat;
          for (int c = 0; c < feat; ++c) level_out[c] += w * entry[c];
        }
      }
    }
  }

  return t.emit(
      std::move(out), any_requires({table, positions}),
      [table, positions, meta, ctx, n, feat](Tape& t, int self) {
        const Mat& g = t.grad(self);
        const bool want_table = t.requires_grad(table.id);
        const bool want_pos = t.requires_grad(positions.id);
        double* gt = want_table ? t.grad(table.id).data() : nullptr;
        Mat* gp = want_pos ? &t.grad(positions.id) : nullptr;
        const double* table_data = t.val(table.id).data();
        const long row_stride = static_cast<long>(meta.levels) * feat;
        for (long i = 0; i < n; ++i) {
          const double* g_row = g.data() + i * row_stride;
          for (int l = 0; l < meta.levels; ++l) {
            const double* grow = g_row + static_cast<long>(l) * feat;
            const double* f = &ctx->fracs[(i * meta.levels + l) * 3];
            const int res = meta.resolutions[l];
            for (int corner = 0; corner < 8; ++corner) {
              const size_t slot = (static_cast<size_t>(i) * meta.levels + l) * 8 + corner;
              const long row = ctx->rows[slot];
              const double w = ctx->weights[slot];
              if (want_table && w != 0.0) {
                double* entry = gt + row * feat;
                for (int c = 0; c < feat; ++c) entry[c] += w * grow[c];
              }
              if (want_pos) {
                const int cx = corner & 1, cy = (corner >> 1) & 1, cz = (corner >> 2) & 1;
                const double* entry = table_data + row * feat;
                double gdotf = 0.0;
                for (int c = 0; c < feat; ++c) gdotf += grow[c] * entry[c];
                const double wx = cx ? f[0] : 1.0 - f[0];
                const double wy = cy ? f[1] : 1.0 - f[1];
                const double wz = cz ? f[2] : 1.0 - f[2];
                const double sx = cx ? 1.0 : -1.0;
                const double sy = cy ? 1.0 : -1.0;
                const double sz = cz ? 1.0 : -1.0;
                if (ctx->interior[i * 3 + 0]) (*gp)(i, 0) += gdotf * sx * wy * wz * res;
                if (ctx->interior[i * 3 + 1]) (*gp)(i, 1) += gdotf * wx * sy * wz * res;
                if (ctx->interior[i * 3 + 2]) (*gp)(i, 2) += gdotf * wx * wy * sz * res;
              }
            }
          }
        }
      });
}

Var composite_weights(Var sigma, const std::vector<double>& delta, int samples) {
  check(sigma.val().cols() == 1, "composite_weights: sigma must be [N,1]");
  check(sigma.val().rows() % samples == 0, "composite_weights: ray blocks");
  check(delta.size() == static_cast<size_t>(sigma.val().rows()), "composite_weights: delta size");
  Tape& t = *sigma.tape;
  const long rows = sigma.val().rows();
  const long rays = rows / samples;

  Mat w(rows, 1);
  auto trans = std::make_shared<Mat>(rows, 1);  // T_i per sample
  for (long ray = 0; ray < rays; ++ray) {
    double T = 1.0;
    for (int i = 0; i < samples; ++i) {
      const long r = ray * samples + i;
      const double a = 1.0 - std::exp(-std::max(0.0, sigma.val()(r, 0)) * delta[r]);
      (*trans)(r, 0) = T;
      w(r, 0) = T * a;
      T *= (1.0 - a);
    }
  }
  return t.emit(std::move(w), t.requires_grad(sigma.id),
                [sigma, delta, samples, trans, rays](Tape& t, int self) {
                  const Mat& g = t.grad(self);
                  const Mat& w = t.val(self);
                  Mat& gs = t.grad(sigma.id);
                  for (long ray = 0; ray < rays; ++ray) {
                    // suffix[i] = sum_{j>i} g_j w_j, built in reverse
                    double suffix = 0.0;
                    for (int i = samples - 1; i >= 0; --i) {
                      const long r = ray * samples + i;
                      const double s = std::max(0.0, t.val(sigma.id)(r, 0));
                      const double e = std::exp(-s * delta[r]);
                      const double dsig =
                          g(r, 0) * delta[r] * e * (*trans)(r, 0) - delta[r] * suffix;
                      gs(r, 0) += (t.val(sigma.id)(r, 0) > 0.0) ? dsig : 0.0;
                      suffix += g(r, 0) * w(r, 0);
                    }
                  }
                });
}

double finite_difference_check(const std::function<double(const std::vector<Mat>&)>& f,
                               std::vector<Mat> params,
                               const std::vector<Mat>& analytic_grads, double step,
                               int probes_per_param, unsigned seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    const long n = params[p].size();
    if (n == 0) continue;
    for (int probe = 0; probe < probes_per_param; ++probe) {
      const long at = static_cast<long>(rng() % static_cast<uint64_t>(n));
      const double saved = params[p].data()[at];
      params[p].data()[at] = saved + step;
      const double hi = f(params);
      params[p].data()[at] = saved - step;
      const double lo = f(params);
      params[p].data()[at] = saved;
      const double numeric = (hi - lo) / (2.0 * step);
      const double analytic = analytic_grads[p].data()[at];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  return worst;
}

}  // namespace sv4d::ad
