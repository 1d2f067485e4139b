#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "sv4d/ad.hpp"
#include "sv4d/common.hpp"

namespace sv4d::nn {

/// Named parameter registry with Adam moment state. Parameter order is the
/// registration order, which is deterministic per model seed.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ad::Mat value;
    ad::Mat m;  // Adam first moment
    ad::Mat v;  // Adam second moment
  };

  int add(const std::string& name, ad::Mat init);
  int find(const std::string& name) const;  // -1 when absent
  Entry& entry(int id) { return entries_[id]; }
  const Entry& entry(int id) const { return entries_[id]; }
  size_t count() const { return entries_.size(); }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Fresh leaf vars for one tape pass, index-aligned with entries.
  std::vector<ad::Var> leaves(ad::Tape& tape) const;
  /// Same, but non-differentiable (inference).
  std::vector<ad::Var> constants(ad::Tape& tape) const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> by_name_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update over the listed parameter ids (all when empty), reading
/// gradients from the tape leaves. `t` is the 1-based step counter.
void adam_step(ParamStore& store, ad::Tape& tape, const std::vector<ad::Var>& leaves,
               const AdamConfig& config, int t, const std::vector<int>& param_ids = {});

/// Dense layer: y = x W + b, with fan-in scaled uniform init.
struct Linear {
  int w = -1, b = -1;
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
         double init_scale = 1.0, bool zero_init = false);
  ad::Var operator()(const std::vector<ad::Var>& p, ad::Var x) const;
};

/// Two-layer SiLU MLP.
struct Mlp {
  Linear fc1, fc2;
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, int in, int hidden, int out, Rng& rng,
      bool zero_init_out = false);
  ad::Var operator()(const std::vector<ad::Var>& p, ad::Var x) const;
};

/// Row-wise layer norm with learned affine.
struct LayerNorm {
  int gamma = -1, beta = -1;
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, int dim);
  ad::Var operator()(const std::vector<ad::Var>& p, ad::Var x) const;
};

}  // namespace sv4d::nn
