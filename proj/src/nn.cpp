#include "sv4d/nn.hpp"

namespace sv4d::nn {

int ParamStore::add(const std::string& name, ad::Mat init) {
  if (by_name_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
  Entry e;
  e.name = name;
  e.m = ad::Mat::Zero(init.rows(), init.cols());
  e.v = ad::Mat::Zero(init.rows(), init.cols());
  e.value = std::move(init);
  entries_.push_back(std::move(e));
  const int id = static_cast<int>(entries_.size()) - 1;
  by_name_[name] = id;
  return id;
}

int ParamStore::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? -1 : it->second;
}

std::vector<ad::Var> ParamStore::leaves(ad::Tape& tape) const {
  std::vector<ad::Var> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(tape.leaf(e.value));
  return out;
}

std::vector<ad::Var> ParamStore::constants(ad::Tape& tape) const {
  std::vector<ad::Var> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(tape.constant(e.value));
  return out;
}

void adam_step(ParamStore& store, ad::Tape& tape, const std::vector<ad::Var>& leaves,
               const AdamConfig& config, int t, const std::vector<int>& param_ids) {
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  auto update = [&](int id) {
    ParamStore::Entry& e = store.entry(id);
    if (!tape.has_grad(leaves[id].id)) return;  // parameter unused this step
    const ad::Mat& g = tape.grad(leaves[id].id);
    e.m = config.beta1 * e.m + (1.0 - config.beta1) * g;
    e.v = config.beta2 * e.v + (1.0 - config.beta2) * g.cwiseProduct(g);
    const ad::Mat mhat = e.m / bc1;
    const ad::Mat vhat = e.v / bc2;
    e.value.array() -= config.lr * mhat.array() / (vhat.array().sqrt() + config.eps);
  };
  if (param_ids.empty()) {
    for (size_t i = 0; i < store.count(); ++i) update(static_cast<int>(i));
  } else {
    for (int id : param_ids) update(id);
  }
}

Linear::Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
               double init_scale, bool zero_init) {
  ad::Mat weight = ad::Mat::Zero(in, out);
  if (!zero_init) {
    const double bound = init_scale / std::sqrt(static_cast<double>(in));
    for (long i = 0; i < weight.size(); ++i)
      weight.data()[i] = rng.uniform(-bound, bound);
  }
  w = store.add(name + ".w", std::move(weight));
  b = store.add(name + ".b", ad::Mat::Zero(1, out));
}

ad::Var Linear::operator()(const std::vector<ad::Var>& p, ad::Var x) const {
  return ad::add_bias(ad::matmul(x, p[w]), p[b]);
}

Mlp::Mlp(ParamStore& store, const std::string& name, int in, int hidden, int out, Rng& rng,
         bool zero_init_out)
    : fc1(store, name + ".fc1", in, hidden, rng),
      fc2(store, name + ".fc2", hidden, out, rng, 1.0, zero_init_out) {}

ad::Var Mlp::operator()(const std::vector<ad::Var>& p, ad::Var x) const {
  return fc2(p, ad::silu(fc1(p, x)));
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, int dim) {
  gamma = store.add(name + ".gamma", ad::Mat::Ones(1, dim));
  beta = store.add(name + ".beta", ad::Mat::Zero(1, dim));
}

ad::Var LayerNorm::operator()(const std::vector<ad::Var>& p, ad::Var x) const {
  return ad::layer_norm(x, p[gamma], p[beta]);
}

}  // namespace sv4d::nn
