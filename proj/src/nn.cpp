// SPDX-License-Identifier: Apache-2.0
#include "dpf/nn.hpp"

#include <cmath>

#include "dpf/error.hpp"

namespace dpf::nn {

void Module::set_training(bool training) {
  training_ = training;
  for (auto& [name, child] : children_) child->set_training(training);
}

Var& Module::add_parameter(const std::string& name, Tensor init) {
  params_.emplace_back(name, std::make_unique<Var>(std::move(init), /*requires_grad=*/true));
  return *params_.back().second;
}

Tensor& Module::add_buffer(const std::string& name, Tensor init) {
  buffers_.emplace_back(name, std::make_unique<Tensor>(std::move(init)));
  return *buffers_.back().second;
}

void Module::add_child(const std::string& name, Module* child) {
  children_.emplace_back(name, child);
}

void Module::collect_params(const std::string& prefix,
                            std::vector<std::pair<std::string, Var*>>& out) {
  for (auto& [name, p] : params_) out.emplace_back(prefix + name, p.get());
  for (auto& [name, child] : children_) child->collect_params(prefix + name + ".", out);
}

void Module::collect_buffers(const std::string& prefix,
                             std::vector<std::pair<std::string, Tensor*>>& out) {
  for (auto& [name, b] : buffers_) out.emplace_back(prefix + name, b.get());
  for (auto& [name, child] : children_) child->collect_buffers(prefix + name + ".", out);
}

std::vector<std::pair<std::string, Var*>> Module::named_parameters() {
  std::vector<std::pair<std::string, Var*>> out;
  collect_params("", out);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Module::named_buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  collect_buffers("", out);
  return out;
}

std::vector<Var*> Module::parameters() {
  std::vector<Var*> out;
  for (auto& [name, p] : named_parameters()) out.push_back(p);
  return out;
}

void Module::zero_grad() {
  for (Var* p : parameters()) p->zero_grad();
}

int64_t Module::parameter_count() {
  int64_t n = 0;
  for (Var* p : parameters()) n += p->value().numel();
  return n;
}

uint64_t Module::state_hash() {
  uint64_t h = kFnvOffset;
  for (auto& [name, p] : named_parameters()) {
    h = fnv1a(name, h);
    h = tensor_hash(p->value(), h);
  }
  for (auto& [name, b] : named_buffers()) {
    h = fnv1a(name, h);
    h = tensor_hash(*b, h);
  }
  return h;
}

std::map<std::string, Tensor> Module::state_dict() {
  std::map<std::string, Tensor> out;
  for (auto& [name, p] : named_parameters()) out.emplace("param." + name, p->value());
  for (auto& [name, b] : named_buffers()) out.emplace("buffer." + name, *b);
  return out;
}

void Module::load_state_dict(const std::map<std::string, Tensor>& state) {
  auto params = named_parameters();
  auto buffers = named_buffers();
  if (state.size() != params.size() + buffers.size()) {
    throw ValueError("state dict entry count mismatch: file has " +
                     std::to_string(state.size()) + ", model expects " +
                     std::to_string(params.size() + buffers.size()));
  }
  // Validate fully before mutating anything.
  for (auto& [name, p] : params) {
    auto it = state.find("param." + name);
    if (it == state.end()) throw LookupError("state dict missing parameter " + name);
    if (!it->second.same_shape(p->value())) {
      throw ShapeError("parameter " + name + " shape mismatch: file " +
                       it->second.shape_str() + ", model " + p->value().shape_str());
    }
  }
  for (auto& [name, b] : buffers) {
    auto it = state.find("buffer." + name);
    if (it == state.end()) throw LookupError("state dict missing buffer " + name);
    if (!it->second.same_shape(*b)) throw ShapeError("buffer " + name + " shape mismatch");
  }
  for (auto& [name, p] : params) p->value() = state.at("param." + name);
  for (auto& [name, b] : buffers) *b = state.at("buffer." + name);
}

Tensor he_normal(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.vec()) v = rng.normal(0.0, std);
  return t;
}

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride, int64_t pad,
               bool bias_on, Rng& rng)
    : stride(stride), pad(pad) {
  weight = &add_parameter("weight", he_normal({out_ch, in_ch, k, k}, in_ch * k * k, rng));
  if (bias_on) bias = &add_parameter("bias", Tensor({out_ch}));
}

Var Conv2d::forward(const Var& x) { return ops::conv2d(x, *weight, bias, stride, pad); }

ConvTranspose2d::ConvTranspose2d(int64_t in_ch, int64_t out_ch, int64_t factor, bool bias_on,
                                 Rng& rng)
    : factor(factor) {
  weight = &add_parameter("weight", he_normal({in_ch, out_ch, factor, factor}, in_ch, rng));
  if (bias_on) bias = &add_parameter("bias", Tensor({out_ch}));
}

Var ConvTranspose2d::forward(const Var& x) {
  return ops::conv_transpose2d(x, *weight, bias, factor);
}

BatchNorm2d::BatchNorm2d(int64_t channels, double momentum, double eps)
    : momentum(momentum), eps(eps) {
  gamma = &add_parameter("gamma", Tensor::full({channels}, 1.0));
  beta = &add_parameter("beta", Tensor({channels}));
  running_mean = &add_buffer("running_mean", Tensor({channels}));
  running_var = &add_buffer("running_var", Tensor::full({channels}, 1.0));
}

Var BatchNorm2d::forward(const Var& x) {
  return ops::batchnorm2d(x, *gamma, *beta, *running_mean, *running_var, is_training(),
                          momentum, eps);
}

Linear::Linear(int64_t in_features, int64_t out_features, bool bias_on, Rng& rng) {
  weight = &add_parameter("weight", he_normal({out_features, in_features}, in_features, rng));
  if (bias_on) bias = &add_parameter("bias", Tensor({out_features}));
}

Var Linear::forward(const Var& x) { return ops::linear(x, *weight, bias); }

}  // namespace dpf::nn
