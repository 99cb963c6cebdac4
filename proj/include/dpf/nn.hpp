// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dpf/autodiff.hpp"
#include "dpf/rng.hpp"

namespace dpf::nn {

// Base class for trainable components. Parameters and buffers are registered
// in construction order, which fixes iteration order for optimizers and
// checkpoint serialization. Submodules are held by value in their owners and
// registered by pointer.
class Module {
 public:
  virtual ~Module() = default;
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  void set_training(bool training);
  bool is_training() const { return training_; }

  std::vector<std::pair<std::string, Var*>> named_parameters();
  std::vector<std::pair<std::string, Tensor*>> named_buffers();
  std::vector<Var*> parameters();

  void zero_grad();
  int64_t parameter_count();
  // Hash over parameter and buffer values; invariant under forward/backward,
  // changes on any optimizer step.
  uint64_t state_hash();

  std::map<std::string, Tensor> state_dict();
  // Strict load: every entry must match an existing parameter/buffer name and
  // shape and vice versa. The model is untouched if validation fails.
  void load_state_dict(const std::map<std::string, Tensor>& state);

 protected:
  Var& add_parameter(const std::string& name, Tensor init);
  Tensor& add_buffer(const std::string& name, Tensor init);
  void add_child(const std::string& name, Module* child);

 private:
  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Var*>>& out);
  void collect_buffers(const std::string& prefix,
                       std::vector<std::pair<std::string, Tensor*>>& out);

  std::vector<std::pair<std::string, std::unique_ptr<Var>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
};

class Conv2d : public Module {
 public:
  // pad < 0 selects "same"-style k/2 padding.
  Conv2d(int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride, int64_t pad, bool bias,
         Rng& rng);
  Var forward(const Var& x);

  Var* weight = nullptr;
  Var* bias = nullptr;
  int64_t stride;
  int64_t pad;
};

// Transposed convolution restricted to kernel == stride (exact upsample).
class ConvTranspose2d : public Module {
 public:
  ConvTranspose2d(int64_t in_ch, int64_t out_ch, int64_t factor, bool bias, Rng& rng);
  Var forward(const Var& x);

  Var* weight = nullptr;
  Var* bias = nullptr;
  int64_t factor;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(int64_t channels, double momentum = 0.1, double eps = 1e-5);
  Var forward(const Var& x);

  Var* gamma = nullptr;
  Var* beta = nullptr;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  double momentum;
  double eps;
};

class Linear : public Module {
 public:
  Linear(int64_t in_features, int64_t out_features, bool bias, Rng& rng);
  Var forward(const Var& x);

  Var* weight = nullptr;
  Var* bias = nullptr;
};

// He-normal initialization for tensors whose first dim is fan-out.
Tensor he_normal(std::vector<int64_t> shape, int64_t fan_in, Rng& rng);

}  // namespace dpf::nn
