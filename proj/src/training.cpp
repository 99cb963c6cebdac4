// SPDX-License-Identifier: Apache-2.0
#include "dpf/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include <json.hpp>

#include "dpf/depth.hpp"
#include "dpf/error.hpp"

namespace dpf {

double SubtaskLosses::operator[](int i) const {
  switch (i) {
    case 0: return cal;
    case 1: return mass;
    case 2: return fat;
    case 3: return carb;
    case 4: return protein;
  }
  throw ValueError("subtask index out of range");
}

double& SubtaskLosses::operator[](int i) {
  switch (i) {
    case 0: return cal;
    case 1: return mass;
    case 2: return fat;
    case 3: return carb;
    case 4: return protein;
  }
  throw ValueError("subtask index out of range");
}

void SubtaskLosses::validate() const {
  for (int i = 0; i < 5; ++i) {
    if (!std::isfinite((*this)[i])) throw ContractError("subtask loss is not finite");
    if ((*this)[i] < 0) throw ContractError("subtask loss is negative");
  }
}

double subtask_loss(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.empty()) throw ValueError("subtask_loss: empty batch");
  if (pred.size() != truth.size()) throw ValueError("subtask_loss: length mismatch");
  double acc = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!std::isfinite(pred[i]) || !std::isfinite(truth[i])) {
      throw ValueError("subtask_loss: non-finite input at index " + std::to_string(i));
    }
    acc += std::fabs(pred[i] - truth[i]);
  }
  return acc / static_cast<double>(pred.size());
}

double total_loss(const SubtaskLosses& l, double epsilon) {
  l.validate();
  if (epsilon <= 0) throw ValueError("total_loss: epsilon must be positive");
  double acc = 0;
  for (int i = 0; i < 5; ++i) acc += std::log(std::max(l[i], epsilon));
  return std::exp(acc / 5.0);
}

std::array<double, 5> total_loss_gradient(const SubtaskLosses& l, double epsilon) {
  double t = total_loss(l, epsilon);
  std::array<double, 5> g{};
  for (int i = 0; i < 5; ++i) g[static_cast<size_t>(i)] = l[i] > epsilon ? t / (5.0 * l[i]) : 0.0;
  return g;
}

Var total_loss_graph(const std::array<Var, 5>& subtask, double epsilon) {
  Var stacked = ops::concat(subtask[0], subtask[1], 0);
  stacked = ops::concat(stacked, subtask[2], 0);
  stacked = ops::concat(stacked, subtask[3], 0);
  stacked = ops::concat(stacked, subtask[4], 0);
  return ops::exp(ops::mean_all(ops::log_floor(stacked, epsilon)));
}

void TrainConfig::validate() const {
  if (lr0 <= 0) throw ConfigError("lr0 must be positive", "train.lr0");
  if (decay <= 0 || decay > 1) throw ConfigError("decay must be in (0,1]", "train.decay");
  if (epochs < 1) throw ConfigError("epochs must be >= 1", "train.epochs");
  if (batch < 1) throw ConfigError("batch must be >= 1", "train.batch");
  if (loss_epsilon <= 0) throw ConfigError("loss_epsilon must be positive", "train.loss_epsilon");
  if (flip_prob < 0 || flip_prob > 1) throw ConfigError("flip_prob in [0,1]", "train.flip_prob");
}

double lr_at(int64_t epoch, const TrainConfig& config) {
  if (epoch < 0) throw ValueError("lr_at: epoch must be >= 0");
  return config.lr0 * std::pow(config.decay, static_cast<double>(epoch));
}

// ---- Adam -----------------------------------------------------------------------

Adam::Adam(std::vector<Var*> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (Var* p : params_) {
    m_.emplace_back(p->value().shape());
    v_.emplace_back(p->value().shape());
  }
}

void Adam::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Var* p = params_[i];
    if (!p->has_grad()) continue;
    const double* g = p->grad().data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    double* w = p->value().data();
    int64_t n = p->value().numel();
    for (int64_t j = 0; j < n; ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::save_state(const std::vector<std::pair<std::string, Var*>>& named,
                      CheckpointData& out) const {
  if (named.size() != params_.size()) throw ContractError("Adam state/parameter count mismatch");
  out.has_optimizer = true;
  out.adam_step = t_;
  for (size_t i = 0; i < named.size(); ++i) {
    out.adam_m.emplace(named[i].first, m_[i]);
    out.adam_v.emplace(named[i].first, v_[i]);
  }
}

void Adam::load_state(const std::vector<std::pair<std::string, Var*>>& named,
                      const CheckpointData& in) {
  if (!in.has_optimizer) throw ValueError("checkpoint has no optimizer state");
  if (named.size() != params_.size()) throw ContractError("Adam state/parameter count mismatch");
  std::vector<Tensor> m, v;
  for (const auto& [name, p] : named) {
    auto mi = in.adam_m.find(name);
    auto vi = in.adam_v.find(name);
    if (mi == in.adam_m.end() || vi == in.adam_v.end()) {
      throw LookupError("optimizer state missing for parameter " + name);
    }
    if (!mi->second.same_shape(p->value())) {
      throw ShapeError("optimizer state shape mismatch for " + name);
    }
    m.push_back(mi->second);
    v.push_back(vi->second);
  }
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = in.adam_step;
}

// ---- example preparation -----------------------------------------------------------

ModelExample prepare_example(const RGBDSample& sample, const DepthProvider* provider) {
  ModelExample ex;
  ex.dish_id = sample.dish_id;
  ex.rgb = sample.rgb;
  ex.target = sample.target;
  if (provider) {
    DepthMap predicted = provider->predict(sample);
    ex.depth3 = depth_to_backbone_input(normalize_depth(predicted));
  } else {
    ex.depth3 = Tensor({3, sample.rgb.dim(1), sample.rgb.dim(2)});
  }
  return ex;
}

std::vector<ModelExample> prepare_examples(const std::vector<RGBDSample>& samples,
                                           const DepthProvider* provider) {
  std::vector<ModelExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(prepare_example(s, provider));
  return out;
}

// ---- checkpointing ------------------------------------------------------------------

uint64_t config_hash_of(const std::string& canonical_config_text) {
  return fnv1a(canonical_config_text);
}

void save_training_checkpoint(const std::filesystem::path& path, FusionModel& model,
                              const Adam* optimizer, int64_t epoch, uint64_t config_hash,
                              const std::string& rng_state) {
  CheckpointData data;
  data.format_version = kCheckpointVersion;
  data.config_hash = config_hash;
  data.epoch = epoch;
  data.model = model.state_dict();
  data.rng_state = rng_state;
  if (optimizer) optimizer->save_state(model.named_parameters(), data);
  save_checkpoint_file(path, data);
}

LoadReport load_training_checkpoint(const std::filesystem::path& path, FusionModel& model,
                                    Adam* optimizer, uint64_t expected_hash, bool force) {
  CheckpointData data = load_checkpoint_file(path);
  LoadReport report;
  if (expected_hash != 0 && data.config_hash != expected_hash) {
    if (!force) {
      throw ValueError("checkpoint config hash mismatch (file " +
                       std::to_string(data.config_hash) + ", expected " +
                       std::to_string(expected_hash) + "); pass --force to load anyway");
    }
    std::cerr << "warning: checkpoint config hash mismatch, loading under --force\n";
    report.hash_mismatch_forced = true;
  }
  model.load_state_dict(data.model);
  if (optimizer) optimizer->load_state(model.named_parameters(), data);
  report.epoch = data.epoch;
  return report;
}

// ---- fit ------------------------------------------------------------------------------

namespace {

void append_epoch_log(const std::filesystem::path& path, const EpochStats& s) {
  nlohmann::json rec = {
      {"epoch", s.epoch},     {"lr", s.lr},
      {"L_cal", s.losses.cal}, {"L_mass", s.losses.mass},
      {"L_fat", s.losses.fat}, {"L_carb", s.losses.carb},
      {"L_protein", s.losses.protein}, {"L_total", s.total},
  };
  std::ofstream f(path, std::ios::app);
  if (!f) throw IoError("cannot append training log: " + path.string());
  f << rec.dump() << "\n";
}

}  // namespace

FitResult fit(FusionModel& model, const std::vector<ModelExample>& train,
              const TrainConfig& config, Adam* optimizer, int64_t start_epoch,
              uint64_t config_hash, const std::function<void(const EpochStats&)>& on_epoch) {
  config.validate();
  if (train.empty()) throw ValueError("fit: empty training set");
  for (const auto& ex : train) {
    if (!ex.rgb.same_shape(train[0].rgb)) {
      throw ShapeError("fit: all training examples must share input dims");
    }
  }

  std::unique_ptr<Adam> local_opt;
  if (!optimizer) {
    local_opt = std::make_unique<Adam>(model.parameters());
    optimizer = local_opt.get();
  }

  auto n = static_cast<int64_t>(train.size());
  int64_t h = train[0].rgb.dim(1), w = train[0].rgb.dim(2);
  model.set_training(true);

  if (config.head_bias_warmup && start_epoch == 0) {
    std::array<double, 5> mean{};
    for (const auto& ex : train) {
      for (int i = 0; i < 5; ++i) mean[static_cast<size_t>(i)] += ex.target[i];
    }
    for (auto& m : mean) m /= static_cast<double>(n);
    for (auto& [name, p] : model.named_parameters()) {
      if (name.size() == 10 && name.rfind("head", 0) == 0 && name.ends_with(".bias")) {
        p->value()(0) = mean[static_cast<size_t>(name[4] - '0')];
      }
    }
  }

  FitResult result;
  for (int64_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
    double epoch_lr = lr_at(epoch, config);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix64(config.seed, static_cast<uint64_t>(epoch), 0xeb0cULL));
    shuffle_rng.shuffle(order);

    SubtaskLosses epoch_losses;
    int64_t seen = 0;
    int64_t batch_index = 0;
    for (int64_t base = 0; base < n; base += config.batch, ++batch_index) {
      int64_t bs = std::min<int64_t>(config.batch, n - base);
      Tensor rgb({bs, 3, h, w});
      Tensor depth3({bs, 3, h, w});
      Tensor targets({bs, 5});
      for (int64_t b = 0; b < bs; ++b) {
        const ModelExample& ex = train[static_cast<size_t>(order[base + b])];
        Rng sample_rng(
            mix64(config.seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(order[base + b])));
        bool flip = sample_rng.bernoulli(config.flip_prob);
        const Tensor rgb_in = flip ? hflip(ex.rgb) : ex.rgb;
        const Tensor depth_in = flip ? hflip(ex.depth3) : ex.depth3;
        std::copy(rgb_in.data(), rgb_in.data() + rgb_in.numel(), rgb.data() + b * 3 * h * w);
        std::copy(depth_in.data(), depth_in.data() + depth_in.numel(),
                  depth3.data() + b * 3 * h * w);
        for (int i = 0; i < 5; ++i) targets(b, i) = ex.target[i];
      }

      Var out = model.forward(Var(std::move(rgb)), Var(std::move(depth3)));
      Var diff = ops::abs(ops::sub(out, ops::constant(targets)));
      std::array<Var, 5> task_losses;
      for (int i = 0; i < 5; ++i) {
        Tensor mask({1, 5});
        mask(0, i) = 1.0;
        // mean over the masked column: mean_all picks up 1/(5*bs), so scale by 5.
        task_losses[static_cast<size_t>(i)] =
            ops::scale(ops::mean_all(ops::mul(diff, ops::constant(mask))), 5.0);
      }
      Var loss = total_loss_graph(task_losses, config.loss_epsilon);

      if (!std::isfinite(loss.value()(0))) {
        throw ValueError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch_index));
      }

      model.zero_grad();
      backward(loss);
      if (config.grad_clip > 0) {
        double norm2 = 0;
        for (Var* p : model.parameters()) {
          if (!p->has_grad()) continue;
          for (int64_t i = 0; i < p->grad().numel(); ++i) {
            norm2 += p->grad().data()[i] * p->grad().data()[i];
          }
        }
        double norm = std::sqrt(norm2);
        if (norm > config.grad_clip) {
          double k = config.grad_clip / norm;
          for (Var* p : model.parameters()) {
            if (p->has_grad()) p->grad().scale_(k);
          }
        }
      }
      double step_lr = config.decay_per == TrainConfig::DecayPer::step
                           ? config.lr0 * std::pow(config.decay,
                                                   static_cast<double>(optimizer->step_count()))
                           : epoch_lr;
      optimizer->step(step_lr);

      for (int i = 0; i < 5; ++i) {
        epoch_losses[i] += task_losses[static_cast<size_t>(i)].value()(0) * static_cast<double>(bs);
      }
      seen += bs;
    }

    for (int i = 0; i < 5; ++i) epoch_losses[i] /= static_cast<double>(seen);
    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = epoch_lr;
    stats.losses = epoch_losses;
    stats.total = total_loss(epoch_losses, config.loss_epsilon);
    result.history.push_back(stats);
    if (!config.log_path.empty()) append_epoch_log(config.log_path, stats);
    if (on_epoch) on_epoch(stats);

    bool last = epoch + 1 == config.epochs;
    bool cadence = config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0;
    if (!config.checkpoint_path.empty() && (last || cadence)) {
      std::string rng_state = Rng(mix64(config.seed, static_cast<uint64_t>(epoch + 1))).serialize();
      save_training_checkpoint(config.checkpoint_path, model, optimizer, epoch + 1, config_hash,
                               rng_state);
    }
  }
  return result;
}

}  // namespace dpf
