// SPDX-License-Identifier: Apache-2.0
// Tensor utilities and autodiff ops: shape contracts plus finite-difference
// gradient checks for every differentiable op.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dpf/autodiff.hpp"
#include "dpf/nn.hpp"
#include "dpf/rng.hpp"
#include "dpf/tensor.hpp"
#include "test_util.hpp"

using namespace dpf;
using dpf::test::fd_check;
using dpf::test::random_tensor;

namespace {

// Scalar objective <w, y> with fixed random weights, so every output element
// influences the loss with a distinct coefficient.
Var weighted_sum(const Var& y, const Tensor& w) {
  return ops::mean_all(ops::mul(y, ops::constant(w)));
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(t(0, 1) == 2);
  CHECK(t(1, 0) == 3);
  CHECK(t.sum() == 10);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(t.reshaped({3, 1}), ShapeError);
  Tensor r = t.reshaped({4});
  CHECK(r(3) == 4);
  CHECK(t.all_finite());
  t(1, 1) = std::nan("");
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("hflip is an involution and reverses rows") {
  Rng rng(1);
  Tensor img = random_tensor({3, 4, 5}, rng);
  Tensor once = hflip(img);
  CHECK(once(0, 0, 0) == img(0, 0, 4));
  Tensor twice = hflip(once);
  for (int64_t i = 0; i < img.numel(); ++i) CHECK(twice.data()[i] == img.data()[i]);
}

TEST_CASE("bilinear_resize identity at equal size, exact on constants") {
  Rng rng(2);
  Tensor img = random_tensor({2, 6, 7}, rng);
  Tensor same = bilinear_resize(img, 6, 7);
  for (int64_t i = 0; i < img.numel(); ++i) CHECK(same.data()[i] == doctest::Approx(img.data()[i]));
  Tensor flat = Tensor::full({5, 8}, 3.25);
  Tensor up = bilinear_resize(flat, 11, 13);
  for (double v : up.vec()) CHECK(v == doctest::Approx(3.25));
}

TEST_CASE("center_crop takes the middle window") {
  Tensor t = Tensor::from({1, 4, 4}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  Tensor c = center_crop(t, 2, 2);
  CHECK(c(0, 0, 0) == 5);
  CHECK(c(0, 1, 1) == 10);
  CHECK_THROWS_AS(center_crop(t, 5, 2), ValueError);
}

TEST_CASE("rng determinism and serialization round trip") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  std::string s = a.serialize();
  Rng c(0);
  c.deserialize(s);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == c.normal());
}

TEST_CASE("no-grad mode detaches") {
  Var x(Tensor::from({2}, {1, 2}), true);
  {
    NoGradGuard g;
    Var y = ops::relu(x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node->inputs.empty());
  }
  Var y = ops::relu(x);
  CHECK(y.requires_grad());
}

TEST_CASE("backward on composite graph accumulates through fan-out") {
  // f = mean(x * x + x) => df/dx = (2x + 1)/n
  Var x(Tensor::from({4}, {1, -2, 3, 0.5}), true);
  Var y = ops::add(ops::mul(x, x), x);
  Var loss = ops::mean_all(y);
  backward(loss);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(x.grad()(i) == doctest::Approx((2 * x.value()(i) + 1) / 4.0));
  }
}

TEST_CASE("gradients: elementwise ops") {
  Rng rng(7);
  struct Case {
    const char* name;
    std::function<Var(const Var&)> f;
  };
  std::vector<Case> cases = {
      {"relu", [](const Var& x) { return ops::relu(x); }},
      {"sigmoid", [](const Var& x) { return ops::sigmoid(x); }},
      {"softplus", [](const Var& x) { return ops::softplus(x); }},
      {"abs", [](const Var& x) { return ops::abs(x); }},
      {"exp", [](const Var& x) { return ops::exp(x); }},
      {"scale", [](const Var& x) { return ops::scale(x, -2.5); }},
      {"log_floor", [](const Var& x) { return ops::log_floor(ops::add(ops::mul(x, x), ops::constant(Tensor::full({3, 4}, 0.5))), 1e-8); }},
  };
  for (auto& c : cases) {
    CAPTURE(c.name);
    Var x(random_tensor({3, 4}, rng, 0.2, 1.5), true);  // away from relu/abs kinks
    Tensor w = random_tensor({3, 4}, rng);
    auto run = [&] { return weighted_sum(c.f(x), w); };
    Var loss = run();
    backward(loss);
    Tensor g = x.grad();
    auto res = fd_check([&] { return run().value()(0); }, {{&x.value(), &g}}, rng, 12, 1e-6);
    CHECK(res.max_rel < 1e-6);
  }
}

TEST_CASE("gradients: mul broadcasting both directions") {
  Rng rng(8);
  Var a(random_tensor({2, 3, 4, 5}, rng), true);
  Var ca(random_tensor({2, 3, 1, 1}, rng), true);
  Var sa(random_tensor({2, 1, 4, 5}, rng), true);
  Tensor w = random_tensor({2, 3, 4, 5}, rng);
  auto run = [&] { return weighted_sum(ops::mul(ops::mul(a, ca), sa), w); };
  Var loss = run();
  backward(loss);
  Tensor ga = a.grad(), gca = ca.grad(), gsa = sa.grad();
  auto res = fd_check([&] { return run().value()(0); },
                      {{&a.value(), &ga}, {&ca.value(), &gca}, {&sa.value(), &gsa}}, rng, 10);
  CHECK(res.max_rel < 1e-6);
}

TEST_CASE("gradients: reductions and reshapes") {
  Rng rng(9);
  Var x(random_tensor({2, 3, 4, 5}, rng), true);
  Tensor wg = random_tensor({2, 3, 1, 1}, rng);
  Tensor wc = random_tensor({2, 1, 4, 5}, rng);

  auto run_gap = [&] { return weighted_sum(ops::gap2d(x), wg); };
  Var l1 = run_gap();
  backward(l1);
  Tensor g1 = x.grad();
  auto r1 = fd_check([&] { return run_gap().value()(0); }, {{&x.value(), &g1}}, rng, 10);
  CHECK(r1.max_rel < 1e-6);

  x.zero_grad();
  auto run_cm = [&] { return weighted_sum(ops::channel_mean(x), wc); };
  Var l2 = run_cm();
  backward(l2);
  Tensor g2 = x.grad();
  auto r2 = fd_check([&] { return run_cm().value()(0); }, {{&x.value(), &g2}}, rng, 10);
  CHECK(r2.max_rel < 1e-6);

  x.zero_grad();
  Tensor wr = random_tensor({2, 60}, rng);
  auto run_rs = [&] { return weighted_sum(ops::reshape(x, {2, 60}), wr); };
  Var l3 = run_rs();
  backward(l3);
  Tensor g3 = x.grad();
  auto r3 = fd_check([&] { return run_rs().value()(0); }, {{&x.value(), &g3}}, rng, 10);
  CHECK(r3.max_rel < 1e-6);
}

TEST_CASE("gradients: concat along channel and leading axis") {
  Rng rng(10);
  Var a(random_tensor({2, 3, 2, 2}, rng), true);
  Var b(random_tensor({2, 5, 2, 2}, rng), true);
  Tensor w = random_tensor({2, 8, 2, 2}, rng);
  auto run = [&] { return weighted_sum(ops::concat(a, b, 1), w); };
  Var loss = run();
  backward(loss);
  Tensor ga = a.grad(), gb = b.grad();
  auto res = fd_check([&] { return run().value()(0); },
                      {{&a.value(), &ga}, {&b.value(), &gb}}, rng, 10);
  CHECK(res.max_rel < 1e-6);

  Var s1(Tensor::scalar(2.0), true);
  Var s2(Tensor::scalar(-3.0), true);
  Var cat = ops::concat(s1, s2, 0);
  CHECK(cat.value().numel() == 2);
  CHECK(cat.value()(1) == -3.0);
}

TEST_CASE("conv2d shape arithmetic matches ceil-division ladder") {
  Rng rng(11);
  Var x(random_tensor({1, 2, 21, 28}, rng), true);
  Var w(random_tensor({4, 2, 3, 3}, rng, -0.5, 0.5), true);
  Var y = ops::conv2d(x, w, nullptr, 2, -1);
  CHECK(y.value().shape() == std::vector<int64_t>{1, 4, 11, 14});
  Var z = ops::conv2d(x, w, nullptr, 1, -1);
  CHECK(z.value().shape() == std::vector<int64_t>{1, 4, 21, 28});
  CHECK_THROWS_AS(ops::conv2d(Var(random_tensor({1, 3, 8, 8}, rng)), w, nullptr, 1, -1),
                  ShapeError);
}

TEST_CASE("gradients: conv2d variants") {
  Rng rng(12);
  struct Case {
    int64_t cin, cout, k, stride, pad;
    bool bias;
  };
  std::vector<Case> cases = {
      {3, 4, 3, 1, -1, true}, {3, 4, 3, 2, -1, false}, {2, 5, 1, 1, 0, true},
      {2, 3, 7, 2, 3, true},
  };
  for (auto& c : cases) {
    CAPTURE(c.k);
    CAPTURE(c.stride);
    Var x(random_tensor({2, c.cin, 9, 10}, rng), true);
    Var w(random_tensor({c.cout, c.cin, c.k, c.k}, rng, -0.4, 0.4), true);
    Var b(random_tensor({c.cout}, rng), true);
    Var* bp = c.bias ? &b : nullptr;
    Var y0 = ops::conv2d(x, w, bp, c.stride, c.pad);
    Tensor ws = random_tensor(y0.value().shape(), rng);
    auto run = [&] { return weighted_sum(ops::conv2d(x, w, bp, c.stride, c.pad), ws); };
    Var loss = run();
    backward(loss);
    Tensor gx = x.grad(), gw = w.grad();
    std::vector<std::pair<Tensor*, const Tensor*>> params = {{&x.value(), &gx},
                                                             {&w.value(), &gw}};
    Tensor gb;
    if (c.bias) {
      gb = b.grad();
      params.push_back({&b.value(), &gb});
    }
    auto res = fd_check([&] { return run().value()(0); }, params, rng, 8);
    CHECK(res.max_rel < 1e-6);
  }
}

TEST_CASE("gradients: conv_transpose2d") {
  Rng rng(13);
  Var x(random_tensor({2, 3, 4, 5}, rng), true);
  Var w(random_tensor({3, 4, 2, 2}, rng, -0.5, 0.5), true);
  Var b(random_tensor({4}, rng), true);
  Var y = ops::conv_transpose2d(x, w, &b, 2);
  CHECK(y.value().shape() == std::vector<int64_t>{2, 4, 8, 10});
  Tensor ws = random_tensor(y.value().shape(), rng);
  auto run = [&] { return weighted_sum(ops::conv_transpose2d(x, w, &b, 2), ws); };
  Var loss = run();
  backward(loss);
  Tensor gx = x.grad(), gw = w.grad(), gb = b.grad();
  auto res = fd_check([&] { return run().value()(0); },
                      {{&x.value(), &gx}, {&w.value(), &gw}, {&b.value(), &gb}}, rng, 10);
  CHECK(res.max_rel < 1e-6);
}

TEST_CASE("conv_transpose2d of a delta paints one weighted block") {
  Tensor xt({1, 1, 2, 2});
  xt(0, 0, 1, 0) = 1.0;
  Var x(xt);
  Tensor wt = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Var w(wt);
  Var y = ops::conv_transpose2d(x, w, nullptr, 2);
  CHECK(y.value()(0, 0, 2, 0) == 1.0);
  CHECK(y.value()(0, 0, 2, 1) == 2.0);
  CHECK(y.value()(0, 0, 3, 0) == 3.0);
  CHECK(y.value()(0, 0, 3, 1) == 4.0);
  CHECK(y.value()(0, 0, 0, 0) == 0.0);
}

TEST_CASE("gradients: maxpool2d") {
  Rng rng(14);
  // Distinct values avoid argmax ties at the FD step size.
  Tensor xt({1, 2, 7, 7});
  for (int64_t i = 0; i < xt.numel(); ++i) xt.data()[i] = std::sin(0.7 * i) * 3.0 + 0.01 * i;
  Var x(xt, true);
  Var y = ops::maxpool2d(x, 3, 2, 1);
  CHECK(y.value().shape() == std::vector<int64_t>{1, 2, 4, 4});
  Tensor ws = random_tensor(y.value().shape(), rng);
  auto run = [&] { return weighted_sum(ops::maxpool2d(x, 3, 2, 1), ws); };
  Var loss = run();
  backward(loss);
  Tensor gx = x.grad();
  auto res = fd_check([&] { return run().value()(0); }, {{&x.value(), &gx}}, rng, 20, 1e-7);
  CHECK(res.max_rel < 1e-5);
}

TEST_CASE("gradients: linear") {
  Rng rng(15);
  Var x(random_tensor({4, 6}, rng), true);
  Var w(random_tensor({3, 6}, rng, -0.5, 0.5), true);
  Var b(random_tensor({3}, rng), true);
  Tensor ws = random_tensor({4, 3}, rng);
  auto run = [&] { return weighted_sum(ops::linear(x, w, &b), ws); };
  Var loss = run();
  backward(loss);
  Tensor gx = x.grad(), gw = w.grad(), gb = b.grad();
  auto res = fd_check([&] { return run().value()(0); },
                      {{&x.value(), &gx}, {&w.value(), &gw}, {&b.value(), &gb}}, rng, 10);
  CHECK(res.max_rel < 1e-6);
}

TEST_CASE("gradients: batchnorm training mode (batch statistics path)") {
  Rng rng(16);
  Var x(random_tensor({3, 4, 5, 6}, rng, -2.0, 2.0), true);
  Var gamma(random_tensor({4}, rng, 0.5, 1.5), true);
  Var beta(random_tensor({4}, rng), true);
  Tensor ws = random_tensor({3, 4, 5, 6}, rng);
  auto run = [&] {
    Tensor rm({4}), rv = Tensor::full({4}, 1.0);  // fresh buffers: stats side effect isolated
    return weighted_sum(ops::batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5), ws);
  };
  Var loss = run();
  backward(loss);
  Tensor gx = x.grad(), gg = gamma.grad(), gb = beta.grad();
  auto res = fd_check(
      [&] { return run().value()(0); },
      {{&x.value(), &gx}, {&gamma.value(), &gg}, {&beta.value(), &gb}}, rng, 12, 1e-5);
  CHECK(res.max_rel < 1e-5);
}

TEST_CASE("gradients: batchnorm eval mode uses running stats") {
  Rng rng(17);
  Var x(random_tensor({2, 3, 4, 4}, rng), true);
  Var gamma(random_tensor({3}, rng, 0.5, 1.5), true);
  Var beta(random_tensor({3}, rng), true);
  Tensor rm = random_tensor({3}, rng);
  Tensor rv = random_tensor({3}, rng, 0.5, 2.0);
  Tensor ws = random_tensor({2, 3, 4, 4}, rng);
  auto run = [&] {
    return weighted_sum(ops::batchnorm2d(x, gamma, beta, rm, rv, false, 0.1, 1e-5), ws);
  };
  Var loss = run();
  backward(loss);
  Tensor gx = x.grad(), gg = gamma.grad(), gb = beta.grad();
  auto res = fd_check(
      [&] { return run().value()(0); },
      {{&x.value(), &gx}, {&gamma.value(), &gg}, {&beta.value(), &gb}}, rng, 12);
  CHECK(res.max_rel < 1e-6);
  // Eval forward must not touch the buffers.
  Tensor rm_before = rm;
  run();
  for (int64_t i = 0; i < 3; ++i) CHECK(rm(i) == rm_before(i));
}

TEST_CASE("batchnorm training normalizes batch and updates running stats") {
  Rng rng(18);
  Var x(random_tensor({4, 2, 3, 3}, rng, -1.0, 5.0), true);
  Var gamma(Tensor::full({2}, 1.0), true);
  Var beta(Tensor({2}), true);
  Tensor rm({2}), rv = Tensor::full({2}, 1.0);
  Var y = ops::batchnorm2d(x, gamma, beta, rm, rv, true, 0.5, 1e-5);
  // Per-channel mean ~0, var ~1.
  int64_t n = 4, hw = 9;
  for (int64_t c = 0; c < 2; ++c) {
    double mu = 0, var = 0;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < hw; ++j) mu += y.value().data()[(i * 2 + c) * hw + j];
    mu /= n * hw;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < hw; ++j) {
        double d = y.value().data()[(i * 2 + c) * hw + j] - mu;
        var += d * d;
      }
    var /= n * hw;
    CHECK(mu == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(rm(c) != 0.0);
  }
}

TEST_CASE("module parameter registration and state dict round trip") {
  Rng rng(19);
  nn::Conv2d conv(3, 8, 3, 1, -1, true, rng);
  nn::BatchNorm2d bn(8);
  CHECK(conv.parameter_count() == 8 * 3 * 3 * 3 + 8);
  auto named = conv.named_parameters();
  CHECK(named[0].first == "weight");
  CHECK(named[1].first == "bias");

  auto state = conv.state_dict();
  nn::Conv2d conv2(3, 8, 3, 1, -1, true, rng);
  CHECK(conv2.state_hash() != conv.state_hash());
  conv2.load_state_dict(state);
  CHECK(conv2.state_hash() == conv.state_hash());

  auto bad = state;
  bad.erase("param.bias");
  CHECK_THROWS_AS(conv2.load_state_dict(bad), ValueError);
}
