#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "camforge/ops.hpp"
#include "camforge/tensor.hpp"

namespace camforge::testing {

// Central finite differences of a scalar-valued function against the tape.
// Returns the worst norm-wise relative error over `inputs`.
inline double gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double eps = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  f().backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.numel());
    {
      NoGradGuard no_grad;
      auto d = t.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double saved = d[i];
        d[i] = saved + eps;
        const double up = f().item();
        d[i] = saved - eps;
        const double down = f().item();
        d[i] = saved;
        numeric[i] = (up - down) / (2.0 * eps);
      }
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-7});
    worst = std::max(worst, std::sqrt(diff) / scale);
  }
  return worst;
}

inline Tensor leaf(Shape shape, Rng& rng) { return Tensor::randn(std::move(shape), rng).set_requires_grad(); }

constexpr int kRandomOpKinds = 12;

// One randomized gradient check of operation kind `op`; returns the error.
inline double random_op_gradcheck(int op, Rng& rng) {
  std::uniform_int_distribution<std::size_t> small(1, 3);
  const std::size_t a = small(rng), b = small(rng) + 1, c = small(rng) + 2;
  double err = 0.0;
  switch (op) {
    case 0: {
      Tensor x = leaf({a, b}, rng), y = leaf({a, b}, rng);
      err = gradcheck([&] { return sum(mul(add(x, y), y)); }, {x, y});
      break;
    }
    case 1: {
      Tensor x = leaf({a, b, c}, rng);
      err = gradcheck([&] { return mean(mul(scale(x, -1.5), x)); }, {x});
      break;
    }
    case 2: {
      Tensor x = leaf({a, b * c}, rng);
      const Tensor w = Tensor::randn({a * b, c}, rng);
      err = gradcheck([&] { return sum(mul(reshape(x, {a * b, c}), w)); }, {x});
      break;
    }
    case 3: {
      Tensor x = leaf({a, b, c}, rng);
      const Tensor w = Tensor::randn({a, b, c}, rng);
      err = gradcheck([&] { return sum(mul(relu(x), w)); }, {x});
      break;
    }
    case 4:
    case 5: {
      const std::size_t stride = small(rng) % 2 + 1, pad = small(rng) % 2;
      Tensor x = leaf({a, b, c + 2, c + 1}, rng), k = leaf({small(rng), b, 3, 2}, rng);
      Tensor bias = leaf({k.size(0)}, rng);
      const ConvAlgorithm algo = op == 4 ? ConvAlgorithm::direct : ConvAlgorithm::im2col;
      Tensor probe = conv2d(x, k, bias, {stride, pad, algo});
      const Tensor w = Tensor::randn(probe.shape(), rng);
      err = gradcheck([&] { return sum(mul(conv2d(x, k, bias, {stride, pad, algo}), w)); }, {x, k, bias});
      break;
    }
    case 6: {
      Tensor x = leaf({a + 1, b, 2, c}, rng), g = leaf({b}, rng), be = leaf({b}, rng);
      const Tensor w = Tensor::randn(x.shape(), rng);
      auto st = BatchNormState::create(b);
      err = gradcheck([&] { return sum(mul(batchnorm2d(x, g, be, st, Mode::train), w)); }, {x, g, be});
      break;
    }
    case 7: {
      Tensor x = leaf({a, b, c, 2}, rng);
      const Tensor w = Tensor::randn({a, b}, rng);
      err = gradcheck([&] { return sum(mul(global_avg_pool(x), w)); }, {x});
      break;
    }
    case 8: {
      Tensor x = leaf({a, c}, rng), wt = leaf({b, c}, rng), bias = leaf({b}, rng);
      const Tensor w = Tensor::randn({a, b}, rng);
      err = gradcheck([&] { return sum(mul(linear(x, wt, bias), w)); }, {x, wt, bias});
      break;
    }
    case 9: {
      Tensor x = leaf({a, b}, rng);
      const std::uint64_t seed = rng();
      err = gradcheck(
          [&] {
            Rng mask(seed);
            return sum(mul(dropout(x, 0.4, true, mask), x));
          },
          {x});
      break;
    }
    case 10: {
      Tensor z = leaf({a + b, 1}, rng);
      std::vector<double> t(a + b);
      for (auto& v : t) v = static_cast<double>(rng() % 2);
      const Tensor y({a + b, 1}, t);
      const double pw = 0.5 + static_cast<double>(rng() % 4);
      err = gradcheck([&] { return bce_with_logits(z, y, pw); }, {z});
      break;
    }
    default: {
      Tensor x = leaf({a, b, c}, rng);
      const Tensor w = Tensor::randn({a, 2 * b + 1, c + 3}, rng);
      err = gradcheck([&] { return sum(mul(upsample_bilinear(x, 2 * b + 1, c + 3), w)); }, {x});
      break;
    }
  }
  return err;
}

}  // namespace camforge::testing
