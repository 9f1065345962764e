#pragma once

#include <cstddef>

#include "camforge/random.hpp"
#include "camforge/tensor.hpp"

namespace camforge {

enum class Mode { train, eval };

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// max(0, x); the subgradient at exactly 0 is 0.
Tensor relu(const Tensor& x);

enum class ConvAlgorithm {
  direct,  // naive nested loops
  im2col,  // unfold + GEMM, the default
};

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
  ConvAlgorithm algorithm = ConvAlgorithm::im2col;
};

/// input N x C x H x W, kernel O x C x kh x kw, bias O or undefined.
/// Output spatial size is floor((H + 2p - kh) / stride) + 1 per axis.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              Conv2dParams params = {});

/// Running statistics owned by a batch-norm layer. Updated in train mode only.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState create(std::size_t channels);
};

/// Train mode normalizes with biased batch variance and folds the unbiased
/// variance into running_var; eval mode uses the running estimates.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, Mode mode);

/// N x C x H x W -> N x C spatial mean.
Tensor global_avg_pool(const Tensor& x);

/// x N x F, weight O x F, bias O -> N x O.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Inverted dropout. When `active` is false (or rate == 0) the input handle is
/// returned unchanged. A fresh mask is drawn from `rng` on every call.
Tensor dropout(const Tensor& x, double rate, bool active, Rng& rng);

/// Mean over the batch of -[w*y*log(sigmoid(z)) + (1-y)*log(1-sigmoid(z))],
/// evaluated with softplus so large |z| does not overflow.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, double pos_weight);

/// Bilinear resize of the last two axes with half-pixel centres
/// (align_corners = false). Leading axes are treated as a batch.
Tensor upsample_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w);

double sigmoid(double z);

}  // namespace camforge
