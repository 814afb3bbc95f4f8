#include "plate/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "plate/errors.hpp"

namespace plate {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;
using ConstStrided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
using Strided = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;

void check_tau(std::span<const double> logits, double tau) {
  if (logits.empty()) throw std::invalid_argument("softmax of an empty vector");
  if (!(tau > 0.0)) throw std::invalid_argument("softmax temperature must be positive");
}

}  // namespace

std::vector<double> softmax_with_temperature(std::span<const double> logits, double tau) {
  check_tau(logits, tau);
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / tau);
    sum += p[i];
  }
  for (auto& x : p) x /= sum;
  return p;
}

std::vector<double> log_softmax_with_temperature(std::span<const double> logits, double tau) {
  check_tau(logits, tau);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp((z - mx) / tau);
  const double log_sum = std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = (logits[i] - mx) / tau - log_sum;
  return out;
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double attention_scale(double lambda, std::size_t head_dim) {
  if (!(lambda > 0.0)) throw std::invalid_argument("attention temperature coefficient must be positive");
#ifdef PLATE_TEMPERATURE_FREE
  return 1.0 / std::sqrt(static_cast<double>(head_dim));
#else
  return 1.0 / std::sqrt(lambda * static_cast<double>(head_dim));
#endif
}

namespace kernels {

void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
            bool accumulate) {
  ConstMap A(a, n, k);
  ConstMap B(b, k, m);
  Map C(c, n, m);
  if (accumulate) {
    C.noalias() += A * B;
  } else {
    C.noalias() = A * B;
  }
}

void matmul_at_b(const double* a, const double* b, double* c, std::size_t k, std::size_t n, std::size_t m) {
  ConstMap A(a, k, n);
  ConstMap B(b, k, m);
  Map C(c, n, m);
  C.noalias() += A.transpose() * B;
}

void matmul_a_bt(const double* a, const double* b, double* c, std::size_t n, std::size_t m, std::size_t k) {
  ConstMap A(a, n, m);
  ConstMap B(b, k, m);
  Map C(c, n, k);
  C.noalias() += A * B.transpose();
}

void linear(const double* x, const double* w, const double* b, double* y, std::size_t n, std::size_t in,
            std::size_t out) {
  ConstMap X(x, n, in);
  ConstMap W(w, in, out);
  Map Y(y, n, out);
  Y.noalias() = X * W;
  if (b != nullptr) {
    Eigen::Map<const Eigen::RowVectorXd> B(b, out);
    Y.rowwise() += B;
  }
}

void layer_norm(const double* x, const double* gain, const double* bias, double* y, std::size_t n,
                std::size_t width, double eps, double* mean_out, double* rstd_out) {
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x + r * width;
    double* yr = y + r * width;
    double mean = 0.0;
    for (std::size_t i = 0; i < width; ++i) mean += xr[i];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t i = 0; i < width; ++i) {
      const double d = xr[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(width);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < width; ++i) yr[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
    if (mean_out) mean_out[r] = mean;
    if (rstd_out) rstd_out[r] = rstd;
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

void attention_head(const HeadView& h, double scale, const AttentionMask& mask, double* weights,
                    double* out, std::size_t out_stride) {
  ConstStrided Q(h.q, h.n, h.dim, Eigen::OuterStride<>(h.q_stride));
  ConstStrided K(h.k, h.m, h.dim, Eigen::OuterStride<>(h.k_stride));
  ConstStrided V(h.v, h.m, h.dim, Eigen::OuterStride<>(h.v_stride));
  Map W(weights, h.n, h.m);
  W.noalias() = Q * K.transpose();
  W *= scale;
  const bool any_mask = mask.causal || !mask.explicit_mask.empty();
  for (std::size_t i = 0; i < h.n; ++i) {
    double* row = weights + i * h.m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < h.m; ++j) {
      if (any_mask && mask.masked(i, j, h.n, h.m)) continue;
      mx = std::max(mx, row[j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw InvalidState("attention row " + std::to_string(i) + " has every key masked");
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < h.m; ++j) {
      if (any_mask && mask.masked(i, j, h.n, h.m)) {
        row[j] = 0.0;
      } else {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
    }
    for (std::size_t j = 0; j < h.m; ++j) row[j] /= sum;
  }
  Strided O(out, h.n, h.dim, Eigen::OuterStride<>(out_stride));
  O.noalias() = W * V;
}

}  // namespace kernels

AttentionOutput scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const std::vector<std::uint8_t>* mask, double lambda) {
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.cols() != d || v.cols() != d || v.rows() != m) {
    throw std::invalid_argument("scaled_attention: Q, K, V must be n x d, m x d, m x d");
  }
  if (mask != nullptr && mask->size() != n * m) {
    throw std::invalid_argument("scaled_attention: mask must be n x m");
  }
  AttentionOutput result{Tensor({n, d}), Tensor({n, m})};
  kernels::HeadView view{q.data(), k.data(), v.data(), d, d, d, n, m, d};
  kernels::AttentionMask am;
  if (mask != nullptr) am.explicit_mask = *mask;
  kernels::attention_head(view, attention_scale(lambda, d), am, result.weights.data(), result.context.data(), d);
  return result;
}

}  // namespace plate
