#pragma once

// Forward numeric kernels shared by the autodiff ops and the tape-free
// inference path. All matrices are dense row-major doubles.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "plate/tensor.hpp"

namespace plate {

/// p_i = exp(z_i / tau) / sum_j exp(z_j / tau), evaluated with max-subtraction.
/// Throws std::invalid_argument for tau <= 0 or an empty input.
std::vector<double> softmax_with_temperature(std::span<const double> logits, double tau);

/// log of softmax_with_temperature, same preconditions.
std::vector<double> log_softmax_with_temperature(std::span<const double> logits, double tau);

/// Shannon entropy (nats) of a probability vector.
double entropy(std::span<const double> probs);

namespace kernels {

// C (n x m) = A (n x k) * B (k x m), or C += when `accumulate`.
void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
            bool accumulate = false);
// C (n x m) += A^T * B where A is (k x n), B is (k x m).
void matmul_at_b(const double* a, const double* b, double* c, std::size_t k, std::size_t n, std::size_t m);
// C (n x k) += A (n x m) * B^T where B is (k x m).
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t n, std::size_t m, std::size_t k);

// y = x W + b for a row-major x (n x in), W (in x out), b (out).
void linear(const double* x, const double* w, const double* b, double* y, std::size_t n, std::size_t in,
            std::size_t out);

// Row-wise layer normalization. `mean_out`/`rstd_out` (length n) are optional.
void layer_norm(const double* x, const double* gain, const double* bias, double* y, std::size_t n,
                std::size_t width, double eps, double* mean_out = nullptr, double* rstd_out = nullptr);

double gelu(double x);
double gelu_grad(double x);

/// Strided view of one attention head inside packed (rows x width) buffers.
struct HeadView {
  const double* q;
  const double* k;
  const double* v;
  std::size_t q_stride;
  std::size_t k_stride;
  std::size_t v_stride;
  std::size_t n;   // queries
  std::size_t m;   // keys
  std::size_t dim; // head dimension
};

/// Key masking for one attention block.
/// `causal` masks key j for query i when j > i + (m - n). `explicit_mask`, when
/// non-empty, is an n x m matrix with 1 marking masked pairs.
struct AttentionMask {
  bool causal = false;
  std::span<const std::uint8_t> explicit_mask{};

  bool masked(std::size_t i, std::size_t j, std::size_t n, std::size_t m) const {
    if (causal && j > i + (m - n)) return true;
    return !explicit_mask.empty() && explicit_mask[i * m + j] != 0;
  }
};

/// weights (n x m) = softmax(Q K^T * scale) with masked entries set to 0;
/// out (n x dim, stride out_stride) = weights * V.
/// Throws InvalidState when a query row has every key masked.
void attention_head(const HeadView& h, double scale, const AttentionMask& mask, double* weights,
                    double* out, std::size_t out_stride);

}  // namespace kernels

/// Result of single-head scaled dot-product attention.
struct AttentionOutput {
  Tensor context;  // n x d
  Tensor weights;  // n x m
};

/// softmax(Q K^T / tau) V with tau = sqrt(lambda * d), d = Q.cols().
/// `mask` (n x m, nonzero = masked) is optional.
AttentionOutput scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const std::vector<std::uint8_t>* mask, double lambda);

/// 1 / sqrt(lambda * head_dim).
double attention_scale(double lambda, std::size_t head_dim);

}  // namespace plate
