#ifndef BCQ_QUANTIZER_HPP
#define BCQ_QUANTIZER_HPP

#include <vector>

#include <Eigen/Dense>

#include "bcq/types.hpp"

namespace bcq {

constexpr int kMaxBits = 8;

/// Greedy binary-code quantization of one vector:
///   r_1 = w; b_i = sign(r_i) with sign(0) = +1; alpha_i = mean|r_i|;
///   r_{i+1} = r_i - alpha_i * b_i.
/// Returns the packed planes and scales. Throws std::invalid_argument on
/// empty input, q outside [1, 8], or non-finite entries.
QuantizedRow greedy_quantize_vector(const Eigen::VectorXf& w, int q);

/// Quantize each row of W independently with its cluster's bit width.
/// Cluster row counts must sum to W.rows().
QuantizedTensor quantize_matrix(const DenseTensor& w, const std::vector<ClusterBound>& clusters);

/// Uniform bit width for every row.
QuantizedTensor quantize_matrix(const DenseTensor& w, int bits);

/// Reconstruction sum_i alpha_i * b_i per row.
DenseTensor dequantize(const QuantizedTensor& t);

/// Frobenius norm of W - dequantize(t). Shapes must match.
float quantization_error(const DenseTensor& w, const QuantizedTensor& t);

}  // namespace bcq

#endif  // BCQ_QUANTIZER_HPP
