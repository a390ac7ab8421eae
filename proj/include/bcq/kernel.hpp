#ifndef BCQ_KERNEL_HPP
#define BCQ_KERNEL_HPP

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "bcq/types.hpp"

namespace bcq {

/// Pack a +-1 vector into 32-bit words, LSB-first: bit (j mod 32) of word
/// j/32 is 1 for +1 and 0 for -1. Padding bits beyond the length stay 0.
std::vector<std::uint32_t> pack_row(const Eigen::VectorXf& signs);

/// Inverse of pack_row.
Eigen::VectorXf unpack_row(const std::vector<std::uint32_t>& words, Index length);

/// Subset-sum tables for the LUT kernel: for each length-mu block of x,
/// table[m] = sum of x entries whose bit is set in m. The input is padded
/// conceptually with zeros to a multiple of mu.
struct LutTable {
  int mu = 0;
  Index length = 0;  // original x length
  Index blocks = 0;
  std::vector<float> entries;     // blocks * (1 << mu)
  std::vector<float> block_sums;  // per-block total of real entries

  const float* block(Index b) const { return entries.data() + b * (Index{1} << mu); }
};

LutTable build_lut(const Eigen::VectorXf& x, int mu);

/// y[row] = sum_i alpha_i * (b_i . x), accumulated plane-by-plane left to
/// right. The dot product uses b.x = 2*(sum of x where bit set) - sum(x).
Eigen::VectorXf gemv_direct(const QuantizedTensor& t, const Eigen::VectorXf& x);

/// Same result as gemv_direct, but per-plane dot products are assembled from
/// precomputed subset sums: b.x = sum over blocks of (2*table[pattern] - block_sum).
Eigen::VectorXf gemv_lut(const QuantizedTensor& t, const Eigen::VectorXf& x, int mu);

/// gemv_lut with a caller-provided table (reuse across planes/tensors sharing x).
Eigen::VectorXf gemv_lut(const QuantizedTensor& t, const LutTable& lut);

/// Exact packed size: sum over rows of q*(ceil(cols/32)*4 + 4) bytes.
std::uint64_t memory_footprint(const QuantizedTensor& t);

}  // namespace bcq

#endif  // BCQ_KERNEL_HPP
