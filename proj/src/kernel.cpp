#include "bcq/kernel.hpp"

#include <stdexcept>

namespace bcq {

std::vector<std::uint32_t> pack_row(const Eigen::VectorXf& signs) {
  const Index p = signs.size();
  std::vector<std::uint32_t> words(static_cast<size_t>(words_per_row(p)), 0u);
  for (Index j = 0; j < p; ++j) {
    const float v = signs[j];
    if (v == 1.0f) {
      words[static_cast<size_t>(j >> 5)] |= (1u << (j & 31));
    } else if (v != -1.0f) {
      throw std::invalid_argument("pack_row: entries must be +1 or -1");
    }
  }
  return words;
}

Eigen::VectorXf unpack_row(const std::vector<std::uint32_t>& words, Index length) {
  Eigen::VectorXf out(length);
  for (Index j = 0; j < length; ++j) {
    out[j] = (words[static_cast<size_t>(j >> 5)] >> (j & 31)) & 1u ? 1.0f : -1.0f;
  }
  return out;
}

LutTable build_lut(const Eigen::VectorXf& x, int mu) {
  if (mu < 1 || mu > 16) throw std::invalid_argument("build_lut: mu out of [1,16]");
  LutTable lut;
  lut.mu = mu;
  lut.length = x.size();
  lut.blocks = (x.size() + mu - 1) / mu;
  const Index tsize = Index{1} << mu;
  lut.entries.assign(static_cast<size_t>(lut.blocks * tsize), 0.0f);
  lut.block_sums.assign(static_cast<size_t>(lut.blocks), 0.0f);
  for (Index b = 0; b < lut.blocks; ++b) {
    float* table = lut.entries.data() + b * tsize;
    const Index base = b * mu;
    const Index n = std::min<Index>(mu, x.size() - base);
    // table[m | 1<<k] = table[m] + x_k; 2^mu - 1 additions per block.
    for (Index k = 0; k < n; ++k) {
      const float xk = x[base + k];
      const Index bit = Index{1} << k;
      for (Index m = 0; m < bit; ++m) table[m | bit] = table[m] + xk;
    }
    // Padded positions contribute zero; their subtables are copies.
    for (Index k = n; k < mu; ++k) {
      const Index bit = Index{1} << k;
      for (Index m = 0; m < bit; ++m) table[m | bit] = table[m];
    }
    lut.block_sums[static_cast<size_t>(b)] = table[tsize - 1];
  }
  return lut;
}

namespace {

// Sum of x entries whose plane bit is set, over the full row.
float masked_sum(const std::uint32_t* words, const Eigen::VectorXf& x) {
  float s = 0.0f;
  const Index p = x.size();
  for (Index w = 0, j0 = 0; j0 < p; ++w, j0 += 32) {
    std::uint32_t bits = words[w];
    const Index n = std::min<Index>(32, p - j0);
    for (Index k = 0; k < n && bits; ++k) {
      if (bits & 1u) s += x[j0 + k];
      bits >>= 1;
    }
  }
  return s;
}

// Extract mu plane bits for block b (may straddle a word boundary). The last
// block can extend into padding past the final word; those bits read as 0.
inline std::uint32_t block_pattern(const std::uint32_t* words, Index wpr, Index bit0, int mu) {
  const Index w = bit0 >> 5;
  const int off = static_cast<int>(bit0 & 31);
  std::uint64_t v = words[w] >> off;
  if (off + mu > 32 && w + 1 < wpr) v |= static_cast<std::uint64_t>(words[w + 1]) << (32 - off);
  return static_cast<std::uint32_t>(v & ((std::uint64_t{1} << mu) - 1));
}

void check_dims(const QuantizedTensor& t, Index xlen) {
  if (xlen != t.cols) throw std::invalid_argument("gemv: dimension mismatch");
}

}  // namespace

Eigen::VectorXf gemv_direct(const QuantizedTensor& t, const Eigen::VectorXf& x) {
  check_dims(t, x.size());
  if (!x.allFinite()) throw std::invalid_argument("gemv_direct: non-finite input");
  const float total = x.sum();
  Eigen::VectorXf y(t.rows);
  const Index wpr = words_per_row(t.cols);
  for (Index r = 0; r < t.rows; ++r) {
    const QuantizedRow& row = t.rows_data[static_cast<size_t>(r)];
    float acc = 0.0f;
    for (int i = 0; i < row.bits; ++i) {
      const float dot = 2.0f * masked_sum(row.words.data() + i * wpr, x) - total;
      acc += row.scales[static_cast<size_t>(i)] * dot;
    }
    y[r] = acc;
  }
  return y;
}

Eigen::VectorXf gemv_lut(const QuantizedTensor& t, const LutTable& lut) {
  check_dims(t, lut.length);
  Eigen::VectorXf y(t.rows);
  const Index wpr = words_per_row(t.cols);
  for (Index r = 0; r < t.rows; ++r) {
    const QuantizedRow& row = t.rows_data[static_cast<size_t>(r)];
    float acc = 0.0f;
    for (int i = 0; i < row.bits; ++i) {
      const std::uint32_t* plane = row.words.data() + i * wpr;
      float dot = 0.0f;
      for (Index b = 0; b < lut.blocks; ++b) {
        const std::uint32_t m = block_pattern(plane, wpr, b * lut.mu, lut.mu);
        dot += 2.0f * lut.block(b)[m] - lut.block_sums[static_cast<size_t>(b)];
      }
      acc += row.scales[static_cast<size_t>(i)] * dot;
    }
    y[r] = acc;
  }
  return y;
}

Eigen::VectorXf gemv_lut(const QuantizedTensor& t, const Eigen::VectorXf& x, int mu) {
  return gemv_lut(t, build_lut(x, mu));
}

std::uint64_t memory_footprint(const QuantizedTensor& t) {
  const std::uint64_t wpr = static_cast<std::uint64_t>(words_per_row(t.cols));
  std::uint64_t bytes = 0;
  for (const auto& c : t.clusters) {
    bytes += static_cast<std::uint64_t>(c.row_count) *
             (static_cast<std::uint64_t>(c.bits) * wpr * 4u + static_cast<std::uint64_t>(c.bits) * 4u);
  }
  return bytes;
}

}  // namespace bcq
