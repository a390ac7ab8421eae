#ifndef BCQ_TYPES_HPP
#define BCQ_TYPES_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace bcq {

using Index = Eigen::Index;

// Row-major throughout: quantization is per row of W assuming the product W*x.
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using RowMatrixXf = RowMatrix<float>;

/// Full-precision named tensor, row-major float32.
struct DenseTensor {
  std::string name;
  RowMatrixXf values;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
};

/// Contiguous run of rows sharing one bit width.
struct ClusterBound {
  Index row_count = 0;
  int bits = 0;
};

/// One quantized row: q packed sign planes plus q scales.
/// Plane i occupies words [i*words_per_row, (i+1)*words_per_row); bit j of a
/// plane (LSB-first within each 32-bit word) is 1 for +1 and 0 for -1.
struct QuantizedRow {
  Index length = 0;  // p
  int bits = 0;      // q
  std::vector<std::uint32_t> words;
  std::vector<float> scales;

  Index words_per_plane() const { return (length + 31) / 32; }
};

/// Per-row quantized matrix. Rows are grouped into contiguous clusters of
/// equal bit width; `rows_data` keeps one entry per row in original order.
struct QuantizedTensor {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  std::vector<ClusterBound> clusters;
  std::vector<QuantizedRow> rows_data;

  int max_bits() const {
    int q = 0;
    for (const auto& c : clusters) q = std::max(q, c.bits);
    return q;
  }
  double average_bits() const {
    if (rows == 0) return 0.0;
    double s = 0;
    for (const auto& c : clusters) s += static_cast<double>(c.row_count) * c.bits;
    return s / static_cast<double>(rows);
  }
};

inline Index words_per_row(Index cols) { return (cols + 31) / 32; }

}  // namespace bcq

#endif  // BCQ_TYPES_HPP
