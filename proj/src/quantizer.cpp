#include "bcq/quantizer.hpp"

#include <stdexcept>

#include "bcq/kernel.hpp"

namespace bcq {

QuantizedRow greedy_quantize_vector(const Eigen::VectorXf& w, int q) {
  const Index p = w.size();
  if (p < 1) throw std::invalid_argument("greedy_quantize_vector: empty vector");
  if (q < 1 || q > kMaxBits) throw std::invalid_argument("greedy_quantize_vector: q out of [1,8]");
  if (!w.allFinite()) throw std::invalid_argument("greedy_quantize_vector: non-finite input");

  QuantizedRow row;
  row.length = p;
  row.bits = q;
  const Index wpr = row.words_per_plane();
  row.words.resize(static_cast<size_t>(q * wpr));
  row.scales.resize(static_cast<size_t>(q));

  Eigen::VectorXf residual = w;
  Eigen::VectorXf signs(p);
  for (int i = 0; i < q; ++i) {
    for (Index j = 0; j < p; ++j) signs[j] = residual[j] < 0.0f ? -1.0f : 1.0f;  // sign(0) = +1
    const float alpha = residual.cwiseAbs().mean();
    auto packed = pack_row(signs);
    std::copy(packed.begin(), packed.end(), row.words.begin() + i * wpr);
    row.scales[static_cast<size_t>(i)] = alpha;
    residual -= alpha * signs;
  }
  return row;
}

QuantizedTensor quantize_matrix(const DenseTensor& w, const std::vector<ClusterBound>& clusters) {
  Index covered = 0;
  for (const auto& c : clusters) covered += c.row_count;
  if (covered != w.rows()) throw std::invalid_argument("quantize_matrix: cluster spec does not cover rows");

  QuantizedTensor t;
  t.name = w.name;
  t.rows = w.rows();
  t.cols = w.cols();
  t.clusters = clusters;
  t.rows_data.reserve(static_cast<size_t>(t.rows));
  Index r = 0;
  for (const auto& c : clusters) {
    for (Index k = 0; k < c.row_count; ++k, ++r) {
      t.rows_data.push_back(greedy_quantize_vector(w.values.row(r).transpose(), c.bits));
    }
  }
  return t;
}

QuantizedTensor quantize_matrix(const DenseTensor& w, int bits) {
  return quantize_matrix(w, {ClusterBound{w.rows(), bits}});
}

DenseTensor dequantize(const QuantizedTensor& t) {
  DenseTensor d;
  d.name = t.name;
  d.values.resize(t.rows, t.cols);
  const Index wpr = words_per_row(t.cols);
  for (Index r = 0; r < t.rows; ++r) {
    const QuantizedRow& row = t.rows_data[static_cast<size_t>(r)];
    Eigen::VectorXf acc = Eigen::VectorXf::Zero(t.cols);
    for (int i = 0; i < row.bits; ++i) {
      std::vector<std::uint32_t> plane(row.words.begin() + i * wpr, row.words.begin() + (i + 1) * wpr);
      acc += row.scales[static_cast<size_t>(i)] * unpack_row(plane, t.cols);
    }
    d.values.row(r) = acc.transpose();
  }
  return d;
}

float quantization_error(const DenseTensor& w, const QuantizedTensor& t) {
  if (w.rows() != t.rows || w.cols() != t.cols) throw std::invalid_argument("quantization_error: shape mismatch");
  return (w.values - dequantize(t).values).norm();
}

}  // namespace bcq
