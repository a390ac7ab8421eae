#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "bcq/kernel.hpp"
#include "bcq/quantizer.hpp"

using namespace bcq;

namespace {

DenseTensor random_dense(std::mt19937& rng, Index rows, Index cols) {
  std::normal_distribution<float> dist;
  DenseTensor w;
  w.name = "w";
  w.values.resize(rows, cols);
  for (auto& x : w.values.reshaped()) x = dist(rng);
  return w;
}

Eigen::VectorXf random_vec(std::mt19937& rng, Index n) {
  std::normal_distribution<float> dist;
  Eigen::VectorXf x(n);
  for (auto& v : x.reshaped()) v = dist(rng);
  return x;
}

void check_close(const Eigen::VectorXf& a, const Eigen::VectorXf& b, float rel = 1e-5f) {
  REQUIRE(a.size() == b.size());
  for (Index i = 0; i < a.size(); ++i) {
    CHECK(std::abs(a[i] - b[i]) <= rel * (1.0f + std::abs(b[i])));
  }
}

}  // namespace

TEST_CASE("pack_row bit layout") {
  CHECK(pack_row(Eigen::VectorXf::Constant(32, 1.0f)) == std::vector<std::uint32_t>{0xFFFFFFFFu});
  CHECK(pack_row(Eigen::VectorXf::Constant(32, -1.0f)) == std::vector<std::uint32_t>{0x00000000u});
  Eigen::VectorXf b(4);
  b << 1, -1, -1, 1;
  CHECK(pack_row(b) == std::vector<std::uint32_t>{0x00000009u});
  Eigen::VectorXf bad(2);
  bad << 1, 0.5f;
  CHECK_THROWS(pack_row(bad));
}

TEST_CASE("pack/unpack round trip on random sign vectors") {
  std::mt19937 rng(17);
  for (int t = 0; t < 200; ++t) {
    const Index p = 1 + static_cast<Index>(rng() % 2048);
    Eigen::VectorXf b(p);
    for (auto& v : b.reshaped()) v = (rng() & 1) ? 1.0f : -1.0f;
    auto words = pack_row(b);
    CHECK(unpack_row(words, p) == b);
    // padding bits beyond p stay clear
    if (p % 32 != 0) {
      CHECK((words.back() >> (p % 32)) == 0u);
    }
  }
}

TEST_CASE("build_lut enumerates subset sums") {
  Eigen::VectorXf x(2);
  x << 1, 2;
  auto lut = build_lut(x, 2);
  REQUIRE(lut.blocks == 1);
  CHECK(lut.block(0)[0] == 0.0f);
  CHECK(lut.block(0)[1] == 1.0f);
  CHECK(lut.block(0)[2] == 2.0f);
  CHECK(lut.block(0)[3] == 3.0f);
  CHECK(lut.block_sums[0] == 3.0f);
}

TEST_CASE("build_lut invariants and validation") {
  std::mt19937 rng(23);
  auto x = random_vec(rng, 37);
  for (int mu : {1, 3, 8, 16}) {
    auto lut = build_lut(x, mu);
    const Index tsize = Index{1} << mu;
    for (Index b = 0; b < lut.blocks; ++b) {
      CHECK(lut.block(b)[0] == 0.0f);
      // last entry is the block's full sum (padding contributes zero)
      float s = 0;
      for (Index j = b * mu; j < std::min<Index>((b + 1) * mu, x.size()); ++j) s += x[j];
      CHECK(lut.block(b)[tsize - 1] == doctest::Approx(s));
    }
  }
  auto zeros = build_lut(Eigen::VectorXf::Zero(8), 4);
  for (float e : zeros.entries) CHECK(e == 0.0f);
  CHECK_THROWS(build_lut(x, 0));
  CHECK_THROWS(build_lut(x, 17));
}

TEST_CASE("gemv_direct matches dense multiply on dequantized weights") {
  std::mt19937 rng(29);
  for (int t = 0; t < 100; ++t) {
    const Index rows = 1 + static_cast<Index>(rng() % 64);
    const Index cols = 1 + static_cast<Index>(rng() % 128);
    const int q = 1 + static_cast<int>(rng() % 4);
    auto w = random_dense(rng, rows, cols);
    auto qt = quantize_matrix(w, q);
    auto x = random_vec(rng, cols);
    check_close(gemv_direct(qt, x), Eigen::VectorXf(dequantize(qt).values * x));
  }
}

TEST_CASE("gemv_direct simple cases") {
  // one-bit all-(+1) row: y = alpha * sum(x)
  DenseTensor w;
  w.name = "w";
  w.values = RowMatrixXf::Constant(1, 40, 3.0f);
  auto qt = quantize_matrix(w, 1);
  std::mt19937 rng(31);
  auto x = random_vec(rng, 40);
  CHECK(gemv_direct(qt, x)[0] == doctest::Approx(3.0f * x.sum()).epsilon(1e-5));
  CHECK(gemv_direct(qt, Eigen::VectorXf::Zero(40)).isZero());
  CHECK_THROWS(gemv_direct(qt, random_vec(rng, 39)));
}

TEST_CASE("gemv_lut agrees with gemv_direct across mu") {
  std::mt19937 rng(37);
  for (int t = 0; t < 100; ++t) {
    const Index rows = 1 + static_cast<Index>(rng() % 48);
    const Index cols = 1 + static_cast<Index>(rng() % 160);
    const int q = 1 + static_cast<int>(rng() % 4);
    const int mu = std::vector<int>{1, 2, 4, 5, 8, 16}[rng() % 6];
    auto qt = quantize_matrix(random_dense(rng, rows, cols), q);
    auto x = random_vec(rng, cols);
    check_close(gemv_lut(qt, x, mu), gemv_direct(qt, x));
  }
}

TEST_CASE("gemv linearity") {
  std::mt19937 rng(41);
  auto qt = quantize_matrix(random_dense(rng, 24, 70), 3);
  auto x1 = random_vec(rng, 70);
  auto x2 = random_vec(rng, 70);
  Eigen::VectorXf combined = gemv_direct(qt, Eigen::VectorXf(2.0f * x1 - 0.5f * x2));
  Eigen::VectorXf parts = 2.0f * gemv_direct(qt, x1) - 0.5f * gemv_direct(qt, x2);
  for (Index i = 0; i < combined.size(); ++i) {
    CHECK(std::abs(combined[i] - parts[i]) <= 1e-4f * (1.0f + std::abs(parts[i])));
  }
}

TEST_CASE("memory_footprint closed form") {
  DenseTensor w;
  w.name = "w";
  w.values = RowMatrixXf::Zero(512, 512);
  CHECK(memory_footprint(quantize_matrix(w, 2)) == 69632u);
  DenseTensor small;
  small.name = "s";
  small.values = RowMatrixXf::Zero(1, 32);
  CHECK(memory_footprint(quantize_matrix(small, 1)) == 8u);

  std::mt19937 rng(43);
  for (int t = 0; t < 50; ++t) {
    const Index rows = 1 + static_cast<Index>(rng() % 100);
    const Index cols = 1 + static_cast<Index>(rng() % 300);
    const int q = 1 + static_cast<int>(rng() % 8);
    DenseTensor d;
    d.name = "d";
    d.values = RowMatrixXf::Zero(rows, cols);
    const std::uint64_t expect =
        static_cast<std::uint64_t>(rows) * (static_cast<std::uint64_t>(q) * ((cols + 31) / 32) * 4 + q * 4u);
    CHECK(memory_footprint(quantize_matrix(d, q)) == expect);
    // strictly smaller than dense whenever the per-row inequality holds
    if (static_cast<std::uint64_t>(q) * (((cols + 31) / 32) * 4u + 4u) < 4u * static_cast<std::uint64_t>(cols)) {
      CHECK(memory_footprint(quantize_matrix(d, q)) < 4u * static_cast<std::uint64_t>(rows * cols));
    }
  }
}
