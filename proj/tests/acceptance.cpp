// Acceptance gate: one pass/fail line per criterion, nonzero exit on any
// failure. Runs standalone (no doctest) so the output stays a readable
// nine-line report.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "bcq/container.hpp"
#include "bcq/kernel.hpp"
#include "bcq/nmt/train.hpp"
#include "bcq/planner.hpp"
#include "bcq/quantizer.hpp"

using namespace bcq;
using namespace bcq::nmt;

namespace {

int g_failures = 0;

void report(int idx, const char* label, bool ok, const std::string& detail) {
  std::printf("[%s] criterion %d: %s (%s)\n", ok ? "PASS" : "FAIL", idx, label, detail.c_str());
  if (!ok) ++g_failures;
}

bool near(double x, double target, double tol) { return std::abs(x - target) <= tol; }

/// The base-config mixed plan behind the (2.5, 1.8, 3.7) averages: equal
/// embedding clusters (b=4, r=1), encoder (ee=3, ffn=4), decoder
/// (dd=2, ed=3, ffn=1).
PrecisionPlan base_plan() {
  PrecisionPlan plan;  // default dims: d=512, ffn=2048, 6+6 layers, v=32768
  GroupPlan emb;
  emb.clusters = cluster_embedding(plan.dims.vocab, 4, 1.0);
  plan.groups["embedding"] = emb;
  const std::map<std::string, int> widths = {
      {"enc_ee", 3}, {"enc_ffn", 4}, {"dec_dd", 2}, {"dec_ed", 3}, {"dec_ffn", 1}};
  for (const auto& [g, q] : widths) {
    GroupPlan gp;
    gp.bits = q;
    plan.groups[g] = gp;
  }
  return plan;
}

// -- 1: average-bit reproduction -------------------------------------------

void criterion_1() {
  bool ok = true;
  std::string detail;
  const std::vector<std::pair<double, double>> cases = {
      {1.0, 2.5}, {2.0, 1.733}, {4.0, 1.318}, {8.0, 1.142}};
  for (const auto& [r, want] : cases) {
    const double got = average_bits_embedding(cluster_embedding(32768, 4, r));
    ok = ok && near(got, want, 1e-3);
    detail += "r=" + std::to_string(static_cast<int>(r)) + ":" + std::to_string(got).substr(0, 5) + " ";
  }
  const PrecisionPlan plan = base_plan();
  const double dec = sublayer_average_bits(plan, Block::Decoder);
  const double enc = sublayer_average_bits(plan, Block::Encoder);
  const double model = model_size(plan).avg_bits_quantized;
  ok = ok && near(dec, 1.75, 1e-9) && near(enc, 11.0 / 3.0, 1e-9) && near(model, 2.6, 0.05);
  detail += "dec:" + std::to_string(dec).substr(0, 4) + " enc:" + std::to_string(enc).substr(0, 4) +
            " model:" + std::to_string(model).substr(0, 4);
  report(1, "average-bit reproduction", ok, detail);
}

// -- 2: 1-bit coverage -----------------------------------------------------

void criterion_2() {
  const ClusterSpec spec = cluster_embedding(32768, 4, 8.0);
  const double share = static_cast<double>(spec.sizes.back()) / 32768.0;
  report(2, "87.5% of embedding rows at 1 bit", near(share, 0.875, 0.001),
         std::to_string(share * 100).substr(0, 6) + "%");
}

// -- 3: compression ratio --------------------------------------------------

void criterion_3() {
  const SizeReport sr = model_size(base_plan());
  report(3, "compression ratio within 5% of 11.8", near(sr.ratio, 11.8, 0.05 * 11.8),
         "ratio " + std::to_string(sr.ratio).substr(0, 5));
}

// -- 4: kernel equivalence -------------------------------------------------

void criterion_4() {
  std::mt19937 rng(41);
  std::normal_distribution<float> nd(0.f, 1.f);
  std::uniform_int_distribution<Index> rows_d(1, 512), cols_d(1, 2048);
  std::uniform_int_distribution<int> q_d(1, 4);
  const int mus[] = {1, 4, 8};
  int bad = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const Index rows = rows_d(rng), cols = cols_d(rng);
    DenseTensor w;
    w.name = "t";
    w.values.resize(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) w.values(r, c) = nd(rng);
    Eigen::VectorXf x(cols);
    for (Index c = 0; c < cols; ++c) x(c) = nd(rng);
    const auto qt = quantize_matrix(w, q_d(rng));
    const Eigen::VectorXf ref = dequantize(qt).values * x;
    const Eigen::VectorXf yd = gemv_direct(qt, x);
    const Eigen::VectorXf yl = gemv_lut(qt, x, mus[i % 3]);
    // relative to the result's scale; float summation order differs per path
    const float tol = 1e-5f * (1.f + ref.cwiseAbs().maxCoeff());
    if (((yd - ref).cwiseAbs().maxCoeff() > tol) || ((yl - ref).cwiseAbs().maxCoeff() > tol)) ++bad;
  }
  report(4, "kernel equivalence on 1000 random instances", bad == 0,
         std::to_string(bad) + " mismatches");
}

// -- 5: greedy quantizer properties ----------------------------------------

void criterion_5() {
  std::mt19937 rng(51);
  std::normal_distribution<float> nd(0.f, 1.f);
  std::uniform_int_distribution<Index> p_d(64, 256);
  bool ok = true;
  for (int i = 0; i < 1000 && ok; ++i) {
    const Index p = p_d(rng);
    Eigen::VectorXf w(p);
    for (Index j = 0; j < p; ++j) w(j) = nd(rng);
    const auto qr = greedy_quantize_vector(w, 8);
    // scale ordering and residual-norm monotonicity
    Eigen::VectorXf resid = w;
    float prev_norm = resid.norm();
    for (int k = 0; k < 8; ++k) {
      if (k > 0 && qr.scales[static_cast<size_t>(k)] > qr.scales[static_cast<size_t>(k - 1)] + 1e-7f)
        ok = false;
      const std::vector<std::uint32_t> plane(
          qr.words.begin() + k * qr.words_per_plane(),
          qr.words.begin() + (k + 1) * qr.words_per_plane());
      resid -= qr.scales[static_cast<size_t>(k)] * unpack_row(plane, p);
      const float norm = resid.norm();
      if (norm > prev_norm + 1e-5f) ok = false;
      prev_norm = norm;
    }
    // q-monotone reconstruction error
    DenseTensor t;
    t.name = "w";
    t.values = w.transpose();
    float prev_err = std::numeric_limits<float>::max();
    for (int q = 1; q <= 8; ++q) {
      const float err = quantization_error(t, quantize_matrix(t, q));
      if (err > prev_err + 1e-5f) ok = false;
      prev_err = err;
    }
  }
  // worked q=2 example
  Eigen::VectorXf w(4);
  w << 3.f, 1.f, -2.f, 0.5f;
  const auto qr = greedy_quantize_vector(w, 2);
  DenseTensor t;
  t.name = "w";
  t.values = w.transpose();
  const RowMatrixXf deq = dequantize(quantize_matrix(t, 2)).values;
  ok = ok && qr.scales[0] == 1.625f && qr.scales[1] == 0.875f && deq(0, 0) == 2.5f &&
       deq(0, 1) == 0.75f && deq(0, 2) == -2.5f && deq(0, 3) == 0.75f;
  report(5, "greedy quantizer properties on 1000 random vectors", ok,
         ok ? "ordering, monotonicity, hand oracle" : "property violated");
}

// -- 6: memory accounting exactness ----------------------------------------

void criterion_6() {
  std::mt19937 rng(61);
  std::normal_distribution<float> nd(0.f, 1.f);
  std::uniform_int_distribution<Index> rows_d(1, 100), cols_d(1, 300);
  std::uniform_int_distribution<int> q_d(1, 8);
  bool ok = true;
  std::vector<AnyTensor> tensors;
  std::uint64_t payload_bytes = 0;
  for (int i = 0; i < 20; ++i) {
    const Index rows = rows_d(rng), cols = cols_d(rng);
    DenseTensor w;
    w.name = "t" + std::to_string(i);
    w.values.resize(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) w.values(r, c) = nd(rng);
    if (i % 2 == 0) {
      const int q = q_d(rng);
      const auto qt = quantize_matrix(w, q);
      const std::uint64_t expect =
          static_cast<std::uint64_t>(rows) * (static_cast<std::uint64_t>(q) * ((cols + 31) / 32) * 4 + q * 4ull);
      ok = ok && memory_footprint(qt) == expect;
      payload_bytes += expect;
      tensors.emplace_back(qt);
    } else {
      payload_bytes += static_cast<std::uint64_t>(rows) * cols * 4;
      tensors.emplace_back(w);
    }
  }
  const std::string path = (std::filesystem::temp_directory_path() / "bcq_accept6.bcq").string();
  const std::uint64_t written = write_checkpoint(tensors, path);
  ok = ok && std::filesystem::file_size(path) == written;
  std::ifstream f(path, std::ios::binary);
  f.seekg(8);
  std::uint64_t meta_len = 0;
  f.read(reinterpret_cast<char*>(&meta_len), 8);
  ok = ok && written == 4 + 4 + 8 + meta_len + payload_bytes;
  report(6, "memory accounting exactness", ok,
         "file " + std::to_string(written) + " = header " + std::to_string(16 + meta_len) +
             " + payloads " + std::to_string(payload_bytes));
}

// -- 7 & 8: retraining recovery and sensitivity sweep ----------------------

PrecisionPlan toy_uniform_plan(const ToyModelConfig& cfg, int q) {
  PrecisionPlan plan;
  plan.dims = {cfg.d_model, cfg.d_ffn, cfg.n_layers_enc, cfg.n_layers_dec, cfg.vocab};
  for (const auto& g : kGroupNames) {
    GroupPlan gp;
    gp.bits = q;
    plan.groups[g] = gp;
  }
  return plan;
}

void criteria_7_and_8() {
  ToyModelConfig cfg;
  SyntheticTask task;
  task.min_len = 2;
  task.max_len = 5;
  const std::vector<std::uint64_t> seeds = {101, 202, 303};

  bool ok7 = true;
  std::string detail7;
  std::map<std::string, std::map<int, double>> avg_deg;
  size_t cells_total = 0;

  for (const std::uint64_t seed : seeds) {
    auto m = make_model<float>(cfg, seed);
    TrainSchedule dense_sched;
    dense_sched.total_steps = 2500;
    dense_sched.d_model_exponent = -0.5;  // the printed +0.5 rate diverges at toy scale
    train_dense(m, dense_sched, task, seed);
    const auto eval_set = make_eval_set(cfg, task, 64, seed + 1);
    const float dense_loss = eval_loss(m, nullptr, eval_set);

    // 7: pNR vs quantize-without-retraining, uniform 2-bit
    const PrecisionPlan plan2 = toy_uniform_plan(cfg, 2);
    auto m_naive = m;
    project_to_plan(m_naive, plan2, nullptr);
    const float naive_loss = eval_loss(m_naive, nullptr, eval_set);
    auto m_pnr = m;
    TrainSchedule pnr_sched;
    pnr_sched.total_steps = 1000;
    pnr_sched.pnr = 250;
    pnr_sched.c_lr = 1.0;
    pnr_sched.d_model_exponent = -0.5;
    pnr_retrain(m_pnr, plan2, nullptr, pnr_sched, task, seed + 5);
    const float pnr_loss = eval_loss(m_pnr, nullptr, eval_set);
    ok7 = ok7 && pnr_loss < naive_loss && pnr_loss <= 1.5f * dense_loss;
    detail7 += "seed" + std::to_string(seed) + " dense:" + std::to_string(dense_loss).substr(0, 4) +
               " naive:" + std::to_string(naive_loss).substr(0, 4) +
               " pnr:" + std::to_string(pnr_loss).substr(0, 4) + " ";

    // 8: per-group sweep, averaged across seeds
    const auto cells = sensitivity_sweep(m, kGroupNames, {1, 2, 3, 4}, eval_set);
    cells_total += cells.size();
    for (const auto& c : cells) avg_deg[c.group][c.q] += c.degradation / static_cast<double>(seeds.size());
  }
  report(7, "pNR retraining recovery at 2 bits over 3 seeds", ok7, detail7);

  bool ok8 = cells_total == 3 * 24;
  std::string detail8 = "cells " + std::to_string(cells_total / 3) + "/24;";
  for (auto& [group, by_q] : avg_deg) {
    const bool mono = by_q[1] >= by_q[4];
    ok8 = ok8 && mono;
    if (!mono) detail8 += " " + group + " not monotone;";
  }
  if (ok8) detail8 += " q=1 degradation >= q=4 for all 6 groups";
  report(8, "sensitivity sweep cardinality and monotonicity", ok8, detail8);
}

// -- 9: relative kernel benchmark ------------------------------------------

void criterion_9() {
  std::mt19937 rng(91);
  std::normal_distribution<float> nd(0.f, 1.f);
  DenseTensor w;
  w.name = "bench";
  w.values.resize(512, 512);
  for (Index r = 0; r < 512; ++r)
    for (Index c = 0; c < 512; ++c) w.values(r, c) = nd(rng);
  Eigen::VectorXf x(512);
  for (Index c = 0; c < 512; ++c) x(c) = nd(rng);
  const std::uint64_t dense_bytes = 512ull * 512ull * 4ull;

  bool ok = true;
  std::string detail;
  for (int q = 1; q <= 2; ++q) {
    const auto qt = quantize_matrix(w, q);
    const std::uint64_t bytes = memory_footprint(qt);
    const std::uint64_t expect = 512ull * (static_cast<std::uint64_t>(q) * 16 * 4 + q * 4ull);
    ok = ok && bytes == expect && dense_bytes >= 10 * bytes;
    detail += "q=" + std::to_string(q) + ": " + std::to_string(bytes) + "B (x" +
              std::to_string(dense_bytes / static_cast<double>(bytes)).substr(0, 5) + ") ";
  }
  // wall-clock speedup: reported, not gated
  const auto qt = quantize_matrix(w, 2);
  volatile float sink = 0;
  auto clock_us = [&](auto&& fn) {
    fn();
    std::vector<double> us(101);
    for (auto& u : us) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      u = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    }
    std::sort(us.begin(), us.end());
    return us[us.size() / 2];
  };
  const double t_dense = clock_us([&] {
    float acc = 0;
    for (Index r = 0; r < 512; ++r) acc += w.values.row(r).dot(x.transpose());
    sink = sink + acc;
  });
  const double t_lut = clock_us([&] {
    const auto lut = build_lut(x, 8);
    sink = sink + gemv_lut(qt, lut)(0);
  });
  detail += "lut speedup x" + std::to_string(t_dense / t_lut).substr(0, 5) + " (not gated)";
  report(9, "q<=2 weight memory at least 10x smaller", ok, detail);
}

}  // namespace

int main() {
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criteria_7_and_8();
  criterion_9();
  std::printf("%s: %d of 9 criteria failed\n", g_failures == 0 ? "OK" : "FAILURE", g_failures);
  return g_failures == 0 ? 0 : 1;
}
