// bcq: quantize checkpoints, benchmark the packed kernels, run the toy
// sweep/retraining pipeline, and inspect BCQ1 files.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bcq/container.hpp"
#include "bcq/kernel.hpp"
#include "bcq/nmt/train.hpp"
#include "bcq/planner.hpp"
#include "bcq/quantizer.hpp"

namespace {

using namespace bcq;
using namespace bcq::nmt;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("BCQ_SEED")) return std::strtoull(env, nullptr, 10);
  return 0;
}

// -- shared helpers --------------------------------------------------------

std::vector<ClusterBound> run_length(const std::vector<int>& bits) {
  std::vector<ClusterBound> out;
  for (int b : bits) {
    if (!out.empty() && out.back().bits == b) {
      ++out.back().row_count;
    } else {
      out.push_back({1, b});
    }
  }
  return out;
}

/// Same result as quantize_matrix but rows split across threads.
QuantizedTensor quantize_parallel(const DenseTensor& w, const std::vector<ClusterBound>& clusters,
                                  int threads) {
  QuantizedTensor t;
  t.name = w.name;
  t.rows = w.rows();
  t.cols = w.cols();
  t.clusters = clusters;
  t.rows_data.resize(static_cast<size_t>(t.rows));
  std::vector<int> row_bits(static_cast<size_t>(t.rows));
  Index at = 0;
  for (const auto& c : clusters) {
    for (Index i = 0; i < c.row_count; ++i) row_bits[static_cast<size_t>(at++)] = c.bits;
  }
  if (at != t.rows) throw std::invalid_argument("cluster row counts do not sum to rows");
  auto work = [&](Index lo, Index hi) {
    for (Index r = lo; r < hi; ++r) {
      t.rows_data[static_cast<size_t>(r)] =
          greedy_quantize_vector(w.values.row(r).transpose(), row_bits[static_cast<size_t>(r)]);
    }
  };
  if (threads <= 1 || t.rows < 2) {
    work(0, t.rows);
  } else {
    const int n = std::min<Index>(threads, t.rows);
    std::vector<std::thread> pool;
    for (int k = 0; k < n; ++k) {
      const Index lo = t.rows * k / n;
      const Index hi = t.rows * (k + 1) / n;
      pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  return t;
}

std::string infer_group(const std::string& name) {
  if (name == "embedding") return "embedding";
  const bool enc = name.rfind("enc.", 0) == 0;
  const bool dec = name.rfind("dec.", 0) == 0;
  if (name.find(".ffn.") != std::string::npos) {
    if (enc) return "enc_ffn";
    if (dec) return "dec_ffn";
  }
  if (enc && name.find(".ee.") != std::string::npos) return "enc_ee";
  if (dec && name.find(".dd.") != std::string::npos) return "dec_dd";
  if (dec && name.find(".ed.") != std::string::npos) return "dec_ed";
  return "";
}

bool quantizable_name(const std::string& name) {
  if (name == "embedding") return true;
  return name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
}

std::optional<std::vector<ClusterBound>> plan_bits(const PrecisionPlan& plan,
                                                   const FrequencyTable* freq,
                                                   const std::string& name, Index rows) {
  const GroupPlan* gp = nullptr;
  if (auto it = plan.matrix_overrides.find(name); it != plan.matrix_overrides.end()) {
    gp = &it->second;
  } else {
    const std::string group = infer_group(name);
    if (auto git = plan.groups.find(group); git != plan.groups.end()) {
      gp = &git->second;
    } else {
      throw std::runtime_error("plan does not cover group '" + group + "' (matrix " + name + ")");
    }
  }
  if (gp->full_precision()) return std::nullopt;
  if (gp->clusters) {
    if (!freq) throw std::runtime_error("embedding cluster plan requires --freq");
    if (freq->vocab_size() != rows) throw std::runtime_error("frequency table size does not match vocab");
    return run_length(assign_word_bits(*freq, *gp->clusters).bits);
  }
  return std::vector<ClusterBound>{{rows, *gp->bits}};
}

double group_avg_bits(const GroupPlan* gp) {
  if (!gp || gp->full_precision()) return 32.0;
  if (gp->clusters) return average_bits_embedding(*gp->clusters);
  return static_cast<double>(*gp->bits);
}

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

// -- quantize --------------------------------------------------------------

struct QuantizeArgs {
  std::string in, plan, freq, out;
};

int cmd_quantize(const QuantizeArgs& a, int threads) {
  auto tensors = read_checkpoint(a.in);
  PrecisionPlan plan = read_plan_file(a.plan, ModelDims{});
  FrequencyTable freq;
  const bool have_freq = !a.freq.empty();
  if (have_freq) freq = read_frequency_file(a.freq);

  std::vector<AnyTensor> out;
  for (auto& t : tensors) {
    if (std::holds_alternative<QuantizedTensor>(t)) {
      out.push_back(std::move(t));
      continue;
    }
    auto& d = std::get<DenseTensor>(t);
    if (!quantizable_name(d.name)) {
      out.push_back(std::move(d));
      continue;
    }
    auto bits = plan_bits(plan, have_freq ? &freq : nullptr, d.name, d.rows());
    if (!bits) {
      out.push_back(std::move(d));
    } else {
      out.push_back(quantize_parallel(d, *bits, threads));
    }
  }

  const std::uint64_t written = write_checkpoint(out, a.out);
  const SizeReport sr = model_size(plan);
  std::cout << "avg bits embedding:    " << group_avg_bits(plan.find("embedding")) << "\n";
  std::cout << "avg bits encoder:      " << sublayer_average_bits(plan, Block::Encoder) << "\n";
  std::cout << "avg bits decoder:      " << sublayer_average_bits(plan, Block::Decoder) << "\n";
  std::cout << "avg bits model:        " << sr.avg_bits_quantized << "\n";
  std::cout << "quantized bytes:       " << sr.quantized_bytes << "\n";
  std::cout << "dense bytes:           " << sr.dense_bytes << "\n";
  std::cout << "compression ratio:     " << sr.ratio << "\n";
  std::cout << "wrote " << a.out << " (" << written << " bytes)\n";
  return 0;
}

// -- bench -----------------------------------------------------------------

struct BenchArgs {
  Index rows = 512, cols = 512;
  int q = 1, mu = 8, iters = 100;
};

struct BenchReport {
  std::string kernel;
  double median_us = 0;
  std::uint64_t bytes = 0;
  double speedup = 1.0;
};

template <typename F>
double median_us(F&& call, int iters) {
  for (int i = 0; i < 3; ++i) call();  // warmup
  std::vector<double> us(static_cast<size_t>(iters));
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    call();
    const auto t1 = std::chrono::steady_clock::now();
    us[static_cast<size_t>(i)] = std::chrono::duration<double, std::micro>(t1 - t0).count();
  }
  std::sort(us.begin(), us.end());
  return us[us.size() / 2];
}

int cmd_bench(const BenchArgs& a, std::uint64_t seed, int threads) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.f, 1.f);
  DenseTensor w;
  w.name = "bench";
  w.values.resize(a.rows, a.cols);
  for (Index r = 0; r < a.rows; ++r) {
    for (Index c = 0; c < a.cols; ++c) w.values(r, c) = nd(rng);
  }
  Eigen::VectorXf x(a.cols);
  for (Index c = 0; c < a.cols; ++c) x(c) = nd(rng);

  const auto qt = quantize_parallel(w, {{a.rows, a.q}}, threads);
  const auto deq = dequantize(qt);

  // agreement gate: both kernels must reproduce dense-on-dequantized
  Eigen::VectorXf y_ref = deq.values * x;
  Eigen::VectorXf y_direct = gemv_direct(qt, x);
  Eigen::VectorXf y_lut = gemv_lut(qt, x, a.mu);
  // summation-order noise is relative to the result's scale, not to
  // individual near-zero elements
  const float tol = 1e-5f * (1.f + y_ref.cwiseAbs().maxCoeff());
  for (Index r = 0; r < a.rows; ++r) {
    if (std::abs(y_direct(r) - y_ref(r)) > tol || std::abs(y_lut(r) - y_direct(r)) > tol) {
      std::cerr << "kernel agreement failure at row " << r << ": ref " << y_ref(r) << " direct "
                << y_direct(r) << " lut " << y_lut(r) << "\n";
      return 1;
    }
  }

  volatile float sink = 0;  // keep the timed calls live
  const std::uint64_t dense_bytes = static_cast<std::uint64_t>(a.rows) * a.cols * 4;
  const std::uint64_t quant_bytes = memory_footprint(qt);

  std::vector<BenchReport> reports;
  reports.push_back({"dense",
                     median_us(
                         [&] {
                           Eigen::VectorXf y = Eigen::VectorXf::Zero(a.rows);
                           for (Index r = 0; r < a.rows; ++r) {
                             float acc = 0;
                             for (Index c = 0; c < a.cols; ++c) acc += w.values(r, c) * x(c);
                             y(r) = acc;
                           }
                           sink = sink + y(0);
                         },
                         a.iters),
                     dense_bytes, 1.0});
  reports.push_back({"gemv_direct", median_us([&] { sink = sink + gemv_direct(qt, x)(0); }, a.iters),
                     quant_bytes, 0});
  reports.push_back({"gemv_lut", median_us(
                                     [&] {
                                       const auto lut = build_lut(x, a.mu);
                                       sink = sink + gemv_lut(qt, lut)(0);
                                     },
                                     a.iters),
                     quant_bytes, 0});
  for (auto& r : reports) r.speedup = reports[0].median_us / r.median_us;

  std::cout << "rows=" << a.rows << " cols=" << a.cols << " q=" << a.q << " mu=" << a.mu
            << " iters=" << a.iters << "\n";
  for (const auto& r : reports) {
    std::cout << r.kernel << ": median " << r.median_us << " us/call, " << r.bytes
              << " bytes touched, speedup x" << r.speedup << "\n";
  }
  std::cout << "weight memory reduction: x"
            << static_cast<double>(dense_bytes) / static_cast<double>(quant_bytes) << "\n";
  return 0;
}

// -- toy model plumbing ----------------------------------------------------

Model<float> load_or_train(const std::string& in, const ToyModelConfig& cfg,
                           const SyntheticTask& task, Index steps, double lr_exp,
                           std::uint64_t seed) {
  auto m = make_model<float>(cfg, seed);
  if (!in.empty()) {
    tensors_to_model(read_checkpoint(in), m);
    return m;
  }
  TrainSchedule sched;
  sched.total_steps = steps;
  sched.d_model_exponent = lr_exp;
  std::cerr << "no --in checkpoint; dense-training " << steps << " steps first\n";
  train_dense(m, sched, task, seed);
  return m;
}

struct SweepArgs {
  std::string in, out;
  std::vector<int> widths = {1, 2, 3, 4};
  Index steps = 300;
  Index eval_n = 64;
  double lr_exp = -0.5;  // the +0.5 variant of the schedule diverges at toy scale
};

int cmd_sweep(const SweepArgs& a, std::uint64_t seed) {
  ToyModelConfig cfg;
  SyntheticTask task;
  auto m = load_or_train(a.in, cfg, task, a.steps, a.lr_exp, seed);
  const auto eval_set = make_eval_set(cfg, task, a.eval_n, seed + 1);
  const auto cells = sensitivity_sweep(m, kGroupNames, a.widths, eval_set);

  std::ostringstream csv;
  csv << "group,q,metric,degradation\n";
  for (const auto& c : cells) csv << c.group << "," << c.q << "," << c.metric << "," << c.degradation << "\n";
  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream f(a.out);
    f << csv.str();
    std::cout << "wrote " << a.out << " (" << cells.size() << " cells)\n";
  }
  return 0;
}

struct TrainToyArgs {
  int phases = 3;
  std::string out_prefix = "toy";
  std::string history;
  std::string in;
  std::string dense_out;
  Index steps = 600;
  Index pnr = 100;
  Index pretrain = 300;
  double lr_exp = -0.5;
};

int cmd_train_toy(const TrainToyArgs& a, std::uint64_t seed) {
  if (a.phases < 1 || a.phases > static_cast<int>(kGroupNames.size())) {
    throw std::runtime_error("--phases must be in [1, 6]");
  }
  ToyModelConfig cfg;
  SyntheticTask task;
  auto m = load_or_train(a.in, cfg, task, a.pretrain, a.lr_exp, seed);
  if (!a.dense_out.empty()) {
    write_checkpoint(model_to_tensors(m), a.dense_out);
    std::cout << "wrote dense checkpoint " << a.dense_out << "\n";
  }
  const FrequencyTable freq = task_frequencies(cfg, task, 20000, seed + 7);

  // cumulative ladder: later phases quantize strictly more groups
  const std::vector<std::string> order = {"embedding", "dec_dd", "dec_ed",
                                          "dec_ffn",   "enc_ee", "enc_ffn"};
  std::vector<PrecisionPlan> phases;
  for (int i = 1; i <= a.phases; ++i) {
    PrecisionPlan plan;
    plan.dims = {cfg.d_model, cfg.d_ffn, cfg.n_layers_enc, cfg.n_layers_dec, cfg.vocab};
    const size_t take = order.size() * static_cast<size_t>(i) / static_cast<size_t>(a.phases);
    for (size_t g = 0; g < take; ++g) {
      GroupPlan gp;
      if (order[g] == "embedding") {
        gp.clusters = cluster_embedding(cfg.vocab, 4, 8.0);
      } else {
        gp.bits = 2;
      }
      plan.groups[order[g]] = gp;
    }
    for (const auto& g : kGroupNames) {
      if (!plan.groups.count(g)) plan.groups[g] = GroupPlan{};  // full precision
    }
    phases.push_back(std::move(plan));
  }

  TrainSchedule sched;
  sched.total_steps = a.steps;
  sched.pnr = a.pnr;
  sched.d_model_exponent = a.lr_exp;
  const auto results = multiphase_retrain(m, phases, &freq, sched, task, seed);

  std::ostringstream hist;
  hist << "step,loss,lr,projected\n";
  Index base = 0;
  for (size_t i = 0; i < results.size(); ++i) {
    for (const auto& rec : results[i].history) {
      hist << base + rec.step << "," << rec.loss << "," << rec.lr << "," << (rec.projected ? 1 : 0)
           << "\n";
    }
    base += a.steps;
    // re-project to this phase's plan so the checkpoint matches its bit layout
    project_to_plan(m, phases[i], &freq);
    const std::string path = a.out_prefix + "_phase" + std::to_string(i + 1) + ".bcq";
    write_checkpoint(model_to_tensors_quantized(m, phases[i], &freq), path);
    std::cout << "phase " << i + 1 << ": final loss " << results[i].history.back().loss << ", wrote "
              << path << "\n";
  }
  if (!a.history.empty()) {
    std::ofstream f(a.history);
    f << hist.str();
    std::cout << "wrote loss history " << a.history << "\n";
  }
  return 0;
}

// -- inspect ---------------------------------------------------------------

int cmd_inspect(const std::string& in) {
  {
    std::ifstream f(in, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + in);
    char magic[4];
    std::uint32_t version = 0;
    std::uint64_t meta_len = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&meta_len), 8);
    std::string meta(meta_len, '\0');
    f.read(meta.data(), static_cast<std::streamsize>(meta_len));
    if (!f) throw std::runtime_error("truncated header in " + in);
    std::cout << "version " << version << ", metadata " << meta_len << " bytes\n";
    std::cout << nlohmann::json::parse(meta).dump(2) << "\n";
  }
  const auto tensors = read_checkpoint(in);  // full validation pass
  for (const auto& t : tensors) {
    if (const auto* d = std::get_if<DenseTensor>(&t)) {
      std::cout << d->name << ": dense " << d->rows() << "x" << d->cols() << "\n";
    } else {
      const auto& q = std::get<QuantizedTensor>(t);
      std::cout << q.name << ": quantized " << q.rows << "x" << q.cols << ", clusters [";
      for (size_t i = 0; i < q.clusters.size(); ++i) {
        if (i) std::cout << ", ";
        std::cout << q.clusters[i].row_count << "x" << q.clusters[i].bits << "b";
      }
      std::cout << "], avg bits " << q.average_bits() << ", " << memory_footprint(q) << " bytes\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"binary-code quantization toolkit"};
  app.require_subcommand(1);
  std::uint64_t seed = default_seed();
  int threads = 1;
  app.add_option("--seed", seed, "rng seed (env BCQ_SEED as fallback)");
  app.add_option("--threads", threads, "worker threads for row-parallel quantization")
      ->check(CLI::PositiveNumber);

  QuantizeArgs qa;
  auto* quantize = app.add_subcommand("quantize", "quantize a dense checkpoint per a plan file");
  quantize->add_option("--in", qa.in, "input BCQ1 checkpoint")->required();
  quantize->add_option("--plan", qa.plan, "JSON precision plan")->required();
  quantize->add_option("--freq", qa.freq, "token<TAB>count frequency file");
  quantize->add_option("--out", qa.out, "output BCQ1 checkpoint")->required();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "microbenchmark dense vs packed gemv");
  bench->add_option("--rows", ba.rows)->check(CLI::PositiveNumber);
  bench->add_option("--cols", ba.cols)->check(CLI::PositiveNumber);
  bench->add_option("--q", ba.q)->check(CLI::Range(1, 8));
  bench->add_option("--mu", ba.mu)->check(CLI::Range(1, 16));
  bench->add_option("--iters", ba.iters)->check(CLI::PositiveNumber);

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "per-group sensitivity sweep on the toy task");
  sweep->add_option("--in", sa.in, "trained toy checkpoint (trains briefly when absent)");
  sweep->add_option("--out", sa.out, "CSV output path (stdout when absent)");
  sweep->add_option("--widths", sa.widths, "bit widths to sweep");
  sweep->add_option("--steps", sa.steps, "dense pretrain steps when no --in");
  sweep->add_option("--eval-n", sa.eval_n, "eval set size");
  sweep->add_option("--lr-exp", sa.lr_exp, "d_model exponent in the lr schedule");

  TrainToyArgs ta;
  auto* train = app.add_subcommand("train-toy", "multi-phase pNR retraining on the toy task");
  train->add_option("--phases", ta.phases, "number of cumulative phases");
  train->add_option("--out-prefix", ta.out_prefix, "checkpoint prefix, one file per phase");
  train->add_option("--history", ta.history, "loss history CSV path");
  train->add_option("--in", ta.in, "dense toy checkpoint to start from");
  train->add_option("--dense-out", ta.dense_out, "also save the pre-phase dense checkpoint here");
  train->add_option("--steps", ta.steps, "steps per phase");
  train->add_option("--pnr", ta.pnr, "projection interval");
  train->add_option("--pretrain", ta.pretrain, "dense pretrain steps when no --in");
  train->add_option("--lr-exp", ta.lr_exp, "d_model exponent in the lr schedule");

  std::string inspect_in;
  auto* inspect = app.add_subcommand("inspect", "print metadata and per-tensor bit statistics");
  inspect->add_option("--in", inspect_in, "BCQ1 checkpoint")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (quantize->parsed()) return cmd_quantize(qa, threads);
    if (bench->parsed()) return cmd_bench(ba, seed, threads);
    if (sweep->parsed()) return cmd_sweep(sa, seed);
    if (train->parsed()) return cmd_train_toy(ta, seed);
    if (inspect->parsed()) return cmd_inspect(inspect_in);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
