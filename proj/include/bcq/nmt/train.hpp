#ifndef BCQ_NMT_TRAIN_HPP
#define BCQ_NMT_TRAIN_HPP

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bcq/container.hpp"
#include "bcq/nmt/model.hpp"
#include "bcq/planner.hpp"

namespace bcq::nmt {

struct TrainSchedule {
  Index pnr = 250;
  Index total_steps = 1500;
  double c_lr = 3.0;
  Index steps_peak = 400;
  double d_model_exponent = 0.5;  // as printed; the classic schedule uses -0.5
};

/// lr = c_lr * d_model^e * min(step^-0.5, steps_peak^-0.5), step >= 1.
double lr_at(Index step, const TrainSchedule& s, Index d_model);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-9;
};

struct SyntheticTask {
  enum class Kind { Copy, Reverse };
  Kind kind = Kind::Copy;
  Index min_len = 3;
  Index max_len = 10;
};

constexpr Index kBos = 1;
constexpr Index kEos = 2;
constexpr Index kFirstContent = 3;

struct Example {
  TokenSeq src;
  TokenSeq dec_in;   // BOS + target
  TokenSeq targets;  // target + EOS
};

Example sample_example(const ToyModelConfig& cfg, const SyntheticTask& task, std::mt19937_64& rng);
std::vector<Example> make_eval_set(const ToyModelConfig& cfg, const SyntheticTask& task, Index n,
                                   std::uint64_t seed);

/// Token counts over a task's distribution, for embedding cluster assignment.
FrequencyTable task_frequencies(const ToyModelConfig& cfg, const SyntheticTask& task, Index samples,
                                std::uint64_t seed);

// -- plan application ------------------------------------------------------

/// Resolve the bit layout for one quantizable parameter, or nullopt when the
/// plan keeps it full precision. Throws when the plan does not mention the
/// parameter's group at all (coverage gap) or an embedding ClusterSpec has no
/// frequency table.
std::optional<std::vector<ClusterBound>> resolve_bits(const PrecisionPlan& plan,
                                                      const FrequencyTable* freq,
                                                      const ParamRef<float>& p);

/// Quantize-then-dequantize every targeted weight in place.
void project_to_plan(Model<float>& m, const PrecisionPlan& plan, const FrequencyTable* freq);

/// Packed weights for the kernel-backed forward path, keyed by parameter.
struct QuantOverlay {
  std::unordered_map<const Param<float>*, QuantizedTensor> weights;
  RowMatrixXf dequant_embedding;  // lookup table for input embedding
  bool has_embedding = false;
};

QuantOverlay build_overlay(Model<float>& m, const PrecisionPlan& plan, const FrequencyTable* freq);

/// Forward pass where every targeted matrix product runs through the packed
/// gemv kernel; overlay == nullptr is the plain dense path.
Eigen::VectorXf next_token_logits(Model<float>& m, const QuantOverlay* overlay, const TokenSeq& src,
                                  const TokenSeq& tgt_prefix);

float eval_loss(Model<float>& m, const QuantOverlay* overlay, const std::vector<Example>& eval_set);

// -- training --------------------------------------------------------------

struct LossRecord {
  Index step;
  float loss;
  double lr;
  bool projected;
};

struct TrainResult {
  std::vector<LossRecord> history;
};

/// Plain dense training with Adam and lr_at (no projections).
TrainResult train_dense(Model<float>& m, const TrainSchedule& sched, const SyntheticTask& task,
                        std::uint64_t seed, Index batch_size = 8);

/// Quantization-aware retraining: project at step 0 and every pNR steps,
/// train full-precision weights in between, and return with the weights at
/// their final projection. Throws on divergence (NaN loss).
TrainResult pnr_retrain(Model<float>& m, const PrecisionPlan& plan, const FrequencyTable* freq,
                        const TrainSchedule& sched, const SyntheticTask& task, std::uint64_t seed,
                        Index batch_size = 8);

/// Cumulative-phase retraining (each phase's plan must target a superset of
/// the previous phase's groups); returns one result per phase, warm-starting
/// each phase from the previous one.
std::vector<TrainResult> multiphase_retrain(Model<float>& m, const std::vector<PrecisionPlan>& phases,
                                            const FrequencyTable* freq, const TrainSchedule& sched,
                                            const SyntheticTask& task, std::uint64_t seed,
                                            Index batch_size = 8);

// -- sensitivity sweep -----------------------------------------------------

struct SweepCell {
  std::string group;
  int q;
  double metric;       // eval cross entropy
  double degradation;  // metric - dense baseline
};

/// Quantize one group at a time without retraining, evaluate through the
/// kernel-backed forward, restore, and tabulate.
std::vector<SweepCell> sensitivity_sweep(Model<float>& m, const std::vector<std::string>& groups,
                                         const std::vector<int>& widths,
                                         const std::vector<Example>& eval_set);

// -- checkpoint glue -------------------------------------------------------

std::vector<AnyTensor> model_to_tensors(Model<float>& m);
void tensors_to_model(const std::vector<AnyTensor>& tensors, Model<float>& m);

/// Quantized checkpoint: targeted weights stored packed, the rest dense.
std::vector<AnyTensor> model_to_tensors_quantized(Model<float>& m, const PrecisionPlan& plan,
                                                  const FrequencyTable* freq);

}  // namespace bcq::nmt

#endif  // BCQ_NMT_TRAIN_HPP
