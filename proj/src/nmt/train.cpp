#include "bcq/nmt/train.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "bcq/kernel.hpp"
#include "bcq/quantizer.hpp"

namespace bcq::nmt {

double lr_at(Index step, const TrainSchedule& s, Index d_model) {
  if (step < 1) throw std::invalid_argument("lr_at: step must be >= 1");
  const double scale = std::pow(static_cast<double>(d_model), s.d_model_exponent);
  return s.c_lr * scale *
         std::min(1.0 / std::sqrt(static_cast<double>(step)), 1.0 / std::sqrt(static_cast<double>(s.steps_peak)));
}

Example sample_example(const ToyModelConfig& cfg, const SyntheticTask& task, std::mt19937_64& rng) {
  const Index len = task.min_len + static_cast<Index>(rng() % (task.max_len - task.min_len + 1));
  Example ex;
  ex.src.resize(static_cast<size_t>(len));
  for (auto& t : ex.src) t = kFirstContent + static_cast<Index>(rng() % (cfg.vocab - kFirstContent));
  TokenSeq tgt = ex.src;
  if (task.kind == SyntheticTask::Kind::Reverse) std::reverse(tgt.begin(), tgt.end());
  ex.dec_in.push_back(kBos);
  ex.dec_in.insert(ex.dec_in.end(), tgt.begin(), tgt.end());
  ex.targets = tgt;
  ex.targets.push_back(kEos);
  return ex;
}

std::vector<Example> make_eval_set(const ToyModelConfig& cfg, const SyntheticTask& task, Index n,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Example> out;
  out.reserve(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) out.push_back(sample_example(cfg, task, rng));
  return out;
}

FrequencyTable task_frequencies(const ToyModelConfig& cfg, const SyntheticTask& task, Index samples,
                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  FrequencyTable f;
  f.counts.assign(static_cast<size_t>(cfg.vocab), 0);
  for (Index i = 0; i < samples; ++i) {
    auto ex = sample_example(cfg, task, rng);
    for (Index t : ex.src) ++f.counts[static_cast<size_t>(t)];
    for (Index t : ex.dec_in) ++f.counts[static_cast<size_t>(t)];
    for (Index t : ex.targets) ++f.counts[static_cast<size_t>(t)];
  }
  return f;
}

// -- plan application ------------------------------------------------------

namespace {

std::vector<ClusterBound> run_length_bits(const std::vector<int>& bits) {
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

}  // namespace

std::optional<std::vector<ClusterBound>> resolve_bits(const PrecisionPlan& plan,
                                                      const FrequencyTable* freq,
                                                      const ParamRef<float>& p) {
  const GroupPlan* gp = nullptr;
  if (auto it = plan.matrix_overrides.find(p.name); it != plan.matrix_overrides.end()) {
    gp = &it->second;
  } else if (auto git = plan.groups.find(p.group); git != plan.groups.end()) {
    gp = &git->second;
  } else {
    throw std::runtime_error("plan does not cover group '" + p.group + "' (parameter " + p.name + ")");
  }
  if (gp->full_precision()) return std::nullopt;
  const Index rows = p.param->value.rows();
  if (gp->clusters) {
    if (!freq) throw std::runtime_error("embedding cluster plan requires a frequency table");
    if (freq->vocab_size() != rows) throw std::runtime_error("frequency table size does not match vocab");
    return run_length_bits(assign_word_bits(*freq, *gp->clusters).bits);
  }
  return std::vector<ClusterBound>{{rows, *gp->bits}};
}

void project_to_plan(Model<float>& m, const PrecisionPlan& plan, const FrequencyTable* freq) {
  for (auto& p : list_params(m)) {
    if (!p.quantizable) continue;
    auto bits = resolve_bits(plan, freq, p);
    if (!bits) continue;
    DenseTensor w;
    w.name = p.name;
    w.values = p.param->value;
    p.param->value = dequantize(quantize_matrix(w, *bits)).values;
  }
}

QuantOverlay build_overlay(Model<float>& m, const PrecisionPlan& plan, const FrequencyTable* freq) {
  QuantOverlay ov;
  for (auto& p : list_params(m)) {
    if (!p.quantizable) continue;
    auto bits = resolve_bits(plan, freq, p);
    if (!bits) continue;
    DenseTensor w;
    w.name = p.name;
    w.values = p.param->value;
    auto qt = quantize_matrix(w, *bits);
    if (p.name == "embedding") {
      ov.dequant_embedding = dequantize(qt).values;
      ov.has_embedding = true;
    }
    ov.weights.emplace(p.param, std::move(qt));
  }
  return ov;
}

// -- kernel-backed inference forward ---------------------------------------

namespace {

using Mat = RowMatrix<float>;

Mat apply_weight(const Param<float>& p, const QuantOverlay* ov, const Mat& x) {
  if (ov) {
    if (auto it = ov->weights.find(&p); it != ov->weights.end()) {
      Mat y(p.value.rows(), x.cols());
      for (Index c = 0; c < x.cols(); ++c) y.col(c) = gemv_direct(it->second, x.col(c));
      return y;
    }
  }
  return p.value * x;
}

Mat infer_linear(const Linear<float>& lin, const QuantOverlay* ov, const Mat& x) {
  Mat y = apply_weight(lin.w, ov, x);
  y.colwise() += lin.b.value.row(0).transpose();
  return y;
}

Mat infer_ln(const LayerNorm<float>& ln, const Mat& x) {
  Mat y(x.rows(), x.cols());
  for (Index c = 0; c < x.cols(); ++c) {
    const float mu = x.col(c).mean();
    const float var = (x.col(c).array() - mu).square().mean();
    const float inv = 1.0f / std::sqrt(var + static_cast<float>(detail::kLnEps));
    y.col(c) = ((x.col(c).array() - mu) * inv * ln.gamma.value.row(0).transpose().array() +
                ln.beta.value.row(0).transpose().array())
                   .matrix();
  }
  return y;
}

Mat infer_attn(const AttentionBlock<float>& a, const QuantOverlay* ov, const Mat& x,
               const Mat* memory, bool causal, Index n_heads) {
  Mat xn = infer_ln(a.ln, x);
  const Mat& kv = memory ? *memory : xn;
  Mat q = infer_linear(a.wq, ov, xn);
  Mat k = infer_linear(a.wk, ov, kv);
  Mat v = infer_linear(a.wv, ov, kv);
  const Index d = x.rows();
  const Index dh = d / n_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  Mat ctx(d, x.cols());
  for (Index h = 0; h < n_heads; ++h) {
    Mat scores = (q.middleRows(h * dh, dh).transpose() * k.middleRows(h * dh, dh)) * scale;
    if (causal) {
      for (Index r = 0; r < scores.rows(); ++r) {
        for (Index c = r + 1; c < scores.cols(); ++c) scores(r, c) = -1e9f;
      }
    }
    Mat p(scores.rows(), scores.cols());
    for (Index r = 0; r < scores.rows(); ++r) {
      auto row = scores.row(r).array();
      Eigen::Array<float, 1, Eigen::Dynamic> e = (row - row.maxCoeff()).exp();
      p.row(r) = (e / e.sum()).matrix();
    }
    ctx.middleRows(h * dh, dh) = v.middleRows(h * dh, dh) * p.transpose();
  }
  return x + infer_linear(a.wo, ov, ctx);
}

Mat infer_ffn(const FfnBlock<float>& f, const QuantOverlay* ov, const Mat& x) {
  Mat xn = infer_ln(f.ln, x);
  Mat h = infer_linear(f.w1, ov, xn).cwiseMax(0.0f);
  return x + infer_linear(f.w2, ov, h);
}

Mat infer_embed(Model<float>& m, const QuantOverlay* ov, const TokenSeq& tokens) {
  const Index d = m.cfg.d_model;
  const RowMatrixXf& table = (ov && ov->has_embedding) ? ov->dequant_embedding : m.embedding.value;
  Mat x(d, static_cast<Index>(tokens.size()));
  Mat pe = detail::positional_encoding<float>(d, static_cast<Index>(tokens.size()));
  const float scale = std::sqrt(static_cast<float>(d));
  for (size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || tokens[t] >= m.cfg.vocab) throw std::invalid_argument("token id out of range");
    x.col(static_cast<Index>(t)) = table.row(tokens[t]).transpose() * scale + pe.col(static_cast<Index>(t));
  }
  return x;
}

Mat infer_hidden(Model<float>& m, const QuantOverlay* ov, const TokenSeq& src, const TokenSeq& dec_in) {
  Mat x = infer_embed(m, ov, src);
  for (auto& layer : m.enc) {
    x = infer_attn(layer.self, ov, x, nullptr, false, m.cfg.n_heads);
    x = infer_ffn(layer.ffn, ov, x);
  }
  Mat memory = infer_ln(m.enc_final, x);
  Mat y = infer_embed(m, ov, dec_in);
  for (auto& layer : m.dec) {
    y = infer_attn(layer.self, ov, y, nullptr, true, m.cfg.n_heads);
    y = infer_attn(layer.cross, ov, y, &memory, false, m.cfg.n_heads);
    y = infer_ffn(layer.ffn, ov, y);
  }
  return infer_ln(m.dec_final, y);
}

Mat infer_logits(Model<float>& m, const QuantOverlay* ov, const Mat& hidden) {
  return apply_weight(m.embedding, ov, hidden);
}

}  // namespace

Eigen::VectorXf next_token_logits(Model<float>& m, const QuantOverlay* overlay, const TokenSeq& src,
                                  const TokenSeq& tgt_prefix) {
  Mat hidden = infer_hidden(m, overlay, src, tgt_prefix);
  return infer_logits(m, overlay, Mat(hidden.col(hidden.cols() - 1))).col(0);
}

float eval_loss(Model<float>& m, const QuantOverlay* overlay, const std::vector<Example>& eval_set) {
  double total = 0.0;
  std::uint64_t tokens = 0;
  for (const auto& ex : eval_set) {
    Mat hidden = infer_hidden(m, overlay, ex.src, ex.dec_in);
    Mat logits = infer_logits(m, overlay, hidden);
    for (Index t = 0; t < logits.cols(); ++t) {
      auto col = logits.col(t).array();
      const float mx = col.maxCoeff();
      const float z = (col - mx).exp().sum();
      total += std::log(z) + mx - logits(ex.targets[static_cast<size_t>(t)], t);
      ++tokens;
    }
  }
  return static_cast<float>(total / static_cast<double>(tokens));
}

// -- training --------------------------------------------------------------

namespace {

void adam_step(Model<float>& m, double lr, Index t, const AdamConfig& cfg = {}) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& p : list_params(m)) {
    auto& pr = *p.param;
    pr.adam_m = static_cast<float>(cfg.beta1) * pr.adam_m + static_cast<float>(1.0 - cfg.beta1) * pr.grad;
    pr.adam_v = static_cast<float>(cfg.beta2) * pr.adam_v +
                static_cast<float>(1.0 - cfg.beta2) * pr.grad.cwiseProduct(pr.grad);
    auto mhat = pr.adam_m.array() / static_cast<float>(bc1);
    auto vhat = pr.adam_v.array() / static_cast<float>(bc2);
    pr.value.array() -= static_cast<float>(lr) * mhat / (vhat.sqrt() + static_cast<float>(cfg.eps));
  }
}

TrainResult train_loop(Model<float>& m, const PrecisionPlan* plan, const FrequencyTable* freq,
                       const TrainSchedule& sched, const SyntheticTask& task, std::uint64_t seed,
                       Index batch_size) {
  if (sched.pnr < 1 || sched.steps_peak < 1) throw std::invalid_argument("invalid schedule");
  std::mt19937_64 rng(seed);
  TrainResult result;
  for (Index step = 0; step < sched.total_steps; ++step) {
    bool projected = false;
    if (plan && step % sched.pnr == 0) {
      project_to_plan(m, *plan, freq);
      projected = true;
    }
    zero_grads(m);
    double loss = 0.0;
    for (Index b = 0; b < batch_size; ++b) {
      auto ex = sample_example(m.cfg, task, rng);
      loss += sequence_loss(m, ex.src, ex.dec_in, ex.targets, true);
    }
    loss /= static_cast<double>(batch_size);
    if (!std::isfinite(loss)) {
      throw std::runtime_error("training diverged (loss is not finite) at step " + std::to_string(step) +
                               "; consider a larger pNR or smaller learning rate");
    }
    for (auto& p : list_params(m)) p.param->grad /= static_cast<float>(batch_size);
    const double lr = lr_at(step + 1, sched, m.cfg.d_model);
    adam_step(m, lr, step + 1);
    result.history.push_back({step, static_cast<float>(loss), lr, projected});
  }
  if (plan) project_to_plan(m, *plan, freq);
  return result;
}

std::set<std::string> targeted_groups(const PrecisionPlan& plan) {
  std::set<std::string> out;
  for (const auto& [name, gp] : plan.groups) {
    if (!gp.full_precision()) out.insert(name);
  }
  return out;
}

}  // namespace

TrainResult train_dense(Model<float>& m, const TrainSchedule& sched, const SyntheticTask& task,
                        std::uint64_t seed, Index batch_size) {
  return train_loop(m, nullptr, nullptr, sched, task, seed, batch_size);
}

TrainResult pnr_retrain(Model<float>& m, const PrecisionPlan& plan, const FrequencyTable* freq,
                        const TrainSchedule& sched, const SyntheticTask& task, std::uint64_t seed,
                        Index batch_size) {
  return train_loop(m, &plan, freq, sched, task, seed, batch_size);
}

std::vector<TrainResult> multiphase_retrain(Model<float>& m, const std::vector<PrecisionPlan>& phases,
                                            const FrequencyTable* freq, const TrainSchedule& sched,
                                            const SyntheticTask& task, std::uint64_t seed,
                                            Index batch_size) {
  if (phases.empty()) throw std::invalid_argument("multiphase_retrain: no phases");
  for (size_t i = 1; i < phases.size(); ++i) {
    auto prev = targeted_groups(phases[i - 1]);
    auto cur = targeted_groups(phases[i]);
    if (!std::includes(cur.begin(), cur.end(), prev.begin(), prev.end())) {
      throw std::invalid_argument("multiphase_retrain: phase plans must be cumulative");
    }
  }
  std::vector<TrainResult> out;
  for (size_t i = 0; i < phases.size(); ++i) {
    out.push_back(pnr_retrain(m, phases[i], freq, sched, task, seed + i, batch_size));
  }
  return out;
}

std::vector<SweepCell> sensitivity_sweep(Model<float>& m, const std::vector<std::string>& groups,
                                         const std::vector<int>& widths,
                                         const std::vector<Example>& eval_set) {
  std::set<std::string> present;
  for (auto& p : list_params(m)) {
    if (p.quantizable) present.insert(p.group);
  }
  const float baseline = eval_loss(m, nullptr, eval_set);
  std::vector<SweepCell> table;
  for (const auto& group : groups) {
    if (!present.count(group)) throw std::invalid_argument("sensitivity_sweep: group has no parameters: " + group);
    for (int q : widths) {
      float metric = baseline;
      if (q != 32) {  // 32 is the full-precision passthrough row
        PrecisionPlan plan;
        plan.dims = ModelDims{};
        for (const auto& name : kGroupNames) plan.groups[name] = GroupPlan{};
        plan.groups[group].bits = q;
        auto overlay = build_overlay(m, plan, nullptr);
        metric = eval_loss(m, &overlay, eval_set);
      }
      table.push_back({group, q, metric, metric - baseline});
    }
  }
  return table;
}

// -- checkpoint glue -------------------------------------------------------

std::vector<AnyTensor> model_to_tensors(Model<float>& m) {
  std::vector<AnyTensor> out;
  for (auto& p : list_params(m)) {
    DenseTensor t;
    t.name = p.name;
    t.values = p.param->value;
    out.emplace_back(std::move(t));
  }
  return out;
}

void tensors_to_model(const std::vector<AnyTensor>& tensors, Model<float>& m) {
  std::map<std::string, const AnyTensor*> by_name;
  for (const auto& t : tensors) by_name[tensor_name(t)] = &t;
  for (auto& p : list_params(m)) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint missing tensor: " + p.name);
    RowMatrixXf values;
    if (const auto* d = std::get_if<DenseTensor>(it->second)) {
      values = d->values;
    } else {
      values = dequantize(std::get<QuantizedTensor>(*it->second)).values;
    }
    if (values.rows() != p.param->value.rows() || values.cols() != p.param->value.cols()) {
      throw std::runtime_error("checkpoint shape mismatch for " + p.name);
    }
    p.param->value = values;
  }
}

std::vector<AnyTensor> model_to_tensors_quantized(Model<float>& m, const PrecisionPlan& plan,
                                                  const FrequencyTable* freq) {
  std::vector<AnyTensor> out;
  for (auto& p : list_params(m)) {
    std::optional<std::vector<ClusterBound>> bits;
    if (p.quantizable) bits = resolve_bits(plan, freq, p);
    if (bits) {
      DenseTensor w;
      w.name = p.name;
      w.values = p.param->value;
      out.emplace_back(quantize_matrix(w, *bits));
    } else {
      DenseTensor t;
      t.name = p.name;
      t.values = p.param->value;
      out.emplace_back(std::move(t));
    }
  }
  return out;
}

}  // namespace bcq::nmt
