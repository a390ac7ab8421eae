#include "bcq/planner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace bcq {

ClusterSpec cluster_embedding(Index v, int b, double r) {
  if (b < 1 || v < b || r < 1.0) throw std::invalid_argument("cluster_embedding: invalid (v, b, r)");
  double denom = 0.0;
  for (int k = 0; k < b; ++k) denom += std::pow(r, k);
  ClusterSpec spec;
  spec.b = b;
  spec.r = r;
  spec.sizes.resize(static_cast<size_t>(b));
  Index assigned = 0;
  for (int i = 0; i + 1 < b; ++i) {
    const Index s = static_cast<Index>(std::floor(static_cast<double>(v) * std::pow(r, i) / denom));
    spec.sizes[static_cast<size_t>(i)] = s;
    assigned += s;
  }
  spec.sizes[static_cast<size_t>(b - 1)] = v - assigned;  // remainder to the 1-bit cluster
  return spec;
}

WordBitAssignment assign_word_bits(const FrequencyTable& f, const ClusterSpec& spec) {
  const Index v = f.vocab_size();
  if (v != spec.vocab()) throw std::invalid_argument("assign_word_bits: size mismatch with spec");
  WordBitAssignment out;
  out.permutation.resize(static_cast<size_t>(v));
  std::iota(out.permutation.begin(), out.permutation.end(), Index{0});
  std::stable_sort(out.permutation.begin(), out.permutation.end(), [&](Index a, Index b_) {
    const auto ca = f.counts[static_cast<size_t>(a)];
    const auto cb = f.counts[static_cast<size_t>(b_)];
    return ca != cb ? ca > cb : a < b_;
  });
  out.bits.resize(static_cast<size_t>(v));
  Index rank = 0;
  for (int i = 0; i < spec.b; ++i) {
    for (Index k = 0; k < spec.sizes[static_cast<size_t>(i)]; ++k, ++rank) {
      out.bits[static_cast<size_t>(out.permutation[static_cast<size_t>(rank)])] = spec.bits_of(i);
    }
  }
  return out;
}

double average_bits_embedding(const ClusterSpec& spec) {
  double s = 0.0;
  for (int i = 0; i < spec.b; ++i) s += static_cast<double>(spec.sizes[static_cast<size_t>(i)]) * spec.bits_of(i);
  return s / static_cast<double>(spec.vocab());
}

namespace {

// Weight parameters per layer: attention sub-layer has 4 d x d projections,
// feed-forward has 2 matrices of d x d_ffn.
std::uint64_t attn_params(const ModelDims& d) {
  return 4ull * static_cast<std::uint64_t>(d.d_model) * d.d_model;
}
std::uint64_t ffn_params(const ModelDims& d) {
  return 2ull * static_cast<std::uint64_t>(d.d_model) * d.d_ffn;
}

std::uint64_t packed_bytes(Index rows, Index cols, int bits) {
  const std::uint64_t wpr = static_cast<std::uint64_t>(words_per_row(cols));
  return static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(bits) * (wpr * 4u + 4u);
}

struct MatrixShape {
  Index rows;
  Index cols;
};

// Matrices per group instance, quantized-row orientation (W * x).
std::vector<MatrixShape> group_matrices(const std::string& group, const ModelDims& d) {
  const MatrixShape dd{d.d_model, d.d_model};
  if (group == "embedding") return {{d.vocab, d.d_model}};
  if (group == "enc_ee" || group == "dec_dd" || group == "dec_ed") return {dd, dd, dd, dd};
  if (group == "enc_ffn" || group == "dec_ffn") return {{d.d_ffn, d.d_model}, {d.d_model, d.d_ffn}};
  throw std::invalid_argument("unknown group: " + group);
}

std::uint64_t group_layer_count(const std::string& group, const ModelDims& d) {
  if (group == "embedding") return 1;
  if (group.rfind("enc_", 0) == 0) return static_cast<std::uint64_t>(d.n_layers_enc);
  return static_cast<std::uint64_t>(d.n_layers_dec);
}

}  // namespace

std::map<std::string, std::uint64_t> group_param_counts(const ModelDims& dims) {
  std::map<std::string, std::uint64_t> out;
  out["embedding"] = static_cast<std::uint64_t>(dims.vocab) * dims.d_model;
  out["enc_ee"] = attn_params(dims) * dims.n_layers_enc;
  out["enc_ffn"] = ffn_params(dims) * dims.n_layers_enc;
  out["dec_dd"] = attn_params(dims) * dims.n_layers_dec;
  out["dec_ed"] = attn_params(dims) * dims.n_layers_dec;
  out["dec_ffn"] = ffn_params(dims) * dims.n_layers_dec;
  return out;
}

std::uint64_t unquantized_param_count(const ModelDims& d) {
  const std::uint64_t dm = static_cast<std::uint64_t>(d.d_model);
  const std::uint64_t enc_layer = 9ull * dm + static_cast<std::uint64_t>(d.d_ffn);
  const std::uint64_t dec_layer = 15ull * dm + static_cast<std::uint64_t>(d.d_ffn);
  return enc_layer * d.n_layers_enc + dec_layer * d.n_layers_dec + 4ull * dm;  // + final norms
}

double sublayer_average_bits(const PrecisionPlan& plan, Block block) {
  const auto counts = group_param_counts(plan.dims);
  double weighted = 0.0, total = 0.0;
  for (const auto& name : kGroupNames) {
    const bool enc = name.rfind("enc_", 0) == 0;
    const bool dec = name.rfind("dec_", 0) == 0;
    if ((block == Block::Encoder && !enc) || (block == Block::Decoder && !dec)) continue;
    const GroupPlan* g = plan.find(name);
    if (!g) throw std::invalid_argument("sublayer_average_bits: uncovered group " + name);
    const double params = static_cast<double>(counts.at(name));
    double bits = 32.0;
    if (g->clusters) bits = average_bits_embedding(*g->clusters);
    else if (g->bits) bits = static_cast<double>(*g->bits);
    weighted += bits * params;
    total += params;
  }
  return weighted / total;
}

SizeReport model_size(const PrecisionPlan& plan) {
  const auto counts = group_param_counts(plan.dims);
  SizeReport rep;
  double weighted_q = 0.0;
  std::uint64_t target_params = 0;
  std::uint64_t qbytes = 0;
  for (const auto& name : kGroupNames) {
    const GroupPlan* g = plan.find(name);
    if (!g) throw std::invalid_argument("model_size: uncovered group " + name);
    const std::uint64_t params = counts.at(name);
    target_params += params;
    const std::uint64_t layers = group_layer_count(name, plan.dims);
    double bits = 32.0;
    if (g->clusters) {
      bits = average_bits_embedding(*g->clusters);
      const Index cols = plan.dims.d_model;
      for (int i = 0; i < g->clusters->b; ++i) {
        qbytes += packed_bytes(g->clusters->sizes[static_cast<size_t>(i)], cols, g->clusters->bits_of(i));
      }
    } else if (g->bits) {
      bits = static_cast<double>(*g->bits);
      for (const auto& m : group_matrices(name, plan.dims)) {
        qbytes += layers * packed_bytes(m.rows, m.cols, *g->bits);
      }
    } else {
      qbytes += params * 4u;  // group kept full precision
    }
    weighted_q += bits * static_cast<double>(params);
  }
  const std::uint64_t other = unquantized_param_count(plan.dims);
  rep.avg_bits_quantized = weighted_q / static_cast<double>(target_params);
  rep.avg_bits_model = (weighted_q + 32.0 * static_cast<double>(other)) /
                       static_cast<double>(target_params + other);
  rep.quantized_bytes = qbytes + other * 4u;
  rep.dense_bytes = (target_params + other) * 4u;
  rep.ratio = static_cast<double>(rep.dense_bytes) / static_cast<double>(rep.quantized_bytes);
  return rep;
}

FrequencyTable read_frequency_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open frequency file: " + path);
  FrequencyTable f;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("frequency file line " + std::to_string(lineno) + ": missing count");
    }
    f.counts.push_back(std::stoull(line.substr(tab + 1)));
  }
  return f;
}

PrecisionPlan read_plan_file(const std::string& path, const ModelDims& dims) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open plan file: " + path);
  nlohmann::json j;
  in >> j;
  PrecisionPlan plan;
  plan.dims = dims;
  if (j.contains("dims")) {
    const auto& d = j["dims"];
    if (d.contains("d_model")) plan.dims.d_model = d["d_model"].get<Index>();
    if (d.contains("d_ffn")) plan.dims.d_ffn = d["d_ffn"].get<Index>();
    if (d.contains("n_layers_enc")) plan.dims.n_layers_enc = d["n_layers_enc"].get<Index>();
    if (d.contains("n_layers_dec")) plan.dims.n_layers_dec = d["n_layers_dec"].get<Index>();
    if (d.contains("vocab")) plan.dims.vocab = d["vocab"].get<Index>();
  }
  auto parse_group = [&](const nlohmann::json& g) {
    GroupPlan gp;
    if (g.is_number_integer()) {
      gp.bits = g.get<int>();
    } else if (g.is_string() && g.get<std::string>() == "fp") {
      // full precision
    } else if (g.is_object() && g.contains("b") && g.contains("r")) {
      gp.clusters = cluster_embedding(plan.dims.vocab, g["b"].get<int>(), g["r"].get<double>());
    } else {
      throw std::runtime_error("plan group must be an int, \"fp\", or {b, r}");
    }
    return gp;
  };
  for (const auto& [name, g] : j.at("groups").items()) plan.groups[name] = parse_group(g);
  if (j.contains("matrix_overrides")) {
    for (const auto& [name, g] : j["matrix_overrides"].items()) plan.matrix_overrides[name] = parse_group(g);
  }
  return plan;
}

}  // namespace bcq
