#ifndef BCQ_PLANNER_HPP
#define BCQ_PLANNER_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bcq/types.hpp"

namespace bcq {

/// Token counts with ids dense in [0, v).
struct FrequencyTable {
  std::vector<std::uint64_t> counts;

  Index vocab_size() const { return static_cast<Index>(counts.size()); }
};

/// Frequency-cluster layout: cluster i holds sizes[i] rows at (b - i) bits,
/// sizes in approximate ratio r^i.
struct ClusterSpec {
  int b = 0;
  double r = 1.0;
  std::vector<Index> sizes;  // b entries summing to v

  Index vocab() const {
    Index v = 0;
    for (Index s : sizes) v += s;
    return v;
  }
  int bits_of(int cluster) const { return b - cluster; }
  std::vector<ClusterBound> bounds() const {
    std::vector<ClusterBound> out;
    for (int i = 0; i < b; ++i) out.push_back({sizes[static_cast<size_t>(i)], b - i});
    return out;
  }
};

/// Bit assignment for one parameter group: either a uniform width, full
/// precision (no quantization), or a frequency ClusterSpec (embedding only).
struct GroupPlan {
  std::optional<int> bits;              // uniform width if set
  std::optional<ClusterSpec> clusters;  // embedding cluster spec if set
  bool full_precision() const { return !bits && !clusters; }
};

/// Transformer shape used for parameter accounting.
struct ModelDims {
  Index d_model = 512;
  Index d_ffn = 2048;
  Index n_layers_enc = 6;
  Index n_layers_dec = 6;
  Index vocab = 32768;
};

inline const std::vector<std::string> kGroupNames = {"embedding", "enc_ee", "enc_ffn",
                                                     "dec_dd",    "dec_ed", "dec_ffn"};

struct PrecisionPlan {
  ModelDims dims;
  std::map<std::string, GroupPlan> groups;                 // keyed by kGroupNames
  std::map<std::string, GroupPlan> matrix_overrides;       // keyed by tensor name

  const GroupPlan* find(const std::string& group) const {
    auto it = groups.find(group);
    return it == groups.end() ? nullptr : &it->second;
  }
};

struct SizeReport {
  double avg_bits_quantized = 0;  // parameter-weighted over quantized targets
  double avg_bits_model = 0;      // including unquantized parameters at 32
  std::uint64_t quantized_bytes = 0;
  std::uint64_t dense_bytes = 0;
  double ratio = 0;
};

/// Frequency-proportional embedding clustering: ideal sizes v*r^i / sum r^k,
/// floor for the first b-1 clusters, remainder absorbed by the last (1-bit)
/// cluster; cluster i gets b - i bits.
ClusterSpec cluster_embedding(Index v, int b, double r);

struct WordBitAssignment {
  std::vector<Index> permutation;  // rank -> token id, by descending count
  std::vector<int> bits;           // per token id
};

/// Sort tokens by descending count (ties by ascending id) and hand out the
/// spec's cluster widths in rank order.
WordBitAssignment assign_word_bits(const FrequencyTable& f, const ClusterSpec& spec);

double average_bits_embedding(const ClusterSpec& spec);

enum class Block { Encoder, Decoder };

/// Parameter-count-weighted mean bit width over a block's sub-layer groups.
double sublayer_average_bits(const PrecisionPlan& plan, Block block);

/// Whole-model accounting: packed-plane + scale bytes for quantized targets,
/// 4 bytes per unquantized parameter (biases, layer norm, FP groups).
SizeReport model_size(const PrecisionPlan& plan);

/// Parameters per group for the plan's dims (weights targeted by quantization).
std::map<std::string, std::uint64_t> group_param_counts(const ModelDims& dims);

/// Bias and layer-norm parameter count (kept full precision).
std::uint64_t unquantized_param_count(const ModelDims& dims);

/// Read `token<TAB>count` lines into a FrequencyTable; ids are assigned in
/// file order. Missing counts are an error.
FrequencyTable read_frequency_file(const std::string& path);

/// Plan file I/O (JSON): groups map bits, "fp", or {"b":..,"r":..}.
PrecisionPlan read_plan_file(const std::string& path, const ModelDims& dims);

}  // namespace bcq

#endif  // BCQ_PLANNER_HPP
