#ifndef BCQ_CONTAINER_HPP
#define BCQ_CONTAINER_HPP

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "bcq/types.hpp"

namespace bcq {

using AnyTensor = std::variant<DenseTensor, QuantizedTensor>;

inline const char kMagic[4] = {'B', 'C', 'Q', '1'};
constexpr std::uint32_t kContainerVersion = 1;

/// Write a `BCQ1` checkpoint. Layout: magic, version (u32 LE), metadata
/// length (u64 LE), JSON metadata, then concatenated payloads. Metadata
/// offsets are relative to the payload start. Dense payloads are row-major
/// little-endian float32. Quantized payloads store planes plane-major (for
/// each plane i, every row with q >= i contributes its words), then all
/// scales row-major plane-minor. Returns total bytes written.
std::uint64_t write_checkpoint(const std::vector<AnyTensor>& tensors, const std::string& path);

/// Inverse of write_checkpoint. Throws on bad magic, version mismatch,
/// bounds violations, or non-finite floats.
std::vector<AnyTensor> read_checkpoint(const std::string& path);

const std::string& tensor_name(const AnyTensor& t);

}  // namespace bcq

#endif  // BCQ_CONTAINER_HPP
