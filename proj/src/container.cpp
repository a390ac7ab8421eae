#include "bcq/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "bcq/kernel.hpp"

static_assert(std::endian::native == std::endian::little, "container assumes a little-endian host");

namespace bcq {

namespace {

using nlohmann::json;

template <typename T>
void put(std::string& out, T v) {
  const char* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

template <typename T>
T get(const std::string& buf, std::uint64_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw std::runtime_error("checkpoint: truncated read");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::uint64_t payload_size(const AnyTensor& t) {
  if (const auto* d = std::get_if<DenseTensor>(&t)) {
    return static_cast<std::uint64_t>(d->rows()) * d->cols() * 4u;
  }
  return memory_footprint(std::get<QuantizedTensor>(t));
}

std::string serialize_payload(const AnyTensor& t) {
  std::string out;
  if (const auto* d = std::get_if<DenseTensor>(&t)) {
    if (!d->values.allFinite()) throw std::runtime_error("checkpoint: non-finite values in " + d->name);
    out.resize(static_cast<size_t>(d->rows() * d->cols() * 4));
    std::memcpy(out.data(), d->values.data(), out.size());
    return out;
  }
  const auto& q = std::get<QuantizedTensor>(t);
  const Index wpr = words_per_row(q.cols);
  for (int plane = 1; plane <= q.max_bits(); ++plane) {
    for (const auto& row : q.rows_data) {
      if (row.bits < plane) continue;
      const auto* w = row.words.data() + (plane - 1) * wpr;
      out.append(reinterpret_cast<const char*>(w), static_cast<size_t>(wpr) * 4);
    }
  }
  for (const auto& row : q.rows_data) {
    out.append(reinterpret_cast<const char*>(row.scales.data()), row.scales.size() * 4);
  }
  return out;
}

AnyTensor parse_payload(const json& meta, const std::string& payload) {
  const std::string name = meta.at("name");
  const Index rows = meta.at("rows").get<Index>();
  const Index cols = meta.at("cols").get<Index>();
  if (rows < 0 || cols < 0) throw std::runtime_error("checkpoint: negative shape for " + name);
  std::uint64_t pos = 0;
  if (meta.at("kind") == "dense") {
    DenseTensor d;
    d.name = name;
    d.values.resize(rows, cols);
    const std::uint64_t need = static_cast<std::uint64_t>(rows) * cols * 4u;
    if (payload.size() != need) throw std::runtime_error("checkpoint: bad dense payload size for " + name);
    std::memcpy(d.values.data(), payload.data(), payload.size());
    if (!d.values.allFinite()) throw std::runtime_error("checkpoint: non-finite values in " + name);
    return d;
  }
  QuantizedTensor q;
  q.name = name;
  q.rows = rows;
  q.cols = cols;
  Index covered = 0;
  for (const auto& c : meta.at("clusters")) {
    q.clusters.push_back({c.at(0).get<Index>(), c.at(1).get<int>()});
    covered += q.clusters.back().row_count;
    if (q.clusters.back().bits < 1 || q.clusters.back().bits > 8) {
      throw std::runtime_error("checkpoint: bit width out of range in " + name);
    }
  }
  if (covered != rows) throw std::runtime_error("checkpoint: clusters do not cover rows in " + name);
  const Index wpr = words_per_row(cols);
  q.rows_data.resize(static_cast<size_t>(rows));
  {
    Index r = 0;
    for (const auto& c : q.clusters) {
      for (Index k = 0; k < c.row_count; ++k, ++r) {
        auto& row = q.rows_data[static_cast<size_t>(r)];
        row.length = cols;
        row.bits = c.bits;
        row.words.resize(static_cast<size_t>(c.bits * wpr));
        row.scales.resize(static_cast<size_t>(c.bits));
      }
    }
  }
  for (int plane = 1; plane <= q.max_bits(); ++plane) {
    for (auto& row : q.rows_data) {
      if (row.bits < plane) continue;
      for (Index w = 0; w < wpr; ++w) {
        row.words[static_cast<size_t>((plane - 1) * wpr + w)] = get<std::uint32_t>(payload, pos);
      }
    }
  }
  for (auto& row : q.rows_data) {
    for (auto& s : row.scales) {
      s = get<float>(payload, pos);
      if (!std::isfinite(s)) throw std::runtime_error("checkpoint: non-finite scale in " + name);
    }
  }
  if (pos != payload.size()) throw std::runtime_error("checkpoint: trailing bytes in " + name);
  return q;
}

}  // namespace

const std::string& tensor_name(const AnyTensor& t) {
  return std::visit([](const auto& x) -> const std::string& { return x.name; }, t);
}

std::uint64_t write_checkpoint(const std::vector<AnyTensor>& tensors, const std::string& path) {
  std::set<std::string> names;
  for (const auto& t : tensors) {
    if (!names.insert(tensor_name(t)).second) {
      throw std::runtime_error("checkpoint: duplicate tensor name " + tensor_name(t));
    }
  }

  json meta;
  meta["tensors"] = json::array();
  std::uint64_t offset = 0;
  std::string payloads;
  for (const auto& t : tensors) {
    const std::uint64_t len = payload_size(t);
    json e;
    e["name"] = tensor_name(t);
    e["offset"] = offset;
    e["length"] = len;
    if (const auto* d = std::get_if<DenseTensor>(&t)) {
      e["kind"] = "dense";
      e["rows"] = d->rows();
      e["cols"] = d->cols();
    } else {
      const auto& q = std::get<QuantizedTensor>(t);
      e["kind"] = "quantized";
      e["rows"] = q.rows;
      e["cols"] = q.cols;
      auto clusters = json::array();
      for (const auto& c : q.clusters) clusters.push_back({c.row_count, c.bits});
      e["clusters"] = clusters;
    }
    meta["tensors"].push_back(e);
    const std::string p = serialize_payload(t);
    if (p.size() != len) throw std::logic_error("checkpoint: payload size mismatch");
    payloads += p;
    offset += len;
  }

  const std::string meta_text = meta.dump();
  std::string header;
  header.append(kMagic, 4);
  put<std::uint32_t>(header, kContainerVersion);
  put<std::uint64_t>(header, meta_text.size());
  header += meta_text;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payloads.data(), static_cast<std::streamsize>(payloads.size()));
  if (!out) throw std::runtime_error("write failure: " + path);
  return header.size() + payloads.size();
}

std::vector<AnyTensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::uint64_t pos = 0;
  if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  pos = 4;
  const auto version = get<std::uint32_t>(buf, pos);
  if (version != kContainerVersion) throw std::runtime_error("checkpoint: version mismatch");
  const auto meta_len = get<std::uint64_t>(buf, pos);
  if (pos + meta_len > buf.size()) throw std::runtime_error("checkpoint: truncated metadata");
  const json meta = json::parse(buf.substr(pos, meta_len));
  const std::uint64_t payload_start = pos + meta_len;

  std::vector<AnyTensor> out;
  std::uint64_t expected_offset = 0;
  for (const auto& e : meta.at("tensors")) {
    const std::uint64_t off = e.at("offset").get<std::uint64_t>();
    const std::uint64_t len = e.at("length").get<std::uint64_t>();
    if (off != expected_offset) throw std::runtime_error("checkpoint: overlapping or out-of-order payloads");
    if (payload_start + off + len > buf.size()) throw std::runtime_error("checkpoint: payload out of bounds");
    out.push_back(parse_payload(e, buf.substr(payload_start + off, len)));
    expected_offset = off + len;
  }
  if (payload_start + expected_offset != buf.size()) {
    throw std::runtime_error("checkpoint: trailing bytes after payloads");
  }
  return out;
}

}  // namespace bcq
