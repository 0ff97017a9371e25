#pragma once

// DPWN container: "DPWN" magic, u32 LE version (=1), u64 LE header length,
// UTF-8 JSON header, raw little-endian payload. Tensor entries carry
// {"name","shape","offset","len"} with offset and len in bytes relative to the
// payload start. Weight tensors are real-32; an entry may declare
// "dtype":"f64" for double payloads (pathway aggregates).

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpw/model.hpp"

namespace dpw {

inline constexpr char kDpwnMagic[4] = {'D', 'P', 'W', 'N'};
inline constexpr std::uint32_t kDpwnVersion = 1;

struct DpwnFile {
  nlohmann::json header = nlohmann::json::object();  // everything except "tensors"
  std::map<std::string, Tensor> tensors;
  std::map<std::string, Tensor64> tensors64;
};

namespace detail {

template <typename U>
void put_le(std::vector<char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

template <typename T>
void append_values(std::vector<char>& out, std::span<const T> values) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  if constexpr (std::endian::native == std::endian::little) {
    const auto* p = reinterpret_cast<const char*>(values.data());
    out.insert(out.end(), p, p + values.size_bytes());
  } else {
    for (T v : values) put_le(out, std::bit_cast<U>(v));
  }
}

template <typename T>
std::vector<T> read_values(const char* p, std::size_t count) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<T> v(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(v.data(), p, count * sizeof(T));
  } else {
    for (std::size_t i = 0; i < count; ++i) v[i] = std::bit_cast<T>(get_le<U>(p + i * sizeof(T)));
  }
  return v;
}

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot create '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), Errc::io, "write failed for '" + path + "'");
}

inline std::uint64_t json_u64(const nlohmann::json& j, const char* key, const std::string& ctx) {
  require(j.is_object() && j.contains(key), Errc::malformed_header, ctx + ": missing key '" + key + "'");
  const auto& v = j.at(key);
  require(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0), Errc::malformed_header,
          ctx + ": key '" + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

inline std::string json_string(const nlohmann::json& j, const char* key, const std::string& ctx) {
  require(j.is_object() && j.contains(key) && j.at(key).is_string(), Errc::malformed_header,
          ctx + ": key '" + key + "' must be a string");
  return j.at(key).get<std::string>();
}

inline void json_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& ctx) {
  require(j.is_object(), Errc::malformed_header, ctx + ": expected an object");
  for (const auto& [key, value] : j.items())
    require(std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }), Errc::malformed_header,
            ctx + ": unexpected key '" + key + "'");
}

inline Shape json_shape(const nlohmann::json& j, const std::string& ctx) {
  require(j.is_array() && !j.empty() && j.size() <= 8, Errc::malformed_header, ctx + ": shape must be a non-empty array");
  Shape s;
  std::uint64_t product = 1;
  for (const auto& e : j) {
    require(e.is_number_unsigned() || (e.is_number_integer() && e.get<std::int64_t>() > 0), Errc::malformed_header,
            ctx + ": shape extents must be positive integers");
    const std::uint64_t v = e.get<std::uint64_t>();
    require(v >= 1 && v <= (std::uint64_t{1} << 32), Errc::malformed_header, ctx + ": shape extent out of range");
    require(product <= std::numeric_limits<std::uint64_t>::max() / v, Errc::malformed_header,
            ctx + ": shape product overflows");
    product *= v;
    s.push_back(static_cast<std::size_t>(v));
  }
  require(product <= (std::uint64_t{1} << 40), Errc::malformed_header, ctx + ": shape too large");
  return s;
}

}  // namespace detail

inline std::vector<char> encode_dpwn(const DpwnFile& file) {
  std::vector<char> payload;
  nlohmann::json entries = nlohmann::json::array();
  auto add = [&](const std::string& name, const Shape& shape, auto values, const char* dtype) {
    nlohmann::json e{{"name", name}, {"shape", shape}, {"offset", payload.size()}, {"len", values.size_bytes()}};
    if (dtype) e["dtype"] = dtype;
    entries.push_back(std::move(e));
    detail::append_values(payload, values);
  };
  for (const auto& [name, t] : file.tensors) add(name, t.shape(), t.data(), nullptr);
  for (const auto& [name, t] : file.tensors64) {
    require(!file.tensors.contains(name), Errc::invalid_argument, "duplicate tensor name '" + name + "'");
    add(name, t.shape(), t.data(), "f64");
  }
  nlohmann::json header = file.header.is_object() ? file.header : nlohmann::json::object();
  header["tensors"] = std::move(entries);
  const std::string text = header.dump();

  std::vector<char> out(kDpwnMagic, kDpwnMagic + 4);
  detail::put_le<std::uint32_t>(out, kDpwnVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline DpwnFile decode_dpwn(const std::vector<char>& bytes) {
  require(bytes.size() >= 16, Errc::truncated, "file shorter than the 16-byte preamble");
  require(std::memcmp(bytes.data(), kDpwnMagic, 4) == 0, Errc::bad_magic, "magic is not 'DPWN'");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 4);
  require(version == kDpwnVersion, Errc::unsupported_version, "version " + std::to_string(version));
  const auto header_len = detail::get_le<std::uint64_t>(bytes.data() + 8);
  require(header_len <= bytes.size() - 16, Errc::truncated,
          "header length " + std::to_string(header_len) + " exceeds file size");

  DpwnFile file;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::malformed_header, std::string("header is not valid JSON: ") + e.what());
  }
  require(header.is_object(), Errc::malformed_header, "header must be a JSON object");
  require(header.contains("tensors") && header["tensors"].is_array(), Errc::malformed_header,
          "header lacks a 'tensors' array");

  const char* payload = bytes.data() + 16 + header_len;
  const std::uint64_t payload_size = bytes.size() - 16 - header_len;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> regions;
  for (const auto& e : header["tensors"]) {
    const std::string name = detail::json_string(e, "name", "tensor entry");
    const std::string ctx = "tensor '" + name + "'";
    detail::json_keys(e, {"name", "shape", "offset", "len", "dtype"}, ctx);
    require(e.contains("shape"), Errc::malformed_header, ctx + ": missing shape");
    const Shape shape = detail::json_shape(e["shape"], ctx);
    const std::uint64_t offset = detail::json_u64(e, "offset", ctx);
    const std::uint64_t len = detail::json_u64(e, "len", ctx);
    std::string dtype = "f32";
    if (e.contains("dtype")) dtype = detail::json_string(e, "dtype", ctx);
    require(dtype == "f32" || dtype == "f64", Errc::malformed_header, ctx + ": unknown dtype '" + dtype + "'");
    const std::size_t elem = dtype == "f32" ? 4 : 8;
    require(len == shape_size(shape) * elem, Errc::malformed_header,
            ctx + ": len " + std::to_string(len) + " does not match shape " + shape_string(shape));
    require(offset <= payload_size && len <= payload_size - offset, Errc::truncated,
            ctx + ": data extends past end of file");
    require(!file.tensors.contains(name) && !file.tensors64.contains(name), Errc::malformed_header,
            ctx + ": duplicate name");
    regions.emplace_back(offset, len);
    if (elem == 4)
      file.tensors.emplace(name, Tensor(shape, detail::read_values<float>(payload + offset, shape_size(shape))));
    else
      file.tensors64.emplace(name, Tensor64(shape, detail::read_values<double>(payload + offset, shape_size(shape))));
  }
  // Tensor data must tile the payload exactly: no gaps, overlaps or slack.
  std::sort(regions.begin(), regions.end());
  std::uint64_t end = 0;
  for (auto [offset, len] : regions) {
    require(offset == end, Errc::malformed_header, "tensor data regions overlap or leave gaps");
    end += len;
  }
  require(end == payload_size, Errc::malformed_header,
          "payload holds " + std::to_string(payload_size) + " bytes, tensors cover " + std::to_string(end));
  header.erase("tensors");
  file.header = std::move(header);
  return file;
}

inline DpwnFile read_dpwn(const std::string& path) { return decode_dpwn(detail::read_file(path)); }

inline void write_dpwn(const std::string& path, const DpwnFile& file) { detail::write_file(path, encode_dpwn(file)); }

// ---- model files --------------------------------------------------------------

inline nlohmann::json arch_to_json(const ModelSpec& spec) {
  nlohmann::json arch = nlohmann::json::array();
  for (const LayerSpec& l : spec.layers) {
    nlohmann::json params = nlohmann::json::object();
    if (l.kind == LayerKind::conv)
      params = {{"cout", l.conv.cout}, {"cin", l.conv.cin}, {"k", l.conv.k}, {"pad", l.conv.pad}, {"stride", l.conv.stride}};
    else if (l.kind == LayerKind::linear)
      params = {{"out", l.linear.out}, {"in", l.linear.in}};
    arch.push_back({{"name", l.name}, {"kind", to_string(l.kind)}, {"params", params}});
  }
  return arch;
}

inline ModelSpec spec_from_header(const nlohmann::json& header) {
  ModelSpec spec;
  require(header.contains("arch") && header["arch"].is_array(), Errc::malformed_header, "header lacks an 'arch' array");
  require(header.contains("input_shape"), Errc::malformed_header, "header lacks 'input_shape'");
  spec.input_shape = detail::json_shape(header["input_shape"], "input_shape");
  require(spec.input_shape.size() == 3, Errc::malformed_header, "input_shape must be [C,H,W]");
  spec.classes = detail::json_u64(header, "classes", "header");
  for (const auto& a : header["arch"]) {
    LayerSpec l;
    l.name = detail::json_string(a, "name", "arch entry");
    const std::string ctx = "layer '" + l.name + "'";
    detail::json_keys(a, {"name", "kind", "params"}, ctx);
    l.kind = parse_layer_kind(detail::json_string(a, "kind", ctx));
    const nlohmann::json params = a.contains("params") ? a["params"] : nlohmann::json::object();
    require(params.is_object(), Errc::malformed_header, ctx + ": params must be an object");
    if (l.kind == LayerKind::conv)
      detail::json_keys(params, {"cout", "cin", "k", "pad", "stride"}, ctx + " params");
    else if (l.kind == LayerKind::linear)
      detail::json_keys(params, {"out", "in"}, ctx + " params");
    else
      detail::json_keys(params, {}, ctx + " params");
    if (l.kind == LayerKind::conv) {
      l.conv.cout = detail::json_u64(params, "cout", ctx);
      l.conv.cin = detail::json_u64(params, "cin", ctx);
      l.conv.k = detail::json_u64(params, "k", ctx);
      l.conv.pad = params.contains("pad") ? detail::json_u64(params, "pad", ctx) : (l.conv.k - 1) / 2;
      l.conv.stride = params.contains("stride") ? detail::json_u64(params, "stride", ctx) : 1;
    } else if (l.kind == LayerKind::linear) {
      l.linear.out = detail::json_u64(params, "out", ctx);
      l.linear.in = detail::json_u64(params, "in", ctx);
    }
    spec.layers.push_back(std::move(l));
  }
  spec.finalize();
  return spec;
}

inline Model model_from_dpwn(DpwnFile file) {
  Model m;
  m.spec = spec_from_header(file.header);
  require(file.tensors64.empty(), Errc::malformed_header, "model files hold real-32 tensors only");
  m.weights = std::move(file.tensors);
  m.validate();
  for (const auto& [name, t] : m.weights) {
    bool used = false;
    for (const LayerSpec& l : m.spec.layers) used = used || name == l.weight_name() || name == l.bias_name();
    require(used, Errc::malformed_header, "tensor '" + name + "' belongs to no layer");
  }
  return m;
}

inline Model load_model(const std::string& path) { return model_from_dpwn(read_dpwn(path)); }

inline DpwnFile model_to_dpwn(const Model& model) {
  DpwnFile f;
  f.header["arch"] = arch_to_json(model.spec);
  f.header["input_shape"] = model.spec.input_shape;
  f.header["classes"] = model.spec.classes;
  f.tensors = model.weights;
  return f;
}

inline void save_model(const std::string& path, const Model& model) { write_dpwn(path, model_to_dpwn(model)); }

}  // namespace dpw
