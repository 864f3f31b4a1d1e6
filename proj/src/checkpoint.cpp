// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include "taskvec/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include "json.hpp"
#include <set>

#include "taskvec/error.hpp"
#include "taskvec/half.hpp"
#include "taskvec/io_util.hpp"

namespace taskvec {

using nlohmann::json;

namespace {

// Header documents larger than this are rejected before parsing.
constexpr uint64_t kMaxHeaderBytes = uint64_t{100} << 20;

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra;
    uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    static constexpr uint32_t kMin[] = {0, 0x80, 0x800, 0x10000};
    if (cp < kMin[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += extra + 1;
  }
  return true;
}

void check_name(std::string_view name) {
  if (name.empty()) throw Error(ErrorCode::kInvalidName, "tensor name must be non-empty");
  if (name == kMetadataKey) {
    throw Error(ErrorCode::kInvalidName, "tensor name '__metadata__' is reserved");
  }
  if (!valid_utf8(name)) throw Error(ErrorCode::kInvalidName, "tensor name is not valid UTF-8");
}

[[noreturn]] void malformed(const std::string& what) {
  throw Error(ErrorCode::kMalformedHeader, "malformed header: " + what);
}

uint64_t as_u64(const json& v, const std::string& what) {
  if (!v.is_number_unsigned()) malformed(what + " must be a non-negative integer");
  return v.get<uint64_t>();
}

struct Entry {
  std::string name;
  DType dtype;
  Shape shape;
  uint64_t begin;
  uint64_t end;
};

Entry parse_entry(const std::string& name, const json& v) {
  if (name.empty()) malformed("empty tensor name");
  if (!v.is_object()) malformed("entry '" + name + "' is not an object");
  for (const auto& [key, _] : v.items()) {
    if (key != "dtype" && key != "shape" && key != "data_offsets") {
      malformed("entry '" + name + "' has unknown field '" + key + "'");
    }
  }
  if (!v.contains("dtype") || !v["dtype"].is_string()) malformed("entry '" + name + "' lacks a dtype string");
  if (!v.contains("shape") || !v["shape"].is_array()) malformed("entry '" + name + "' lacks a shape array");
  if (!v.contains("data_offsets") || !v["data_offsets"].is_array() || v["data_offsets"].size() != 2) {
    malformed("entry '" + name + "' lacks a [begin, end] data_offsets pair");
  }
  Entry e;
  e.name = name;
  e.dtype = parse_dtype(v["dtype"].get_ref<const std::string&>());
  for (const auto& d : v["shape"]) e.shape.push_back(as_u64(d, "shape extent of '" + name + "'"));
  e.begin = as_u64(v["data_offsets"][0], "data_offsets of '" + name + "'");
  e.end = as_u64(v["data_offsets"][1], "data_offsets of '" + name + "'");
  if (e.begin > e.end) malformed("data_offsets of '" + name + "' are reversed");

  uint64_t numel;
  try {
    numel = shape_numel(e.shape);
  } catch (const Error&) {
    malformed("shape of '" + name + "' overflows");
  }
  const uint64_t width = dtype_size(e.dtype);
  if (numel > std::numeric_limits<uint64_t>::max() / width) malformed("byte size of '" + name + "' overflows");
  if (e.end - e.begin != numel * width) {
    malformed("data_offsets of '" + name + "' span " + std::to_string(e.end - e.begin) + " bytes, shape needs " +
              std::to_string(numel * width));
  }
  return e;
}

// Parses the header, rejecting duplicate keys in any object (nlohmann would
// silently keep the last one).
json parse_header(std::string_view text) {
  std::vector<std::set<std::string>> seen;
  bool duplicate = false;
  std::string duplicate_key;
  json::parser_callback_t cb = [&](int, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
        seen.emplace_back();
        break;
      case json::parse_event_t::object_end:
        if (!seen.empty()) seen.pop_back();
        break;
      case json::parse_event_t::key:
        if (!seen.empty() && !seen.back().insert(parsed.get<std::string>()).second) {
          duplicate = true;
          duplicate_key = parsed.get<std::string>();
        }
        break;
      default:
        break;
    }
    return true;
  };
  json doc = json::parse(text.begin(), text.end(), cb, /*allow_exceptions=*/false);
  if (doc.is_discarded()) malformed("header is not valid JSON");
  if (duplicate) malformed("duplicate key '" + duplicate_key + "'");
  if (!doc.is_object()) malformed("header is not a JSON object");
  return doc;
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32: return 4;
    case DType::kF16: return 2;
    case DType::kBF16: return 2;
  }
  return 0;
}

std::string_view dtype_name(DType dtype) {
  switch (dtype) {
    case DType::kF32: return "F32";
    case DType::kF16: return "F16";
    case DType::kBF16: return "BF16";
  }
  return "?";
}

DType parse_dtype(std::string_view name) {
  if (name == "F32") return DType::kF32;
  if (name == "F16") return DType::kF16;
  if (name == "BF16") return DType::kBF16;
  throw Error(ErrorCode::kUnsupportedDtype, "unsupported dtype '" + std::string(name) + "'");
}

uint64_t shape_numel(const Shape& shape) {
  uint64_t n = 1;
  for (uint64_t d : shape) {
    if (d != 0 && n > std::numeric_limits<uint64_t>::max() / d) {
      throw Error(ErrorCode::kInvalidTensor, "shape element count overflows");
    }
    n *= d;
  }
  return n;
}

Tensor::Tensor(DType dtype, Shape shape, std::vector<std::byte> bytes)
    : dtype_(dtype), shape_(std::move(shape)), bytes_(std::move(bytes)) {
  const uint64_t n = shape_numel(shape_);
  if (n > std::numeric_limits<std::size_t>::max() / dtype_size(dtype_) || bytes_.size() != n * dtype_size(dtype_)) {
    throw Error(ErrorCode::kInvalidTensor, "payload of " + std::to_string(bytes_.size()) +
                                               " bytes does not match shape and dtype " +
                                               std::string(dtype_name(dtype_)));
  }
  numel_ = static_cast<std::size_t>(n);
}

Tensor Tensor::from_f32(Shape shape, std::span<const float> values) {
  std::vector<std::byte> bytes(values.size_bytes());
  if (!values.empty()) std::memcpy(bytes.data(), values.data(), values.size_bytes());
  return Tensor(DType::kF32, std::move(shape), std::move(bytes));
}

std::span<const float> Tensor::f32() const {
  if (dtype_ != DType::kF32) throw Error(ErrorCode::kInvalidTensor, "tensor is not F32");
  return {reinterpret_cast<const float*>(bytes_.data()), numel_};
}

std::span<float> Tensor::f32_mut() {
  if (dtype_ != DType::kF32) throw Error(ErrorCode::kInvalidTensor, "tensor is not F32");
  return {reinterpret_cast<float*>(bytes_.data()), numel_};
}

std::vector<float> Tensor::to_f32() const {
  std::vector<float> out(numel_);
  if (dtype_ == DType::kF32) {
    if (numel_ > 0) std::memcpy(out.data(), bytes_.data(), bytes_.size());
    return out;
  }
  for (std::size_t i = 0; i < numel_; ++i) {
    uint16_t h;
    std::memcpy(&h, bytes_.data() + 2 * i, 2);
    out[i] = dtype_ == DType::kF16 ? f16_to_f32(h) : bf16_to_f32(h);
  }
  return out;
}

Tensor Tensor::cast(DType dtype) const {
  if (dtype == dtype_) return *this;
  const std::vector<float> wide = to_f32();
  if (dtype == DType::kF32) return from_f32(shape_, wide);
  std::vector<std::byte> bytes(numel_ * 2);
  for (std::size_t i = 0; i < numel_; ++i) {
    const uint16_t h = dtype == DType::kF16 ? f32_to_f16(wide[i]) : f32_to_bf16(wide[i]);
    std::memcpy(bytes.data() + 2 * i, &h, 2);
  }
  return Tensor(dtype, shape_, std::move(bytes));
}

Checkpoint::Checkpoint(std::vector<std::pair<std::string, Tensor>> tensors, Metadata metadata)
    : metadata_(std::move(metadata)) {
  for (auto& [name, tensor] : tensors) insert(std::move(name), std::move(tensor));
}

void Checkpoint::insert(std::string name, Tensor tensor) {
  check_name(name);
  if (tensors_.contains(name)) throw Error(ErrorCode::kDuplicateName, "duplicate tensor name '" + name + "'");
  tensors_.emplace(std::move(name), std::move(tensor));
}

void Checkpoint::set(std::string name, Tensor tensor) {
  check_name(name);
  tensors_.insert_or_assign(std::move(name), std::move(tensor));
}

const Tensor& Checkpoint::at(std::string_view name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw Error(ErrorCode::kNameSetMismatch, "missing tensor '" + std::string(name) + "'");
  }
  return it->second;
}

std::vector<std::string> tensor_names(const Checkpoint& ckpt) {
  std::vector<std::string> names;
  names.reserve(ckpt.size());
  for (const auto& [name, _] : ckpt.tensors()) names.push_back(name);
  return names;
}

std::vector<std::byte> encode_checkpoint(const Checkpoint& ckpt) {
  json header = json::object();
  if (!ckpt.metadata().empty()) {
    json meta = json::object();
    for (const auto& [k, v] : ckpt.metadata()) {
      if (!valid_utf8(k) || !valid_utf8(v)) {
        throw Error(ErrorCode::kInvalidName, "metadata entry '" + k + "' is not valid UTF-8");
      }
      meta[k] = v;
    }
    header[std::string(kMetadataKey)] = std::move(meta);
  }
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors()) {
    const uint64_t end = offset + t.bytes().size();
    header[name] = {{"dtype", dtype_name(t.dtype())}, {"shape", t.shape()}, {"data_offsets", {offset, end}}};
    offset = end;
  }
  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');

  std::vector<std::byte> out(8 + text.size() + offset);
  const uint64_t n = text.size();
  std::memcpy(out.data(), &n, 8);
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::byte* cursor = out.data() + 8 + text.size();
  for (const auto& [name, t] : ckpt.tensors()) {
    if (!t.bytes().empty()) std::memcpy(cursor, t.bytes().data(), t.bytes().size());
    cursor += t.bytes().size();
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < 8) malformed("file is shorter than the 8-byte length prefix");
  uint64_t n;
  std::memcpy(&n, bytes.data(), 8);
  if (n > kMaxHeaderBytes) malformed("header length " + std::to_string(n) + " exceeds the limit");
  if (n > bytes.size() - 8) {
    malformed("header length " + std::to_string(n) + " exceeds the file size " + std::to_string(bytes.size()));
  }
  const std::string_view text(reinterpret_cast<const char*>(bytes.data() + 8), static_cast<std::size_t>(n));
  const json header = parse_header(text);

  Metadata metadata;
  std::vector<Entry> entries;
  for (const auto& [key, value] : header.items()) {
    if (key == kMetadataKey) {
      if (!value.is_object()) malformed("__metadata__ is not an object");
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) malformed("__metadata__ value for '" + mk + "' is not a string");
        metadata.emplace(mk, mv.get<std::string>());
      }
      continue;
    }
    entries.push_back(parse_entry(key, value));
  }

  const std::span<const std::byte> data = bytes.subspan(8 + static_cast<std::size_t>(n));
  std::vector<const Entry*> by_offset;
  by_offset.reserve(entries.size());
  for (const auto& e : entries) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(), [](const Entry* a, const Entry* b) {
    return a->begin != b->begin ? a->begin < b->begin : a->end < b->end;
  });
  uint64_t cursor = 0;
  for (const Entry* e : by_offset) {
    if (e->begin < cursor) {
      throw Error(ErrorCode::kOverlappingOffsets, "data_offsets of '" + e->name + "' overlap a previous tensor");
    }
    if (e->begin > cursor) malformed("gap in the data region before '" + e->name + "'");
    cursor = e->end;
  }
  if (cursor > data.size()) {
    throw Error(ErrorCode::kTruncatedData, "data region holds " + std::to_string(data.size()) +
                                               " bytes but offsets need " + std::to_string(cursor));
  }
  if (cursor < data.size()) malformed("data region has trailing bytes not covered by any tensor");

  Checkpoint ckpt;
  for (auto& e : entries) {
    const auto begin = static_cast<std::size_t>(e.begin);
    std::vector<std::byte> payload(data.begin() + begin, data.begin() + static_cast<std::size_t>(e.end));
    try {
      ckpt.insert(e.name, Tensor(e.dtype, std::move(e.shape), std::move(payload)));
    } catch (const Error& err) {
      malformed(err.what());
    }
  }
  ckpt.metadata() = std::move(metadata);
  return ckpt;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint(bytes);
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  write_file_atomic(path, bytes);
}

}  // namespace taskvec
