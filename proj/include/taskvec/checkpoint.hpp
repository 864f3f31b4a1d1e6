// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

// Named dense tensors and the on-disk container that holds them.
//
// Container layout:
//   [0, 8)        u64 little-endian N, the header length in bytes
//   [8, 8 + N)    UTF-8 JSON object: name -> {"dtype", "shape", "data_offsets"}
//                 plus an optional "__metadata__" string -> string object
//   [8 + N, end)  raw little-endian payloads; offsets are relative to 8 + N
//
// The writer lays tensors out in lexicographic name order with no gaps and
// pads the header with spaces to a multiple of 8 bytes. The reader accepts
// any payload order as long as the ranges neither overlap nor leave gaps.

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace taskvec {

static_assert(std::endian::native == std::endian::little,
              "payloads are stored little-endian and mapped directly");

enum class DType { kF32, kF16, kBF16 };

std::size_t dtype_size(DType dtype);
std::string_view dtype_name(DType dtype);
// Throws UnsupportedDtype for anything but "F32", "F16", "BF16".
DType parse_dtype(std::string_view name);

using Shape = std::vector<uint64_t>;

// Element count of a shape; the empty shape is a scalar with one element.
// Throws InvalidTensor on overflow.
uint64_t shape_numel(const Shape& shape);

class Tensor {
 public:
  Tensor() : Tensor(DType::kF32, Shape{}, std::vector<std::byte>(4)) {}
  // Throws InvalidTensor unless bytes.size() == numel(shape) * dtype_size.
  Tensor(DType dtype, Shape shape, std::vector<std::byte> bytes);

  static Tensor from_f32(Shape shape, std::span<const float> values);

  DType dtype() const { return dtype_; }
  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return numel_; }
  std::span<const std::byte> bytes() const { return bytes_; }

  // Only valid for F32 tensors; throws InvalidTensor otherwise.
  std::span<const float> f32() const;
  std::span<float> f32_mut();

  // Widens F16/BF16 to F32 exactly; F32 is copied as is.
  std::vector<float> to_f32() const;
  // Narrows or copies to the requested dtype.
  Tensor cast(DType dtype) const;

  // Bitwise equality of dtype, shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dtype_ == b.dtype_ && a.shape_ == b.shape_ && a.bytes_ == b.bytes_;
  }

 private:
  DType dtype_;
  Shape shape_;
  std::size_t numel_;
  std::vector<std::byte> bytes_;
};

inline constexpr std::string_view kMetadataKey = "__metadata__";

using Metadata = std::map<std::string, std::string>;

// Tensors keyed by name, iterated in lexicographic (byte-wise) order.
class Checkpoint {
 public:
  using TensorMap = std::map<std::string, Tensor, std::less<>>;

  Checkpoint() = default;
  // Rejects duplicate, empty or reserved names.
  explicit Checkpoint(std::vector<std::pair<std::string, Tensor>> tensors,
                      Metadata metadata = {});

  // Throws DuplicateName or InvalidName.
  void insert(std::string name, Tensor tensor);
  // Replaces an existing tensor or inserts a new one.
  void set(std::string name, Tensor tensor);

  bool contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }
  // Throws NameSetMismatch naming the missing tensor.
  const Tensor& at(std::string_view name) const;

  const TensorMap& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }

  const Metadata& metadata() const { return metadata_; }
  Metadata& metadata() { return metadata_; }

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) = default;

 private:
  TensorMap tensors_;
  Metadata metadata_;
};

std::vector<std::string> tensor_names(const Checkpoint& ckpt);

// In-memory form of the container. decode never reads outside `bytes` and
// reports malformed input with a typed Error.
std::vector<std::byte> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::byte> bytes);

Checkpoint read_checkpoint(const std::filesystem::path& path);
// Written to a temporary sibling and renamed into place.
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

}  // namespace taskvec
