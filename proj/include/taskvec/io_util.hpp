// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace taskvec {

// Throws IoFailure.
std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);

// Writes to "<path>.tmp-<pid>" and renames over `path`, so readers see either
// the old file or the complete new one.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

// Shortest decimal that parses back to the same double.
std::string format_double(double value);

// RFC 4180 quoting, applied only when the field needs it.
std::string csv_escape(std::string_view field);

}  // namespace taskvec
