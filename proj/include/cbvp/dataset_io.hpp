#pragma once

#include "cbvp/flyby.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cbvp {

inline constexpr std::uint32_t kDatasetFormatVersion = 1;
inline constexpr std::size_t kBinaryHeaderBytes = 32;

/// Header of a .traj / .prefix file: magic "CBVP", u32 version, u64
/// n_samples, u64 n_steps, u64 n_channels, all little-endian.
struct BinaryHeader {
    std::uint32_t version = kDatasetFormatVersion;
    std::uint64_t n_samples = 0;
    std::uint64_t n_steps = 0;
    std::uint64_t n_channels = 0;
};

/// Array payload [n_samples][n_steps][n_channels] of little-endian float64.
struct BinaryArray {
    BinaryHeader header;
    std::vector<double> values;
};

void write_binary_array(const std::filesystem::path& path, const BinaryArray& array);
BinaryArray read_binary_array(const std::filesystem::path& path);

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(std::span<const std::uint8_t> bytes);

/// Writes manifest.json, context.traj and <split>.traj / <split>.prefix.
/// Returns the manifest text.
std::string write_dataset(const Dataset& ds, const std::filesystem::path& dir);

/// Reads a dataset directory, verifying checksums and counts.
Dataset read_dataset(const std::filesystem::path& dir);

} // namespace cbvp
