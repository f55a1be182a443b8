#pragma once

#include "cbvp/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cbvp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

/// One named tensor. Values are held as double; a Float32 record is written
/// and read as 32-bit floats, which double represents exactly.
struct TensorRecord {
    std::string name;
    DType dtype = DType::Float64;
    tensor::Shape shape;
    std::vector<double> values;
};

/// File layout, little-endian:
///   "CKPT" | u32 version | u64 tensor count | u64 trailer offset
///   per tensor: u32 name length | name bytes | u8 dtype | u32 rank | u64 dims[rank] | payload
///   trailer: UTF-8 JSON text running to end of file
struct CheckpointFile {
    std::vector<TensorRecord> tensors;
    std::string trailer;
};

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& ckpt);
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

template <typename Real>
std::vector<TensorRecord> to_records(const tensor::ParamMap<Real>& params);

template <typename Real>
tensor::ParamMap<Real> from_records(const std::vector<TensorRecord>& records);

} // namespace cbvp
