#ifndef MINDIFF_TENSOR_IO_HPP
#define MINDIFF_TENSOR_IO_HPP

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>

namespace mindiff {

// Self-describing binary tensor container:
//   magic "MDTN", u32 version, u8 dtype code, u8 ndim, i64 shape[ndim], raw
//   little-endian data. dtype codes: 0=float32, 1=float64, 2=int64, 3=uint8.
void save_tensor(const std::filesystem::path& path, const torch::Tensor& t);
torch::Tensor load_tensor(const std::filesystem::path& path);

// FNV-1a over the raw bytes of a contiguous CPU tensor.
uint64_t tensor_checksum(const torch::Tensor& t);
uint64_t file_checksum(const std::filesystem::path& path);

std::string checksum_hex(uint64_t sum);

}  // namespace mindiff

#endif
