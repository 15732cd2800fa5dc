#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "afflow/autodiff/tensor.hpp"

namespace afflow::experiments {

enum class DataSource { kFile, kSynthetic2d, kSyntheticImages };

struct Dataset {
  std::size_t n = 0;
  std::size_t positions = 0;  // D
  std::size_t channels = 0;   // C
  std::vector<float> data;    // n * D * C, row-major
  bool labeled = false;
  std::vector<std::uint32_t> labels;  // n entries when labeled
  DataSource source = DataSource::kFile;

  std::size_t row_size() const { return positions * channels; }
};

// Throws ShapeError when lengths disagree with n, D and C.
void validate(const Dataset& ds);

inline constexpr std::uint32_t kDatasetVersion = 1;

// magic "AFDS" | u32 version | u32 n | u32 D | u32 C | u8 has_labels |
// f32 data | u32 labels, all little-endian
std::string encode_dataset(const Dataset& ds);
Dataset decode_dataset(const std::string& bytes);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Rows [begin, end) as a [rows, D, C] tensor, or the listed rows.
ad::Tensor rows_tensor(const Dataset& ds, std::size_t begin, std::size_t end);
ad::Tensor gather_rows(const Dataset& ds, std::span<const std::size_t> rows);

// Builds a dataset from a [n, D, C] tensor (values rounded to f32).
Dataset from_tensor(const ad::Tensor& t, std::vector<std::uint32_t> labels = {});

}  // namespace afflow::experiments
