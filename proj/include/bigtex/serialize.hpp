#pragma once

// Little-endian binary matrix files. Shared layout for node features
// (magic "TAGF") and exported embeddings (magic "TAGE"): magic, u32 rows,
// u32 cols, then row-major f32 data.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace bigtex {

struct F32Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;
};

inline constexpr std::array<char, 4> kFeatureMagic = {'T', 'A', 'G', 'F'};
inline constexpr std::array<char, 4> kEmbeddingMagic = {'T', 'A', 'G', 'E'};
inline constexpr std::array<char, 4> kCheckpointMagic = {'B', 'G', 'T', 'X'};

void write_f32_matrix(const std::string& path, const std::array<char, 4>& magic,
                      const F32Matrix& m);
F32Matrix read_f32_matrix(const std::string& path, const std::array<char, 4>& magic);

// Low-level little-endian primitives used by the checkpoint format as well.
void write_u32(std::ostream& out, std::uint32_t v);
std::uint32_t read_u32(std::istream& in, const std::string& context);
void write_f32_array(std::ostream& out, const float* data, std::size_t count);
void read_f32_array(std::istream& in, float* data, std::size_t count,
                    const std::string& context);

}  // namespace bigtex
