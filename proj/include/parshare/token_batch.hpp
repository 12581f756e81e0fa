#pragma once

#include <cstddef>
#include <vector>

namespace parshare {

// Right-padded id matrix [batch x time] stored row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t time = 0;
  std::vector<int> ids;
  std::vector<std::size_t> lengths;

  // Throws LengthError on an empty batch or an empty sequence.
  static TokenBatch from_sequences(const std::vector<std::vector<int>>& sequences, int pad_id);

  int at(std::size_t b, std::size_t t) const { return ids[b * time + t]; }
  bool is_pad(std::size_t b, std::size_t t) const { return t >= lengths[b]; }
};

}  // namespace parshare
