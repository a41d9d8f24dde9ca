#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace slmt {

// Row-major [rows, cols] matrix of token ids with a validity mask
// (1 = real token, 0 = padding).
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;

  std::span<const std::int32_t> row(std::size_t r) const { return {ids.data() + r * cols, cols}; }
  std::size_t length(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < cols; ++c) n += mask[r * cols + c] ? 1 : 0;
    return n;
  }

  // Pads each sequence on the right with pad_id.
  static TokenMatrix from_rows(const std::vector<std::vector<std::int32_t>>& seqs, std::int32_t pad_id) {
    TokenMatrix m;
    m.rows = seqs.size();
    for (const auto& s : seqs) m.cols = std::max(m.cols, s.size());
    m.ids.assign(m.rows * m.cols, pad_id);
    m.mask.assign(m.rows * m.cols, 0);
    for (std::size_t r = 0; r < m.rows; ++r) {
      for (std::size_t c = 0; c < seqs[r].size(); ++c) {
        m.ids[r * m.cols + c] = seqs[r][c];
        m.mask[r * m.cols + c] = 1;
      }
    }
    return m;
  }
};

}  // namespace slmt
