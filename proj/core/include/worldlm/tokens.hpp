#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "worldlm/rng.hpp"

namespace worldlm {

using Token = std::uint16_t;

/// One split of a shard: independent contiguous token segments. Windows never
/// straddle a segment boundary.
struct TokenSplit {
  std::vector<std::vector<Token>> segments;

  std::size_t total_tokens() const;
  /// Number of (context_len + 1)-token windows available.
  std::size_t window_count(std::size_t context_len) const;
  bool empty() const { return total_tokens() == 0; }
  friend bool operator==(const TokenSplit&, const TokenSplit&) = default;
};

/// Row-major [rows x width] token matrix; width = context_len + 1, the last
/// column is the prediction target.
struct TokenBatch {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<Token> tokens;

  const Token* row(std::size_t r) const { return tokens.data() + r * width; }
};

/// Uniform sampling of training windows from a split.
class BatchSampler {
 public:
  BatchSampler(const TokenSplit& split, std::size_t context_len);

  TokenBatch sample(std::size_t batch_size, Rng& rng) const;
  std::size_t window_count() const { return total_; }

 private:
  const TokenSplit* split_;
  std::size_t width_;
  std::vector<std::size_t> prefix_;  // cumulative window counts per segment
  std::size_t total_ = 0;
};

/// Every window of the split, in order, chunked into batches of at most
/// `max_rows` rows.
std::vector<TokenBatch> all_windows(const TokenSplit& split, std::size_t context_len,
                                    std::size_t max_rows = 512);

}  // namespace worldlm
