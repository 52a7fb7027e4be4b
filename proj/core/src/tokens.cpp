#include "worldlm/tokens.hpp"

#include <algorithm>
#include <stdexcept>

namespace worldlm {

std::size_t TokenSplit::total_tokens() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.size();
  return n;
}

std::size_t TokenSplit::window_count(std::size_t context_len) const {
  std::size_t n = 0;
  for (const auto& s : segments) {
    if (s.size() > context_len) n += s.size() - context_len;
  }
  return n;
}

BatchSampler::BatchSampler(const TokenSplit& split, std::size_t context_len)
    : split_(&split), width_(context_len + 1) {
  prefix_.reserve(split.segments.size());
  for (const auto& s : split.segments) {
    if (s.size() >= width_) total_ += s.size() - width_ + 1;
    prefix_.push_back(total_);
  }
  if (total_ == 0) throw std::invalid_argument("BatchSampler: split has no complete window");
}

TokenBatch BatchSampler::sample(std::size_t batch_size, Rng& rng) const {
  TokenBatch batch{batch_size, width_, std::vector<Token>(batch_size * width_)};
  std::uniform_int_distribution<std::size_t> pick(0, total_ - 1);
  for (std::size_t r = 0; r < batch_size; ++r) {
    const std::size_t w = pick(rng);
    const auto seg = static_cast<std::size_t>(
        std::upper_bound(prefix_.begin(), prefix_.end(), w) - prefix_.begin());
    const std::size_t start = w - (seg == 0 ? 0 : prefix_[seg - 1]);
    const auto& tokens = split_->segments[seg];
    std::copy_n(tokens.begin() + static_cast<std::ptrdiff_t>(start), width_,
                batch.tokens.begin() + static_cast<std::ptrdiff_t>(r * width_));
  }
  return batch;
}

std::vector<TokenBatch> all_windows(const TokenSplit& split, std::size_t context_len,
                                    std::size_t max_rows) {
  const std::size_t width = context_len + 1;
  std::vector<TokenBatch> out;
  TokenBatch cur{0, width, {}};
  for (const auto& seg : split.segments) {
    for (std::size_t start = 0; start + width <= seg.size(); ++start) {
      cur.tokens.insert(cur.tokens.end(), seg.begin() + static_cast<std::ptrdiff_t>(start),
                        seg.begin() + static_cast<std::ptrdiff_t>(start + width));
      if (++cur.rows == max_rows) {
        out.push_back(std::move(cur));
        cur = TokenBatch{0, width, {}};
      }
    }
  }
  if (cur.rows > 0) out.push_back(std::move(cur));
  return out;
}

}  // namespace worldlm
