#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace icon {

/// Half-open token range [begin, end) into a context.
struct TokenSpan {
  int begin = 0;
  int end = 0;

  int length() const noexcept { return end - begin; }
  bool contains(int pos) const noexcept { return pos >= begin && pos < end; }
  bool operator==(const TokenSpan&) const = default;
};

/// Per-(layer, head) attention from each generated token's query to the
/// context keys. Rows are restricted to the first `context_len` keys and
/// renormalized, so every row is a probability vector over the context.
///
/// Row i is the query whose logits produced generated token i; for i = 0
/// that is the last context position.
struct AttentionTrace {
  int n_layers = 0;
  int n_heads = 0;
  int context_len = 0;
  int gen_len = 0;
  std::vector<int> context_tokens;
  std::vector<int> generated_tokens;
  std::optional<TokenSpan> injection_span;
  std::vector<double> weights;  // [layer][head][step][key]

  AttentionTrace() = default;
  AttentionTrace(int layers, int heads, int context, int steps)
      : n_layers(layers), n_heads(heads), context_len(context), gen_len(steps),
        weights(static_cast<std::size_t>(layers) * heads * steps * context, 0.0) {}

  std::size_t offset(int layer, int head, int step) const noexcept {
    return ((static_cast<std::size_t>(layer) * n_heads + head) * gen_len + step) *
           static_cast<std::size_t>(context_len);
  }

  std::span<const double> row(int layer, int head, int step) const noexcept {
    return {weights.data() + offset(layer, head, step), static_cast<std::size_t>(context_len)};
  }
  std::span<double> row(int layer, int head, int step) noexcept {
    return {weights.data() + offset(layer, head, step), static_cast<std::size_t>(context_len)};
  }

  bool operator==(const AttentionTrace&) const = default;
};

}  // namespace icon
