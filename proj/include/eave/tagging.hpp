#pragma once

// Sequence-tagging head over the context segment, BIO span decoding and
// span-level micro precision / recall / F1.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "eave/encoder.hpp"
#include "eave/tensor.hpp"

namespace eave {

enum class Tag : int { O = 0, B = 1, I = 2 };
inline constexpr std::size_t kNumTags = 3;

using TagSequence = std::vector<Tag>;

struct SpanPrediction {
  std::size_t token_start = 0;
  std::size_t token_end = 0;  // exclusive
  std::string text;

  bool same_boundaries(const SpanPrediction& o) const {
    return token_start == o.token_start && token_end == o.token_end;
  }
};

// Projects the first context_len rows of the light states to 3 tag logits.
template <typename T>
Tensor<T> tag_logits(const Tensor<T>& states, const TagHeadParams<T>& head, std::size_t context_len);

// Mean token cross-entropy over non-pad context positions.
template <typename T>
Tensor<T> tagging_loss(const Tensor<T>& logits, const TagSequence& gold,
                       std::span<const std::uint8_t> pad_mask);

template <typename T>
TagSequence argmax_tags(const Tensor<T>& logits);

// Maximal B(I)* runs become spans; an I that does not continue a span opens
// one. Positions with mask == 0 are treated as O.
std::vector<SpanPrediction> decode_spans(const TagSequence& tags,
                                         std::span<const std::uint8_t> mask = {});

// BIO encoding of non-overlapping spans; throws on overlap or out-of-range.
TagSequence spans_to_tags(const std::vector<SpanPrediction>& spans, std::size_t length);

struct SpanCounts {
  std::size_t true_positive = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  void finalize();
};

struct EvalReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t true_positive = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
  std::map<std::string, SpanCounts> per_attribute;
};

// Spans for one (product, attribute) pair.
struct LabeledSpans {
  std::string product_id;
  std::string attribute;
  std::vector<SpanPrediction> spans;
};

// Exact-boundary span matching, micro-averaged. A key missing on one side
// counts as an empty span set there. Duplicate keys throw.
EvalReport evaluate(const std::vector<LabeledSpans>& predictions,
                    const std::vector<LabeledSpans>& golds);

void to_json(nlohmann::json& j, const SpanCounts& c);
void to_json(nlohmann::json& j, const EvalReport& r);
void to_json(nlohmann::json& j, const SpanPrediction& s);
void from_json(const nlohmann::json& j, SpanPrediction& s);
void to_json(nlohmann::json& j, const LabeledSpans& s);
void from_json(const nlohmann::json& j, LabeledSpans& s);

}  // namespace eave
