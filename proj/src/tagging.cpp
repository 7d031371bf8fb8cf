#include "eave/tagging.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "eave/errors.hpp"

namespace eave {

template <typename T>
Tensor<T> tag_logits(const Tensor<T>& states, const TagHeadParams<T>& head, std::size_t context_len) {
  return linear(slice_rows(states, 0, context_len), head.weight, head.bias);
}

template <typename T>
Tensor<T> tagging_loss(const Tensor<T>& logits, const TagSequence& gold,
                       std::span<const std::uint8_t> pad_mask) {
  if (gold.size() != logits.rows()) {
    throw ShapeError("tagging_loss: " + std::to_string(gold.size()) + " gold tags for " +
                     std::to_string(logits.rows()) + " positions");
  }
  std::vector<int> targets(gold.size());
  std::transform(gold.begin(), gold.end(), targets.begin(), [](Tag t) { return static_cast<int>(t); });
  return cross_entropy(logits, targets, pad_mask);
}

template <typename T>
TagSequence argmax_tags(const Tensor<T>& logits) {
  TagSequence tags(logits.rows());
  const std::size_t c = logits.cols();
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto row = logits.data().subspan(i * c, c);
    tags[i] = static_cast<Tag>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return tags;
}

std::vector<SpanPrediction> decode_spans(const TagSequence& tags, std::span<const std::uint8_t> mask) {
  std::vector<SpanPrediction> spans;
  bool open = false;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const Tag t = (!mask.empty() && !mask[i]) ? Tag::O : tags[i];
    if (t == Tag::B || (t == Tag::I && !open)) {
      spans.push_back({i, i + 1, {}});
      open = true;
    } else if (t == Tag::I) {
      spans.back().token_end = i + 1;
    } else {
      open = false;
    }
  }
  return spans;
}

TagSequence spans_to_tags(const std::vector<SpanPrediction>& spans, std::size_t length) {
  TagSequence tags(length, Tag::O);
  for (const auto& s : spans) {
    if (s.token_start >= s.token_end || s.token_end > length) {
      throw std::invalid_argument("spans_to_tags: span [" + std::to_string(s.token_start) + "," +
                                  std::to_string(s.token_end) + ") invalid for length " +
                                  std::to_string(length));
    }
    for (std::size_t i = s.token_start; i < s.token_end; ++i) {
      if (tags[i] != Tag::O) throw std::invalid_argument("spans_to_tags: overlapping spans");
      tags[i] = i == s.token_start ? Tag::B : Tag::I;
    }
  }
  return tags;
}

void SpanCounts::finalize() {
  precision = predicted ? static_cast<double>(true_positive) / static_cast<double>(predicted) : 0.0;
  recall = gold ? static_cast<double>(true_positive) / static_cast<double>(gold) : 0.0;
  f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

EvalReport evaluate(const std::vector<LabeledSpans>& predictions, const std::vector<LabeledSpans>& golds) {
  using Key = std::pair<std::string, std::string>;
  auto index = [](const std::vector<LabeledSpans>& items, const char* what) {
    std::map<Key, const LabeledSpans*> out;
    for (const auto& item : items) {
      if (!out.emplace(Key{item.product_id, item.attribute}, &item).second) {
        throw ValidationError(std::string("evaluate: duplicate ") + what + " key (" + item.product_id +
                              ", " + item.attribute + ")");
      }
    }
    return out;
  };
  const auto pred = index(predictions, "prediction");
  const auto gold = index(golds, "gold");
  std::set<Key> keys;
  for (const auto& [k, _] : pred) keys.insert(k);
  for (const auto& [k, _] : gold) keys.insert(k);

  EvalReport report;
  SpanCounts total;
  static const std::vector<SpanPrediction> kEmpty;
  for (const auto& key : keys) {
    const auto pit = pred.find(key);
    const auto git = gold.find(key);
    const auto& p = pit == pred.end() ? kEmpty : pit->second->spans;
    const auto& g = git == gold.end() ? kEmpty : git->second->spans;
    std::size_t tp = 0;
    for (const auto& s : p) {
      tp += std::any_of(g.begin(), g.end(), [&](const SpanPrediction& o) { return o.same_boundaries(s); })
                ? 1
                : 0;
    }
    auto& per = report.per_attribute[key.second];
    per.true_positive += tp;
    per.predicted += p.size();
    per.gold += g.size();
    total.true_positive += tp;
    total.predicted += p.size();
    total.gold += g.size();
  }
  for (auto& [_, c] : report.per_attribute) c.finalize();
  total.finalize();
  report.precision = total.precision;
  report.recall = total.recall;
  report.f1 = total.f1;
  report.true_positive = total.true_positive;
  report.predicted = total.predicted;
  report.gold = total.gold;
  return report;
}

void to_json(nlohmann::json& j, const SpanCounts& c) {
  j = nlohmann::json{{"precision", c.precision}, {"recall", c.recall},
                     {"f1", c.f1},               {"true_positive", c.true_positive},
                     {"predicted", c.predicted}, {"gold", c.gold}};
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"precision", r.precision},
                     {"recall", r.recall},
                     {"f1", r.f1},
                     {"true_positive", r.true_positive},
                     {"predicted", r.predicted},
                     {"gold", r.gold},
                     {"per_attribute", r.per_attribute}};
}

void to_json(nlohmann::json& j, const SpanPrediction& s) {
  j = nlohmann::json{{"token_start", s.token_start}, {"token_end", s.token_end}, {"text", s.text}};
}

void from_json(const nlohmann::json& j, SpanPrediction& s) {
  j.at("token_start").get_to(s.token_start);
  j.at("token_end").get_to(s.token_end);
  s.text = j.value("text", std::string());
}

void to_json(nlohmann::json& j, const LabeledSpans& s) {
  j = nlohmann::json{{"id", s.product_id}, {"attribute", s.attribute}, {"spans", s.spans}};
}

void from_json(const nlohmann::json& j, LabeledSpans& s) {
  j.at("id").get_to(s.product_id);
  j.at("attribute").get_to(s.attribute);
  j.at("spans").get_to(s.spans);
}

template Tensor<float> tag_logits(const Tensor<float>&, const TagHeadParams<float>&, std::size_t);
template Tensor<double> tag_logits(const Tensor<double>&, const TagHeadParams<double>&, std::size_t);
template Tensor<float> tagging_loss(const Tensor<float>&, const TagSequence&, std::span<const std::uint8_t>);
template Tensor<double> tagging_loss(const Tensor<double>&, const TagSequence&, std::span<const std::uint8_t>);
template TagSequence argmax_tags(const Tensor<float>&);
template TagSequence argmax_tags(const Tensor<double>&);

}  // namespace eave
