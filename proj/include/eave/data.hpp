#pragma once

// Product records, tokenization, BIO example construction and the synthetic
// corpus generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "eave/tagging.hpp"
#include "eave/tensor.hpp"

namespace eave {

struct Paragraph {
  std::string source;
  std::string text;
};

struct Evidence {
  std::size_t paragraph_index = 0;
  std::size_t char_begin = 0;
  std::size_t char_end = 0;
  std::string value;
};

struct AttributeAnnotation {
  std::string key;
  std::vector<Evidence> evidences;  // empty: attribute absent (negative)
};

struct ProductRecord {
  std::string id;
  std::vector<Paragraph> paragraphs;
  std::vector<AttributeAnnotation> attributes;

  const AttributeAnnotation* find_attribute(std::string_view key) const;
};

// Throws ValidationError naming the product id on the first violation.
void validate(const ProductRecord& record);

void to_json(nlohmann::json& j, const ProductRecord& r);
void from_json(const nlohmann::json& j, ProductRecord& r);

struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Token boundaries: whitespace separates, every ASCII punctuation byte is its
// own token, everything else (including UTF-8 continuation bytes) forms words.
std::vector<CharSpan> split_tokens(std::string_view text);
// ASCII lowercase.
std::string normalize_token(std::string_view token);

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocab();

  // Tokens ordered by descending frequency, ties broken lexicographically.
  // max_size counts the two reserved entries; 0 means unbounded.
  static Vocab build(const std::vector<ProductRecord>& corpus, std::size_t max_size = 0);
  static Vocab from_tokens(const std::vector<std::string>& tokens);

  // One token per line; line n holds id n + 2.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  int id(std::string_view normalized_token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct Tokenized {
  std::vector<int> ids;
  std::vector<CharSpan> offsets;
};

Tokenized tokenize(std::string_view text, const Vocab& vocab);

inline constexpr std::string_view kParagraphSeparator = " \n ";

// Paragraph texts joined by kParagraphSeparator; paragraph_offsets receives the
// start of each paragraph in the joined string.
std::string join_context(const ProductRecord& record, std::vector<std::size_t>* paragraph_offsets = nullptr);

struct TokenizedExample {
  std::string product_id;
  std::string attribute;
  std::vector<int> context_ids;    // length S_c, 0-padded
  std::vector<int> attribute_ids;  // length S_a, 0-padded
  Mask context_pad_mask;
  Mask attribute_pad_mask;
  TagSequence gold_tags;  // length S_c
  std::vector<SpanPrediction> gold_spans;
  std::vector<CharSpan> token_to_char;  // kept context tokens only
  std::string context;
  std::size_t dropped_spans = 0;

  // Original context substring covered by a token span.
  std::string span_text(const SpanPrediction& span) const;
};

// Context ids truncated/padded to context_len plus their char offsets.
Tokenized encode_context(const std::string& context, const Vocab& vocab, std::size_t context_len);
std::vector<int> encode_attribute(std::string_view key, const Vocab& vocab, std::size_t attribute_len);

// Builds the padded, BIO-labelled example for one attribute. A token belongs
// to a value when its character range overlaps the evidence; values reaching
// past the context_len-th token are dropped. Missing keys are negatives only
// when allow_missing is set.
TokenizedExample build_example(const ProductRecord& record, const std::string& attribute_key,
                               const Vocab& vocab, std::size_t context_len, std::size_t attribute_len,
                               bool allow_missing = false);

enum class LoadMode { FailFast, SkipAndWarn };

struct CorpusLoadResult {
  std::vector<ProductRecord> records;
  std::vector<std::string> warnings;  // "line N: reason"
};

// One JSON object per line; blank lines ignored.
CorpusLoadResult load_corpus(const std::filesystem::path& path, LoadMode mode = LoadMode::FailFast);
void save_corpus(const std::filesystem::path& path, const std::vector<ProductRecord>& records);

struct SynthOptions {
  std::uint64_t seed = 7;
  std::size_t n_products = 500;
  std::size_t attrs_per_product = 4;
  std::size_t vocab_size = 200;
  std::size_t context_len_tokens = 24;
  double noise_p = 0.0;
  // Probability of listing one extra attribute absent from the text.
  double negative_p = 0.25;
};

// Products draw one of two categories, each owning attrs_per_product keys with
// disjoint value pools. Contexts embed "key : value" fragments among
// distractor words over a title and a description paragraph. With
// probability noise_p the description gains up to five random category values,
// and independently a third paragraph of up to five such values is added;
// gold evidences never point at noise.
std::vector<ProductRecord> synthesize_corpus(const SynthOptions& options);

}  // namespace eave
