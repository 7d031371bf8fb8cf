#include <algorithm>
#include <fstream>
#include <set>

#include "eave/data.hpp"
#include "eave/errors.hpp"

namespace eave {

const AttributeAnnotation* ProductRecord::find_attribute(std::string_view key) const {
  for (const auto& a : attributes) {
    if (a.key == key) return &a;
  }
  return nullptr;
}

void validate(const ProductRecord& r) {
  if (r.id.empty()) throw ValidationError("product record without id");
  std::set<std::string> keys;
  for (const auto& a : r.attributes) {
    if (a.key.empty()) throw ValidationError("product " + r.id + ": empty attribute key");
    if (!keys.insert(a.key).second) {
      throw ValidationError("product " + r.id + ": duplicate attribute key '" + a.key + "'");
    }
    for (const auto& e : a.evidences) {
      if (e.paragraph_index >= r.paragraphs.size()) {
        throw ValidationError("product " + r.id + ": evidence for '" + a.key +
                              "' points at missing paragraph " + std::to_string(e.paragraph_index));
      }
      const auto& text = r.paragraphs[e.paragraph_index].text;
      if (e.char_begin >= e.char_end || e.char_end > text.size()) {
        throw ValidationError("product " + r.id + ": evidence span [" + std::to_string(e.char_begin) +
                              "," + std::to_string(e.char_end) + ") out of bounds for '" + a.key + "'");
      }
      if (text.compare(e.char_begin, e.char_end - e.char_begin, e.value) != 0) {
        throw ValidationError("product " + r.id + ": evidence slice does not match value '" + e.value +
                              "' for '" + a.key + "'");
      }
    }
  }
}

void to_json(nlohmann::json& j, const ProductRecord& r) {
  nlohmann::json paragraphs = nlohmann::json::array();
  for (const auto& p : r.paragraphs) paragraphs.push_back({{"source", p.source}, {"text", p.text}});
  nlohmann::json attributes = nlohmann::json::array();
  for (const auto& a : r.attributes) {
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : a.evidences) {
      ev.push_back({{"paragraph_index", e.paragraph_index},
                    {"char_begin", e.char_begin},
                    {"char_end", e.char_end},
                    {"value", e.value}});
    }
    attributes.push_back({{"key", a.key}, {"evidences", ev}});
  }
  j = nlohmann::json{{"id", r.id}, {"paragraphs", paragraphs}, {"attributes", attributes}};
}

void from_json(const nlohmann::json& j, ProductRecord& r) {
  j.at("id").get_to(r.id);
  r.paragraphs.clear();
  for (const auto& p : j.at("paragraphs")) {
    r.paragraphs.push_back({p.value("source", std::string()), p.at("text").get<std::string>()});
  }
  r.attributes.clear();
  for (const auto& a : j.at("attributes")) {
    AttributeAnnotation ann;
    a.at("key").get_to(ann.key);
    for (const auto& e : a.value("evidences", nlohmann::json::array())) {
      Evidence ev;
      e.at("paragraph_index").get_to(ev.paragraph_index);
      e.at("char_begin").get_to(ev.char_begin);
      e.at("char_end").get_to(ev.char_end);
      e.at("value").get_to(ev.value);
      ann.evidences.push_back(std::move(ev));
    }
    r.attributes.push_back(std::move(ann));
  }
}

std::string join_context(const ProductRecord& record, std::vector<std::size_t>* paragraph_offsets) {
  std::string out;
  if (paragraph_offsets) paragraph_offsets->clear();
  for (std::size_t i = 0; i < record.paragraphs.size(); ++i) {
    if (i) out += kParagraphSeparator;
    if (paragraph_offsets) paragraph_offsets->push_back(out.size());
    out += record.paragraphs[i].text;
  }
  return out;
}

std::string TokenizedExample::span_text(const SpanPrediction& span) const {
  if (span.token_start >= span.token_end || span.token_end > token_to_char.size()) return {};
  const auto begin = token_to_char[span.token_start].begin;
  const auto end = token_to_char[span.token_end - 1].end;
  return context.substr(begin, end - begin);
}

Tokenized encode_context(const std::string& context, const Vocab& vocab, std::size_t context_len) {
  Tokenized t = tokenize(context, vocab);
  if (t.ids.size() > context_len) {
    t.ids.resize(context_len);
    t.offsets.resize(context_len);
  }
  t.ids.resize(context_len, Vocab::kPad);
  return t;
}

std::vector<int> encode_attribute(std::string_view key, const Vocab& vocab, std::size_t attribute_len) {
  auto ids = tokenize(key, vocab).ids;
  if (ids.empty()) throw ValidationError("attribute key '" + std::string(key) + "' has no tokens");
  ids.resize(attribute_len, Vocab::kPad);
  return ids;
}

TokenizedExample build_example(const ProductRecord& record, const std::string& attribute_key,
                               const Vocab& vocab, std::size_t context_len, std::size_t attribute_len,
                               bool allow_missing) {
  const auto* attr = record.find_attribute(attribute_key);
  if (!attr && !allow_missing) {
    throw ValidationError("product " + record.id + ": attribute '" + attribute_key + "' not annotated");
  }
  TokenizedExample ex;
  ex.product_id = record.id;
  ex.attribute = attribute_key;
  std::vector<std::size_t> para_offsets;
  ex.context = join_context(record, &para_offsets);

  const auto all_tokens = split_tokens(ex.context);
  if (all_tokens.empty()) throw ValidationError("product " + record.id + ": context has no tokens");
  const auto encoded = encode_context(ex.context, vocab, context_len);
  ex.context_ids = encoded.ids;
  ex.token_to_char = encoded.offsets;
  ex.context_pad_mask = pad_mask(ex.context_ids);
  ex.attribute_ids = encode_attribute(attribute_key, vocab, attribute_len);
  ex.attribute_pad_mask = pad_mask(ex.attribute_ids);

  std::vector<SpanPrediction> spans;
  if (attr) {
    for (const auto& e : attr->evidences) {
      if (e.paragraph_index >= record.paragraphs.size()) {
        throw ValidationError("product " + record.id + ": evidence paragraph out of range");
      }
      const auto& text = record.paragraphs[e.paragraph_index].text;
      if (e.char_begin >= e.char_end || e.char_end > text.size() ||
          text.compare(e.char_begin, e.char_end - e.char_begin, e.value) != 0) {
        throw ValidationError("product " + record.id + ": evidence slice does not match value '" +
                              e.value + "'");
      }
      const std::size_t begin = para_offsets[e.paragraph_index] + e.char_begin;
      const std::size_t end = para_offsets[e.paragraph_index] + e.char_end;
      std::size_t first = all_tokens.size(), last = 0;
      for (std::size_t i = 0; i < all_tokens.size(); ++i) {
        if (all_tokens[i].begin < end && all_tokens[i].end > begin) {
          first = std::min(first, i);
          last = i;
        }
      }
      if (first == all_tokens.size() || last >= context_len) {
        ++ex.dropped_spans;
        continue;
      }
      spans.push_back({first, last + 1, {}});
    }
  }
  std::sort(spans.begin(), spans.end(),
            [](const auto& a, const auto& b) { return a.token_start < b.token_start; });
  for (const auto& s : spans) {
    if (!ex.gold_spans.empty() && s.token_start < ex.gold_spans.back().token_end) continue;
    ex.gold_spans.push_back(s);
  }
  for (auto& s : ex.gold_spans) s.text = ex.span_text(s);
  ex.gold_tags = spans_to_tags(ex.gold_spans, context_len);
  return ex;
}

CorpusLoadResult load_corpus(const std::filesystem::path& path, LoadMode mode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("corpus: cannot open " + path.string());
  CorpusLoadResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto record = nlohmann::json::parse(line).get<ProductRecord>();
      validate(record);
      result.records.push_back(std::move(record));
    } catch (const std::exception& e) {
      const std::string msg = path.string() + " line " + std::to_string(line_no) + ": " + e.what();
      if (mode == LoadMode::FailFast) throw ValidationError(msg);
      result.warnings.push_back(msg);
    }
  }
  return result;
}

void save_corpus(const std::filesystem::path& path, const std::vector<ProductRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("corpus: cannot write " + path.string());
  for (const auto& r : records) out << nlohmann::json(r).dump() << '\n';
  if (!out) throw std::runtime_error("corpus: write failed for " + path.string());
}

}  // namespace eave
