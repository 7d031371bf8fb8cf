#include <algorithm>
#include <cstdio>
#include <set>

#include "eave/data.hpp"
#include "eave/errors.hpp"
#include "eave/rng.hpp"

namespace eave {

namespace {

constexpr std::size_t kCategories = 2;
constexpr std::size_t kMaxNoiseValues = 5;

std::string pseudo_word(Rng& rng) {
  static const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "st"};
  static const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
  const auto syllables = rng.range(2, 3);
  std::string w;
  for (std::int64_t s = 0; s < syllables; ++s) {
    w += kOnsets[rng.below(std::size(kOnsets))];
    w += kVowels[rng.below(std::size(kVowels))];
  }
  return w;
}

struct Lexicon {
  // keys[c][k], values[c][k] = value strings of 1-2 words.
  std::vector<std::vector<std::string>> keys;
  std::vector<std::vector<std::vector<std::string>>> values;
  std::vector<std::string> distractors;
};

Lexicon make_lexicon(Rng& rng, const SynthOptions& o) {
  const std::size_t keys_per_cat = o.attrs_per_product;
  const std::size_t n_keys = kCategories * keys_per_cat;
  const std::size_t budget = o.vocab_size > n_keys + 8 ? o.vocab_size - n_keys - 8 : 8;
  const std::size_t words_per_key = std::max<std::size_t>(2, budget / (2 * n_keys));
  const std::size_t n_distractors = std::max<std::size_t>(4, budget - words_per_key * n_keys);

  std::set<std::string> used;
  auto fresh = [&] {
    std::string w = pseudo_word(rng);
    while (!used.insert(w).second) w = pseudo_word(rng);
    return w;
  };

  Lexicon lex;
  lex.keys.resize(kCategories);
  lex.values.resize(kCategories);
  for (std::size_t c = 0; c < kCategories; ++c) {
    for (std::size_t k = 0; k < keys_per_cat; ++k) {
      lex.keys[c].push_back(fresh());
      std::vector<std::string> words;
      for (std::size_t i = 0; i < words_per_key; ++i) words.push_back(fresh());
      std::vector<std::string> vals(words.begin(), words.end());
      // Two-word values reuse the key's own words so the pool stays disjoint.
      for (std::size_t i = 0; i + 1 < words.size(); i += 2) vals.push_back(words[i] + " " + words[i + 1]);
      lex.values[c].push_back(std::move(vals));
    }
  }
  for (std::size_t i = 0; i < n_distractors; ++i) lex.distractors.push_back(fresh());
  return lex;
}

class TextBuilder {
 public:
  void word(const std::string& w) {
    if (!text_.empty()) text_ += ' ';
    text_ += w;
  }
  // Appends w and returns its char range.
  std::pair<std::size_t, std::size_t> marked(const std::string& w) {
    if (!text_.empty()) text_ += ' ';
    const std::size_t begin = text_.size();
    text_ += w;
    return {begin, text_.size()};
  }
  const std::string& text() const { return text_; }

 private:
  std::string text_;
};

}  // namespace

std::vector<ProductRecord> synthesize_corpus(const SynthOptions& o) {
  if (o.attrs_per_product == 0 || o.vocab_size <= o.attrs_per_product * 4) {
    throw ValidationError("synthesize_corpus: vocab_size must exceed 4 * attrs_per_product");
  }
  Rng rng(o.seed);
  const Lexicon lex = make_lexicon(rng, o);
  const std::size_t fragment_tokens = o.attrs_per_product * 4;
  const std::size_t filler = o.context_len_tokens > fragment_tokens ? o.context_len_tokens - fragment_tokens : 2;

  std::vector<ProductRecord> out;
  out.reserve(o.n_products);
  char id[32];
  for (std::size_t p = 0; p < o.n_products; ++p) {
    std::snprintf(id, sizeof id, "p%05zu", p);
    const std::size_t cat = rng.below(kCategories);
    auto distractor = [&] { return lex.distractors[rng.below(lex.distractors.size())]; };
    auto random_value = [&] {
      const auto& pool = lex.values[cat][rng.below(lex.values[cat].size())];
      return pool[rng.below(pool.size())];
    };

    std::size_t title_words = std::max<std::size_t>(1, filler / 3);
    std::size_t desc_filler = filler - std::min(filler, title_words);
    TextBuilder title;
    for (std::size_t i = 0; i < title_words; ++i) title.word(distractor());

    std::vector<std::size_t> order(o.attrs_per_product);
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    rng.shuffle(order.begin(), order.end());

    ProductRecord rec;
    rec.id = id;
    TextBuilder desc;
    for (std::size_t slot = 0; slot < order.size(); ++slot) {
      const std::size_t gap = slot + 1 == order.size() ? desc_filler : rng.below(std::min<std::size_t>(desc_filler, 2) + 1);
      for (std::size_t i = 0; i < gap; ++i) desc.word(distractor());
      desc_filler -= gap;
      const std::size_t k = order[slot];
      const auto& pool = lex.values[cat][k];
      const std::string value = pool[rng.below(pool.size())];
      desc.word(lex.keys[cat][k]);
      desc.word(":");
      const auto [b, e] = desc.marked(value);
      desc.word(slot + 1 == order.size() ? "." : ",");
      rec.attributes.push_back({lex.keys[cat][k], {{1, b, e, value}}});
    }
    if (rng.bernoulli(o.noise_p)) {
      const auto n = rng.range(1, kMaxNoiseValues);
      for (std::int64_t i = 0; i < n; ++i) desc.word(random_value());
    }
    rec.paragraphs.push_back({"title", title.text()});
    rec.paragraphs.push_back({"description", desc.text()});
    if (rng.bernoulli(o.noise_p)) {
      TextBuilder extra;
      const auto n = rng.range(1, kMaxNoiseValues);
      for (std::int64_t i = 0; i < n; ++i) extra.word(random_value());
      rec.paragraphs.push_back({"noise", extra.text()});
    }
    if (rng.bernoulli(o.negative_p)) {
      const std::size_t other = (cat + 1) % kCategories;
      rec.attributes.push_back({lex.keys[other][rng.below(lex.keys[other].size())], {}});
    }
    std::sort(rec.attributes.begin(), rec.attributes.end(),
              [](const auto& a, const auto& b) { return a.key < b.key; });
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace eave
