#include <algorithm>
#include <fstream>
#include <map>

#include "eave/data.hpp"
#include "eave/errors.hpp"

namespace eave {

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_punct(unsigned char c) {
  return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) || (c >= 123 && c <= 126);
}

}  // namespace

std::vector<CharSpan> split_tokens(std::string_view text) {
  std::vector<CharSpan> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
    } else if (is_punct(c)) {
      out.push_back({i, i + 1});
      ++i;
    } else {
      const std::size_t start = i;
      while (i < text.size()) {
        const auto w = static_cast<unsigned char>(text[i]);
        if (is_space(w) || is_punct(w)) break;
        ++i;
      }
      out.push_back({start, i});
    }
  }
  return out;
}

std::string normalize_token(std::string_view token) {
  std::string out(token);
  for (auto& ch : out) {
    if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
  }
  return out;
}

Vocab::Vocab() : tokens_{"<pad>", "<unk>"} {}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  for (const auto& t : tokens) {
    if (t.empty() || v.index_.count(t)) {
      throw ValidationError("vocab: empty or duplicate token '" + t + "'");
    }
    v.index_.emplace(t, static_cast<int>(v.tokens_.size()));
    v.tokens_.push_back(t);
  }
  return v;
}

Vocab Vocab::build(const std::vector<ProductRecord>& corpus, std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  auto count_text = [&](std::string_view text) {
    for (const auto& s : split_tokens(text)) ++counts[normalize_token(text.substr(s.begin, s.end - s.begin))];
  };
  for (const auto& r : corpus) {
    for (const auto& p : r.paragraphs) count_text(p.text);
    for (const auto& a : r.attributes) count_text(a.key);
  }
  std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (max_size > 2 && ordered.size() > max_size - 2) ordered.resize(max_size - 2);
  std::vector<std::string> tokens;
  tokens.reserve(ordered.size());
  for (auto& [t, _] : ordered) tokens.push_back(t);
  return from_tokens(tokens);
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("vocab: cannot write " + path.string());
  for (std::size_t i = 2; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  if (!out) throw std::runtime_error("vocab: write failed for " + path.string());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("vocab: cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return from_tokens(tokens);
}

int Vocab::id(std::string_view normalized_token) const {
  auto it = index_.find(std::string(normalized_token));
  return it == index_.end() ? kUnk : it->second;
}

Tokenized tokenize(std::string_view text, const Vocab& vocab) {
  Tokenized out;
  out.offsets = split_tokens(text);
  out.ids.reserve(out.offsets.size());
  for (const auto& s : out.offsets) {
    out.ids.push_back(vocab.id(normalize_token(text.substr(s.begin, s.end - s.begin))));
  }
  return out;
}

}  // namespace eave
