#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace forgetmark {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

enum class TokenizerKind { word, character };

inline std::string_view to_string(TokenizerKind k) { return k == TokenizerKind::word ? "word" : "character"; }

inline TokenizerKind tokenizer_kind_from_string(std::string_view s) {
  if (s == "word") return TokenizerKind::word;
  if (s == "character" || s == "char") return TokenizerKind::character;
  fail(ErrorKind::invalid_argument, "unknown tokenizer kind '" + std::string(s) + "'");
}

namespace detail {

inline bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '\'' || c == '_' || c >= 0x80; }

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Length in bytes of the UTF-8 sequence starting with lead byte c.
inline std::size_t utf8_length(unsigned char c) {
  if (c < 0x80) return 1;
  if ((c >> 5) == 0x6) return 2;
  if ((c >> 4) == 0xe) return 3;
  if ((c >> 3) == 0x1e) return 4;
  return 1;
}

}  // namespace detail

/// Splits text into surface tokens: lowercase words and single punctuation marks
/// (word mode) or UTF-8 code points (character mode). Special tokens written as
/// `<bos>`, `<eos>`, `<pad>`, `<unk>` are kept whole in both modes.
inline std::vector<std::string> split_surface(std::string_view text, TokenizerKind kind) {
  static constexpr std::string_view specials[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    if (text[i] == '<') {
      for (auto sp : specials) {
        if (text.substr(i, sp.size()) == sp) {
          out.emplace_back(sp);
          i += sp.size();
          matched = true;
          break;
        }
      }
    }
    if (matched) continue;
    const auto c = static_cast<unsigned char>(text[i]);
    if (kind == TokenizerKind::character) {
      const std::size_t len = std::min(detail::utf8_length(c), text.size() - i);
      out.emplace_back(detail::lowercase(text.substr(i, len)));
      i += len;
      continue;
    }
    if (std::isspace(c)) {
      ++i;
    } else if (detail::is_word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && detail::is_word_char(static_cast<unsigned char>(text[j]))) ++j;
      out.push_back(detail::lowercase(text.substr(i, j - i)));
      i = j;
    } else {
      out.emplace_back(1, static_cast<char>(c));
      ++i;
    }
  }
  return out;
}

/// Closed vocabulary. Ids 0..3 are reserved for PAD, BOS, EOS, UNK.
class Vocab {
 public:
  static constexpr TokenId pad = 0;
  static constexpr TokenId bos = 1;
  static constexpr TokenId eos = 2;
  static constexpr TokenId unk = 3;

  Vocab() : Vocab(std::vector<std::string>{}, TokenizerKind::word) {}

  /// `words` excludes the special tokens; duplicates are rejected.
  explicit Vocab(const std::vector<std::string>& words, TokenizerKind kind = TokenizerKind::word) : kind_(kind) {
    for (const char* sp : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(sp);
    for (const auto& w : words) {
      require(!w.empty(), "vocab tokens must be nonempty");
      const auto pieces = split_surface(w, kind_);
      require(pieces.size() == 1 && pieces.front() == w, "vocab token '" + w + "' is not atomic under the tokenizer");
      require(!index_.contains(w), "duplicate vocab token '" + w + "'");
      add(w);
    }
  }

  /// Vocabulary covering every surface token of `lines`, sorted for stability.
  static Vocab from_corpus(const std::vector<std::string>& lines, TokenizerKind kind = TokenizerKind::word,
                           const std::vector<std::string>& extra = {}) {
    std::vector<std::string> words;
    std::unordered_map<std::string, bool> seen;
    auto take = [&](const std::string& w) {
      if (w.size() > 1 && w.front() == '<' && w.back() == '>') return;
      if (!seen.emplace(w, true).second) return;
      words.push_back(w);
    };
    for (const auto& line : lines)
      for (auto& w : split_surface(line, kind)) take(w);
    for (const auto& w : extra)
      for (auto& piece : split_surface(w, kind)) take(piece);
    std::sort(words.begin(), words.end());
    return Vocab(words, kind);
  }

  TokenizerKind kind() const { return kind_; }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) fail(ErrorKind::out_of_range, "token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }
  bool contains(std::string_view tok) const { return index_.contains(std::string(tok)); }
  TokenId id_of(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    return it == index_.end() ? unk : it->second;
  }
  static bool is_special(TokenId id) { return id <= unk; }

  TokenSequence encode(std::string_view text) const {
    TokenSequence ids;
    for (const auto& piece : split_surface(text, kind_)) ids.push_back(id_of(piece));
    return ids;
  }

  /// Word mode joins tokens with single spaces; character mode concatenates.
  std::string decode(std::span<const TokenId> ids, bool skip_special = false) const {
    std::string out;
    for (TokenId id : ids) {
      if (skip_special && is_special(id)) continue;
      if (kind_ == TokenizerKind::word && !out.empty()) out += ' ';
      out += token(id);
    }
    return out;
  }

  double unk_fraction(std::string_view text) const {
    const auto ids = encode(text);
    if (ids.empty()) return 0.0;
    std::size_t n = 0;
    for (TokenId id : ids) n += (id == unk);
    return static_cast<double>(n) / static_cast<double>(ids.size());
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64(to_string(kind_));
    for (const auto& t : tokens_) h = fnv1a64(t + "\n", h);
    return h;
  }

  /// One token per line, specials first; the tokenizer kind is not stored.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write vocab file " + path);
    for (const auto& t : tokens_) out << (t == "\n" ? "\\n" : t) << '\n';
  }

  static Vocab load(const std::string& path, TokenizerKind kind = TokenizerKind::word) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot read vocab file " + path);
    std::vector<std::string> words;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (line == "\\n") line = "\n";
      if (n++ < 4) {
        static constexpr std::string_view expected[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
        if (line != expected[n - 1]) fail(ErrorKind::schema, "vocab file " + path + " does not start with special tokens");
        continue;
      }
      words.push_back(line);
    }
    if (n < 4) fail(ErrorKind::schema, "vocab file " + path + " is truncated");
    return Vocab(words, kind);
  }

 private:
  void add(const std::string& tok) {
    index_.emplace(tok, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(tok);
  }

  TokenizerKind kind_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Lowercased whitespace tokens; the tokenization used for ROUGE-L and for
/// substring matching of generated text.
inline std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(detail::lowercase(w));
  return out;
}

inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  for (const auto& w : whitespace_tokens(text)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace forgetmark
