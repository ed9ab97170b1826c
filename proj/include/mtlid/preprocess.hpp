#pragma once

// Tweet cleaning and a word-level vocabulary.
//
// Cleaning performs exactly two steps: each @-mention becomes the literal
// token USER, then Arabic diacritics (U+064B..U+065F, U+0670) and tatweel
// (U+0640) are deleted.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtlid/tensor.hpp"

namespace mtlid {

namespace utf8 {

/// Decodes UTF-8; invalid bytes are mapped to U+FFFD one byte at a time.
inline std::u32string decode(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (c < 0x80) {
      cp = c;
      len = 1;
    } else if ((c & 0xE0) == 0xC0) {
      cp = c & 0x1F;
      len = 2;
    } else if ((c & 0xF0) == 0xE0) {
      cp = c & 0x0F;
      len = 3;
    } else if ((c & 0xF8) == 0xF0) {
      cp = c & 0x07;
      len = 4;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if (!ok) {
      out.push_back(U'�');
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string encode(std::u32string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char32_t cp : s) append(out, cp);
  return out;
}

}  // namespace utf8

/// Code points removed by clean_text.
inline bool is_diacritic(char32_t cp) {
  return (cp >= 0x064B && cp <= 0x065F) || cp == 0x0670 || cp == 0x0640;
}

/// Letters, digits and underscore for the scripts tweets are written in
/// (Latin, Greek, Cyrillic, Arabic and its presentation forms).
inline bool is_word_char(char32_t cp) {
  if (cp < 0x80) {
    return (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z') || (cp >= '0' && cp <= '9') ||
           cp == '_';
  }
  if (is_diacritic(cp)) return false;
  struct Range {
    char32_t lo, hi;
  };
  static constexpr Range ranges[] = {
      {0x00C0, 0x00D6}, {0x00D8, 0x00F6}, {0x00F8, 0x024F},  // Latin
      {0x0370, 0x03FF}, {0x0400, 0x04FF},                    // Greek, Cyrillic
      {0x0620, 0x064A}, {0x0660, 0x0669}, {0x066E, 0x06D3},  // Arabic letters, digits
      {0x06D5, 0x06D5}, {0x06EE, 0x06FC}, {0x06FF, 0x06FF},
      {0x0750, 0x077F}, {0x08A0, 0x08C9},                    // Arabic Supplement / Ext-A
      {0xFB50, 0xFD3D}, {0xFD50, 0xFDFB}, {0xFE70, 0xFEFC},  // presentation forms
  };
  for (const auto& r : ranges) {
    if (cp >= r.lo && cp <= r.hi) return true;
  }
  return false;
}

inline constexpr std::string_view kUserToken = "USER";

/// Replaces mentions with USER, then deletes diacritics.
///
/// A mention is a run of one or more '@' followed by one or more word
/// characters. Diacritics are skipped while matching so that deleting them
/// afterwards can never create a new mention; this keeps the function
/// idempotent.
inline std::string clean_text(std::string_view raw) {
  const std::u32string in = utf8::decode(raw);
  std::u32string replaced;
  replaced.reserve(in.size());
  const std::size_t n = in.size();
  std::size_t i = 0;
  while (i < n) {
    if (in[i] != U'@') {
      replaced.push_back(in[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < n && (in[j] == U'@' || is_diacritic(in[j]))) ++j;
    std::size_t k = j;
    bool has_word = false;
    while (k < n && (is_word_char(in[k]) || is_diacritic(in[k]))) {
      has_word = has_word || is_word_char(in[k]);
      ++k;
    }
    if (has_word) {
      replaced.append(kUserToken.begin(), kUserToken.end());
      i = k;
    } else {
      replaced.append(in.begin() + static_cast<std::ptrdiff_t>(i),
                      in.begin() + static_cast<std::ptrdiff_t>(j));
      i = j;
    }
  }
  std::u32string out;
  out.reserve(replaced.size());
  for (char32_t cp : replaced) {
    if (!is_diacritic(cp)) out.push_back(cp);
  }
  return utf8::encode(out);
}

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
  };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kReserved = 3;

  Vocabulary() : tokens_{"[PAD]", "[UNK]", "[CLS]"} { reindex(); }

  /// Reserved entries followed by tokens, in id order.
  static Vocabulary from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    for (auto& t : tokens) v.tokens_.push_back(std::move(t));
    v.reindex();
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::int32_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  /// Regular (non-reserved) tokens in id order.
  std::vector<std::string> regular_tokens() const {
    return {tokens_.begin() + kReserved, tokens_.end()};
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
        throw Error("duplicate vocabulary token '" + tokens_[i] + "'");
      }
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// Keeps whitespace tokens with count >= min_frequency, ranked by count
/// descending then bytewise ascending, capped so the vocabulary (reserved
/// ids included) has at most max_size entries.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_frequency,
                              std::size_t max_size) {
  if (corpus.empty()) throw Error("cannot build a vocabulary from an empty corpus");
  if (min_frequency == 0 || max_size <= static_cast<std::size_t>(Vocabulary::kReserved)) {
    throw Error("vocabulary needs min_frequency >= 1 and max_size > 3");
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus) {
    for (auto& tok : split_whitespace(line)) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, c] : counts) {
    if (c >= min_frequency) ranked.emplace_back(tok, c);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(ranked.size(), max_size - Vocabulary::kReserved);
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(ranked[i].first);
  return Vocabulary::from_tokens(std::move(tokens));
}

struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
  std::size_t true_length = 0;
};

/// [CLS] followed by token ids (UNK for out-of-vocabulary), truncated to
/// max_len and padded with PAD.
inline TokenSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw Error("encode requires max_len >= 2");
  TokenSequence seq;
  seq.ids.assign(max_len, Vocabulary::kPad);
  seq.mask.assign(max_len, 0);
  seq.ids[0] = Vocabulary::kCls;
  seq.mask[0] = 1;
  std::size_t pos = 1;
  for (const auto& tok : split_whitespace(text)) {
    if (pos == max_len) break;
    seq.ids[pos] = vocab.id(tok);
    seq.mask[pos] = 1;
    ++pos;
  }
  seq.true_length = pos;
  return seq;
}

/// Inverse of encode for real tokens: drops PAD and CLS.
inline std::string decode(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const auto id = seq.ids[i];
    if (!seq.mask[i] || id == Vocabulary::kPad || id == Vocabulary::kCls) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

/// One token per line in id order, reserved entries first.
inline void save_vocab(const Vocabulary& vocab, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write vocabulary file " + path);
  for (const auto& t : vocab.tokens()) os << t << '\n';
  if (!os) throw Error("failed writing vocabulary file " + path);
}

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read vocabulary file " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  if (lines.size() < 3 || lines[0] != "[PAD]" || lines[1] != "[UNK]" || lines[2] != "[CLS]") {
    throw Error("vocabulary file " + path + " must start with [PAD], [UNK], [CLS]");
  }
  return Vocabulary::from_tokens({lines.begin() + 3, lines.end()});
}

/// Fixed-width batch of token sequences, row-major [batch x width].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;

  static TokenBatch from(std::span<const TokenSequence* const> seqs) {
    TokenBatch b;
    b.batch = seqs.size();
    b.width = seqs.empty() ? 0 : seqs.front()->ids.size();
    b.ids.reserve(b.batch * b.width);
    b.mask.reserve(b.batch * b.width);
    for (const auto* s : seqs) {
      if (s->ids.size() != b.width || s->mask.size() != b.width) {
        throw ShapeError("token sequences in a batch must share one width");
      }
      b.ids.insert(b.ids.end(), s->ids.begin(), s->ids.end());
      b.mask.insert(b.mask.end(), s->mask.begin(), s->mask.end());
    }
    return b;
  }

  static TokenBatch from(const std::vector<TokenSequence>& seqs) {
    std::vector<const TokenSequence*> ptrs;
    for (const auto& s : seqs) ptrs.push_back(&s);
    return from(std::span<const TokenSequence* const>(ptrs));
  }
};

}  // namespace mtlid
