#pragma once

#include <algorithm>
#include <cctype>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace coq {

inline bool is_ascii_alnum(char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}

inline bool is_ascii_digit(char c) { return c >= '0' && c <= '9'; }

inline char ascii_lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), ascii_lower);
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Whitespace token with character offsets into the original string.
// Leading/trailing punctuation is trimmed off the token text (offsets follow),
// so "points." yields the token "points".
struct Token {
  std::string text;
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline std::vector<Token> tokenize(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i >= s.size()) break;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    std::size_t b = i, e = j;
    while (b < e && !is_ascii_alnum(s[b])) ++b;
    while (e > b && !is_ascii_alnum(s[e - 1])) --e;
    if (e > b) out.push_back(Token{std::string(s.substr(b, e - b)), b, e});
    i = j;
  }
  return out;
}

// SQuAD-style answer normalization: lowercase, drop punctuation characters,
// drop the articles a/an/the, collapse whitespace.
inline std::vector<std::string> normalize_answer_tokens(std::string_view s) {
  std::string cleaned;
  cleaned.reserve(s.size());
  for (char c : s) {
    if (is_ascii_alnum(c)) {
      cleaned.push_back(ascii_lower(c));
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      cleaned.push_back(' ');
    }
    // other punctuation: dropped entirely
  }
  std::vector<std::string> toks;
  std::size_t i = 0;
  while (i < cleaned.size()) {
    while (i < cleaned.size() && cleaned[i] == ' ') ++i;
    if (i >= cleaned.size()) break;
    std::size_t j = i;
    while (j < cleaned.size() && cleaned[j] != ' ') ++j;
    std::string t = cleaned.substr(i, j - i);
    if (t != "a" && t != "an" && t != "the") toks.push_back(std::move(t));
    i = j;
  }
  return toks;
}

inline std::string normalize_answer(std::string_view s) {
  std::string out;
  for (const auto& t : normalize_answer_tokens(s)) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

// Matching form of a single token: lowercase, alphanumeric characters only.
// "1,599" and "1599" agree under this form.
inline std::string token_norm(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s)
    if (is_ascii_alnum(c)) out.push_back(ascii_lower(c));
  return out;
}

inline const std::unordered_set<std::string>& stopword_set() {
  static const std::unordered_set<std::string> kStop = {
      "a",    "an",   "and",  "are",  "at",   "be",   "by",   "did",  "do",
      "does", "for",  "from", "how",  "in",   "is",   "it",   "many", "much",
      "of",   "on",   "or",   "return", "that", "the", "their", "them",
      "they", "this", "to",   "was",  "were", "what", "when", "where",
      "which", "who", "with"};
  return kStop;
}

// Lowercased, punctuation-trimmed tokens minus stopwords; the vocabulary the
// lexical-overlap features run on.
inline std::vector<std::string> content_tokens(std::string_view s) {
  std::vector<std::string> out;
  for (const auto& tok : tokenize(s)) {
    std::string norm = token_norm(tok.text);
    if (!norm.empty() && !stopword_set().count(norm)) out.push_back(std::move(norm));
  }
  return out;
}

// Sentence split on '.', '!' and '?' boundaries. Also the segmentation the
// supporting-fact labels align with.
struct Sentence {
  std::string text;
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline std::vector<Sentence> split_sentences(std::string_view s) {
  std::vector<Sentence> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (c == '.' || c == '!' || c == '?') {
      std::size_t end = i + 1;
      std::string body = trim(s.substr(start, end - start));
      if (!body.empty()) out.push_back(Sentence{std::move(body), start, end});
      start = end;
    }
  }
  std::string tail = trim(s.substr(start));
  if (!tail.empty()) out.push_back(Sentence{std::move(tail), start, s.size()});
  return out;
}

inline bool starts_with(std::string_view s, std::string_view prefix) {
  return s.size() >= prefix.size() && s.substr(0, prefix.size()) == prefix;
}

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  if (from.empty()) return s;
  std::string out;
  out.reserve(s.size());
  std::size_t pos = 0;
  while (true) {
    std::size_t hit = s.find(from, pos);
    if (hit == std::string::npos) {
      out.append(s, pos, std::string::npos);
      break;
    }
    out.append(s, pos, hit - pos);
    out.append(to);
    pos = hit + from.size();
  }
  return out;
}

}  // namespace coq
