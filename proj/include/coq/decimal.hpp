#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "coq/text.hpp"

namespace coq {

// Exact rational arithmetic over 128-bit integers. Big enough for any number
// a question realistically carries; every overflow is detected and surfaces
// as an execution failure rather than a wrong value.
struct Rational {
  __int128 num = 0;
  __int128 den = 1;  // > 0 after normalize()
};

namespace detail {

inline __int128 int128_abs(__int128 v) { return v < 0 ? -v : v; }

inline __int128 int128_gcd(__int128 a, __int128 b) {
  a = int128_abs(a);
  b = int128_abs(b);
  while (b != 0) {
    __int128 t = a % b;
    a = b;
    b = t;
  }
  return a;
}

inline bool checked_add(__int128 a, __int128 b, __int128& out) {
  return !__builtin_add_overflow(a, b, &out);
}
inline bool checked_sub(__int128 a, __int128 b, __int128& out) {
  return !__builtin_sub_overflow(a, b, &out);
}
inline bool checked_mul(__int128 a, __int128 b, __int128& out) {
  return !__builtin_mul_overflow(a, b, &out);
}

inline std::string int128_to_string(__int128 v) {
  if (v == 0) return "0";
  bool neg = v < 0;
  unsigned __int128 u = neg ? static_cast<unsigned __int128>(-(v + 1)) + 1
                            : static_cast<unsigned __int128>(v);
  std::string digits;
  while (u > 0) {
    digits.push_back(static_cast<char>('0' + static_cast<int>(u % 10)));
    u /= 10;
  }
  if (neg) digits.push_back('-');
  std::reverse(digits.begin(), digits.end());
  return digits;
}

}  // namespace detail

inline std::optional<Rational> rational_normalize(Rational r) {
  if (r.den == 0) return std::nullopt;
  if (r.num == 0) return Rational{0, 1};
  if (r.den < 0) {
    r.num = -r.num;
    r.den = -r.den;
  }
  const __int128 g = detail::int128_gcd(r.num, r.den);
  r.num /= g;
  r.den /= g;
  return r;
}

inline std::optional<Rational> rational_add(const Rational& a, const Rational& b) {
  __int128 x, y, n, d;
  if (!detail::checked_mul(a.num, b.den, x)) return std::nullopt;
  if (!detail::checked_mul(b.num, a.den, y)) return std::nullopt;
  if (!detail::checked_add(x, y, n)) return std::nullopt;
  if (!detail::checked_mul(a.den, b.den, d)) return std::nullopt;
  return rational_normalize(Rational{n, d});
}

inline std::optional<Rational> rational_sub(const Rational& a, const Rational& b) {
  return rational_add(a, Rational{-b.num, b.den});
}

inline std::optional<Rational> rational_mul(const Rational& a, const Rational& b) {
  // Cross-reduce first to keep intermediates small.
  const __int128 g1 = detail::int128_gcd(a.num, b.den);
  const __int128 g2 = detail::int128_gcd(b.num, a.den);
  const __int128 an = a.num / (g1 == 0 ? 1 : g1), bd = b.den / (g1 == 0 ? 1 : g1);
  const __int128 bn = b.num / (g2 == 0 ? 1 : g2), ad = a.den / (g2 == 0 ? 1 : g2);
  __int128 n, d;
  if (!detail::checked_mul(an, bn, n)) return std::nullopt;
  if (!detail::checked_mul(ad, bd, d)) return std::nullopt;
  return rational_normalize(Rational{n, d});
}

inline std::optional<Rational> rational_div(const Rational& a, const Rational& b) {
  if (b.num == 0) return std::nullopt;
  return rational_mul(a, Rational{b.den, b.num});
}

// a < b without overflow on reduced inputs of sane magnitude.
inline std::optional<bool> rational_less(const Rational& a, const Rational& b) {
  __int128 x, y;
  if (!detail::checked_mul(a.num, b.den, x)) return std::nullopt;
  if (!detail::checked_mul(b.num, a.den, y)) return std::nullopt;
  return x < y;
}

inline bool rational_eq(const Rational& a, const Rational& b) {
  return a.num == b.num && a.den == b.den;
}

// Canonical rendering: integers without a decimal point, otherwise the
// shortest exact decimal; no thousands separators. Values whose reduced
// denominator has prime factors other than 2 and 5 have no finite decimal
// form and yield nullopt.
inline std::optional<std::string> rational_to_decimal_string(const Rational& r) {
  __int128 den = r.den;
  int twos = 0, fives = 0;
  while (den % 2 == 0) {
    den /= 2;
    ++twos;
  }
  while (den % 5 == 0) {
    den /= 5;
    ++fives;
  }
  if (den != 1) return std::nullopt;
  const int digits = twos > fives ? twos : fives;
  __int128 scale = 1;
  for (int i = 0; i < digits; ++i) {
    if (!detail::checked_mul(scale, 10, scale)) return std::nullopt;
  }
  __int128 mantissa;
  if (!detail::checked_mul(r.num, scale / r.den, mantissa)) return std::nullopt;
  std::string s = detail::int128_to_string(detail::int128_abs(mantissa));
  std::string out = (r.num < 0) ? "-" : "";
  if (digits == 0) return out + s;
  while (s.size() <= static_cast<std::size_t>(digits)) s.insert(s.begin(), '0');
  std::string intpart = s.substr(0, s.size() - digits);
  std::string frac = s.substr(s.size() - digits);
  while (!frac.empty() && frac.back() == '0') frac.pop_back();
  out += intpart;
  if (!frac.empty()) {
    out += '.';
    out += frac;
  }
  return out;
}

// A decimal literal found in running text.
struct NumberLiteral {
  std::string raw;       // as written, e.g. "1,599" or "-30.5"
  std::string canonical; // canonical decimal rendering, e.g. "1599"
  Rational value;
  std::size_t pos = 0;   // character offset of the first digit or sign
};

namespace detail {

// Parses digits on [i, n) as an integer part with optional valid thousands
// grouping. Returns the end index and the digits with commas stripped.
inline std::size_t scan_integer_part(std::string_view s, std::size_t i, std::string& digits) {
  std::size_t j = i;
  while (j < s.size() && is_ascii_digit(s[j])) {
    digits.push_back(s[j]);
    ++j;
  }
  // Accept ",ddd" groups only when the leading run has 1..3 digits and every
  // group has exactly 3; otherwise the comma ends the literal.
  if (j < s.size() && s[j] == ',' && digits.size() >= 1 && digits.size() <= 3) {
    std::string grouped = digits;
    std::size_t k = j;
    while (k + 3 < s.size() && s[k] == ',' && is_ascii_digit(s[k + 1]) &&
           is_ascii_digit(s[k + 2]) && is_ascii_digit(s[k + 3])) {
      // A 4th digit after the group means the grouping is not thousands.
      if (k + 4 < s.size() && is_ascii_digit(s[k + 4])) break;
      grouped.append(s.substr(k + 1, 3));
      k += 4;
    }
    if (k > j) {
      digits = grouped;
      return k;
    }
  }
  return j;
}

}  // namespace detail

// All maximal decimal literals in left-to-right order: optional sign,
// optional thousands commas, optional fraction. A sign counts as part of a
// literal only when it does not directly follow a digit ("1999-2005" reads
// as two positive numbers).
inline std::vector<NumberLiteral> extract_number_literals(std::string_view s) {
  std::vector<NumberLiteral> out;
  std::size_t i = 0;
  while (i < s.size()) {
    char c = s[i];
    bool neg = false;
    std::size_t start = i;
    std::size_t digit_start = i;
    if ((c == '-' || c == '+') && i + 1 < s.size() && is_ascii_digit(s[i + 1]) &&
        (i == 0 || !is_ascii_digit(s[i - 1]))) {
      neg = (c == '-');
      digit_start = i + 1;
    } else if (!is_ascii_digit(c)) {
      ++i;
      continue;
    }
    std::string intdigits;
    std::size_t j = detail::scan_integer_part(s, digit_start, intdigits);
    std::string fracdigits;
    if (j + 1 < s.size() && s[j] == '.' && is_ascii_digit(s[j + 1])) {
      std::size_t k = j + 1;
      while (k < s.size() && is_ascii_digit(s[k])) {
        fracdigits.push_back(s[k]);
        ++k;
      }
      j = k;
    }
    __int128 mantissa = 0;
    bool overflow = false;
    for (char d : intdigits + fracdigits) {
      if (!detail::checked_mul(mantissa, 10, mantissa) ||
          !detail::checked_add(mantissa, d - '0', mantissa)) {
        overflow = true;
        break;
      }
    }
    if (!overflow) {
      __int128 den = 1;
      for (std::size_t k = 0; k < fracdigits.size() && !overflow; ++k) {
        if (!detail::checked_mul(den, 10, den)) overflow = true;
      }
      if (!overflow) {
        auto val = rational_normalize(Rational{neg ? -mantissa : mantissa, den});
        if (val) {
          NumberLiteral lit;
          lit.raw = std::string(s.substr(start, j - start));
          lit.value = *val;
          lit.canonical = rational_to_decimal_string(*val).value_or(lit.raw);
          lit.pos = start;
          out.push_back(std::move(lit));
        }
      }
    }
    i = j;
  }
  return out;
}

}  // namespace coq
