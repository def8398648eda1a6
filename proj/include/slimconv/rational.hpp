#pragma once

#include <charconv>
#include <compare>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>

#include "slimconv/error.hpp"

namespace slimconv {

// Exact positive fraction, always stored in lowest terms.
struct Rational {
  std::int64_t num = 1;
  std::int64_t den = 1;

  constexpr Rational() = default;
  constexpr Rational(std::int64_t n, std::int64_t d = 1) : num(n), den(d) {
    if (den == 0) throw ConfigError("rational: zero denominator");
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  constexpr double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  // Always "num/den", including integers ("2/1").
  std::string str() const { return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den); }

  // Accepts "a/b" or a bare integer "a".
  static Rational parse(std::string_view text) {
    auto parse_int = [&](std::string_view s) {
      std::int64_t v = 0;
      const auto* end = s.data() + s.size();
      auto [ptr, ec] = std::from_chars(s.data(), end, v);
      if (s.empty() || ec != std::errc() || ptr != end) {
        throw ConfigError("rational: cannot parse '" + std::string(text) + "'");
      }
      return v;
    };
    const auto slash = text.find('/');
    if (slash == std::string_view::npos) return Rational(parse_int(text), 1);
    const std::int64_t d = parse_int(text.substr(slash + 1));
    if (d == 0) throw ConfigError("rational: zero denominator in '" + std::string(text) + "'");
    return Rational(parse_int(text.substr(0, slash)), d);
  }

  constexpr bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
  constexpr std::strong_ordering operator<=>(const Rational& o) const { return num * o.den <=> o.num * den; }
};

inline Rational operator*(const Rational& a, const Rational& b) { return Rational(a.num * b.num, a.den * b.den); }

}  // namespace slimconv
