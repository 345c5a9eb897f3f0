#pragma once

// Boxed-answer extraction and grading. The last balanced \boxed{...} in the
// answer wins; numeric answers compare as exact rationals when both sides
// parse, letters compare case-insensitively.

#include <cctype>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace reflctrl {

enum class TaskKind { numeric, letter };

inline std::string_view to_string(TaskKind k) { return k == TaskKind::numeric ? "numeric" : "letter"; }

// Contents of every \boxed{...} in order, with nested braces balanced. An
// unclosed box is ignored.
inline std::vector<std::string> boxed_contents(std::string_view text) {
  static constexpr std::string_view kOpen = "\\boxed{";
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = text.find(kOpen, pos)) != std::string_view::npos) {
    std::size_t i = pos + kOpen.size();
    int depth = 1;
    for (; i < text.size(); ++i) {
      if (text[i] == '{') ++depth;
      else if (text[i] == '}' && --depth == 0) break;
    }
    if (depth != 0) break;
    out.emplace_back(text.substr(pos + kOpen.size(), i - pos - kOpen.size()));
    pos = i + 1;
  }
  return out;
}

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

// \text{X} -> X, \mathrm{X} -> X when the wrapper spans the whole string.
inline std::string unwrap_text_commands(std::string s) {
  for (std::string_view cmd : {"\\text{", "\\textbf{", "\\mathrm{", "\\mathbf{"}) {
    if (s.starts_with(cmd) && s.ends_with('}')) s = trim(std::string_view(s).substr(cmd.size(), s.size() - cmd.size() - 1));
  }
  return s;
}

inline void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t p = 0; (p = s.find(from, p)) != std::string::npos; p += to.size()) s.replace(p, from.size(), to);
}

}  // namespace detail

inline std::string normalize_numeric(std::string_view raw) {
  std::string s = detail::unwrap_text_commands(detail::trim(raw));
  detail::replace_all(s, "\\dfrac", "\\frac");
  detail::replace_all(s, "\\tfrac", "\\frac");
  detail::replace_all(s, "\\!", "");
  detail::replace_all(s, "\\$", "");
  detail::replace_all(s, "{,}", "");
  detail::replace_all(s, "\\%", "");
  detail::replace_all(s, "%", "");
  detail::replace_all(s, "^{\\circ}", "");
  detail::replace_all(s, "^\\circ", "");
  std::string out;
  for (char c : s) {
    if (c == ',' || c == '$' || std::isspace(static_cast<unsigned char>(c))) continue;
    out.push_back(c);
  }
  if (out.size() > 1 && out.front() == '+') out.erase(0, 1);
  // Trailing zeros of a decimal: "72.0" -> "72", "2.50" -> "2.5".
  if (auto dot = out.find('.'); dot != std::string::npos &&
                                out.find_first_not_of("0123456789", out[0] == '-' ? 1 : 0) == dot &&
                                out.find_first_not_of("0123456789", dot + 1) == std::string::npos) {
    while (out.size() > dot + 1 && out.back() == '0') out.pop_back();
    if (out.back() == '.') out.pop_back();
  }
  return out;
}

inline std::string normalize_letter(std::string_view raw) {
  std::string s = detail::unwrap_text_commands(detail::trim(raw));
  if (s.size() == 3 && s.front() == '(' && s.back() == ')') s = s.substr(1, 1);
  if (s.size() == 2 && s.back() == '.') s.pop_back();
  if (s.size() == 1 && std::isalpha(static_cast<unsigned char>(s[0]))) {
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  }
  return s;
}

inline std::string normalize_answer(std::string_view raw, TaskKind kind) {
  return kind == TaskKind::numeric ? normalize_numeric(raw) : normalize_letter(raw);
}

// Normalized content of the last box, or nullopt when there is none (a format
// failure).
inline std::optional<std::string> extract_answer(std::string_view answer_text, TaskKind kind) {
  auto boxes = boxed_contents(answer_text);
  if (boxes.empty()) return std::nullopt;
  auto norm = normalize_answer(boxes.back(), kind);
  if (norm.empty()) return std::nullopt;
  return norm;
}

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;
  friend bool operator==(const Rational&, const Rational&) = default;
};

namespace detail {

inline std::optional<Rational> make_rational(__int128 num, __int128 den) {
  if (den == 0) return std::nullopt;
  if (den < 0) {
    num = -num;
    den = -den;
  }
  __int128 a = num < 0 ? -num : num, b = den;
  while (b != 0) {
    const __int128 t = a % b;
    a = b;
    b = t;
  }
  if (a == 0) a = 1;
  num /= a;
  den /= a;
  constexpr __int128 kMax = INT64_MAX;
  if (num > kMax || num < -kMax || den > kMax) return std::nullopt;
  return Rational{static_cast<std::int64_t>(num), static_cast<std::int64_t>(den)};
}

// Integer or decimal literal with optional sign.
inline std::optional<Rational> parse_decimal(std::string_view s) {
  bool neg = false;
  if (!s.empty() && (s[0] == '-' || s[0] == '+')) {
    neg = s[0] == '-';
    s.remove_prefix(1);
  }
  if (s.empty() || s.size() > 30) return std::nullopt;
  __int128 num = 0, den = 1;
  bool seen_dot = false, seen_digit = false;
  for (char c : s) {
    if (c == '.') {
      if (seen_dot) return std::nullopt;
      seen_dot = true;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      num = num * 10 + (c - '0');
      if (seen_dot) den *= 10;
      seen_digit = true;
    } else {
      return std::nullopt;
    }
  }
  if (!seen_digit) return std::nullopt;
  return make_rational(neg ? -num : num, den);
}

}  // namespace detail

// Parses integers, decimals, a/b and \frac{a}{b} (optionally negated).
inline std::optional<Rational> parse_rational(std::string_view s) {
  std::string t = normalize_numeric(s);
  bool neg = false;
  std::string_view v = t;
  if (v.starts_with("-\\frac")) {
    neg = true;
    v.remove_prefix(1);
  }
  if (v.starts_with("\\frac{")) {
    const auto close1 = v.find('}');
    if (close1 == std::string_view::npos || close1 + 1 >= v.size() || v[close1 + 1] != '{' || v.back() != '}') {
      return std::nullopt;
    }
    auto a = detail::parse_decimal(v.substr(6, close1 - 6));
    auto b = detail::parse_decimal(v.substr(close1 + 2, v.size() - close1 - 3));
    if (!a || !b) return std::nullopt;
    auto r = detail::make_rational(static_cast<__int128>(a->num) * b->den, static_cast<__int128>(a->den) * b->num);
    if (r && neg) r->num = -r->num;
    return r;
  }
  if (auto slash = v.find('/'); slash != std::string_view::npos) {
    auto a = detail::parse_decimal(v.substr(0, slash));
    auto b = detail::parse_decimal(v.substr(slash + 1));
    if (!a || !b) return std::nullopt;
    return detail::make_rational(static_cast<__int128>(a->num) * b->den, static_cast<__int128>(a->den) * b->num);
  }
  return detail::parse_decimal(v);
}

inline bool answers_match(std::string_view gold, std::string_view extracted, TaskKind kind) {
  const auto g = normalize_answer(gold, kind);
  const auto e = normalize_answer(extracted, kind);
  if (g == e) return true;
  if (kind == TaskKind::letter) return false;
  auto rg = parse_rational(g), re = parse_rational(e);
  return rg && re && *rg == *re;
}

struct GradeOutcome {
  bool correct = false;
  bool format_failure = false;
  std::optional<std::string> extracted;
};

inline GradeOutcome grade_answer_text(std::string_view gold, std::string_view answer_text, TaskKind kind) {
  GradeOutcome out;
  out.extracted = extract_answer(answer_text, kind);
  out.format_failure = !out.extracted.has_value();
  out.correct = out.extracted && answers_match(gold, *out.extracted, kind);
  return out;
}

}  // namespace reflctrl
