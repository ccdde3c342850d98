#pragma once

#include <cctype>
#include <string>
#include <vector>

namespace relrank {

inline std::string to_lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Lowercased whitespace tokens with non-alphanumeric edges trimmed
// ("Runway," -> "runway"). Tokens that trim to nothing are dropped.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      std::size_t a = i, b = j;
      while (a < b && !std::isalnum(static_cast<unsigned char>(text[a]))) ++a;
      while (b > a && !std::isalnum(static_cast<unsigned char>(text[b - 1]))) --b;
      if (b > a) out.push_back(to_lower(text.substr(a, b - a)));
    }
    i = j;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& tokens, const std::string& sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

}  // namespace relrank
