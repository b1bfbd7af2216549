#include "composer/vocab.hpp"

#include <array>
#include <sstream>
#include <unordered_map>

#include "composer/errors.hpp"

namespace composer {

namespace {

const std::array<std::string, kVocabSize>& table() {
  static const std::array<std::string, kVocabSize> words = [] {
    std::array<std::string, kVocabSize> w;
    size_t i = 0;
    for (const char* s :
         {"<pad>", "a",      "and",    "red",     "green",  "blue",
          "yellow", "orange", "purple", "cyan",    "pink",   "circle",
          "square", "triangle", "one",  "two",     "three",  "four",
          "the",    "scene",  "with",   "shapes",  "shape",  "on",
          "background", "of", "small",  "large",   "bright", "dark"})
      w[i++] = s;
    for (; i < kVocabSize; ++i) w[i] = "reserved-" + std::to_string(i);
    return w;
  }();
  return words;
}

const std::unordered_map<std::string, int>& index() {
  static const std::unordered_map<std::string, int> idx = [] {
    std::unordered_map<std::string, int> m;
    for (int i = 0; i < kVocabSize; ++i) m[table()[static_cast<size_t>(i)]] = i;
    return m;
  }();
  return idx;
}

}  // namespace

int token_id(const std::string& word) {
  auto it = index().find(word);
  if (it == index().end()) throw VocabError("unknown token: " + word);
  return it->second;
}

const std::string& token_word(int id) {
  if (id < 0 || id >= kVocabSize)
    throw ContractError("token id out of range: " + std::to_string(id));
  return table()[static_cast<size_t>(id)];
}

std::vector<int> tokenize(const std::string& caption) {
  std::vector<int> out;
  std::istringstream is(caption);
  std::string word;
  while (is >> word) out.push_back(token_id(word));
  if (out.size() > kMaxCaptionLen)
    throw ContractError("caption longer than " +
                        std::to_string(kMaxCaptionLen) + " tokens");
  return out;
}

std::string detokenize(const std::vector<int>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += " ";
    out += token_word(tokens[i]);
  }
  return out;
}

}  // namespace composer
