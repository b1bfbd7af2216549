#pragma once

#include <string>
#include <vector>

namespace composer {

// Closed 64-token caption vocabulary: template words, color names, shape
// names, counts; unused ids are reserved-N placeholders. Id 0 is padding.
inline constexpr int kVocabSize = 64;
inline constexpr int kPadToken = 0;
inline constexpr int kMaxCaptionLen = 16;

int token_id(const std::string& word);          // VocabError on unknown
const std::string& token_word(int id);          // ContractError on bad id
std::vector<int> tokenize(const std::string& caption);
std::string detokenize(const std::vector<int>& tokens);

}  // namespace composer
