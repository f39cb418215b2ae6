#include "cvt/vocab.h"

#include <stdexcept>

namespace cvt {

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    size_t n = 1;
    if ((lead & 0xE0) == 0xC0) {
      n = 2;
    } else if ((lead & 0xF0) == 0xE0) {
      n = 3;
    } else if ((lead & 0xF8) == 0xF0) {
      n = 4;
    }
    bool ok = i + n <= text.size();
    for (size_t k = 1; ok && k < n; ++k) {
      ok = (static_cast<unsigned char>(text[i + k]) & 0xC0) == 0x80;
    }
    if (!ok) n = 1;
    out.emplace_back(text.substr(i, n));
    i += n;
  }
  return out;
}

Vocabulary::Vocabulary(bool sequence_markers) {
  tokens_ = {"<pad>", "<unk>", "<removed>"};
  if (sequence_markers) {
    tokens_.push_back("<s>");
    tokens_.push_back("</s>");
  }
  first_regular_ = static_cast<int>(tokens_.size());
  chars_ = {"<cpad>", "<cunk>"};
}

int Vocabulary::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = size();
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

void Vocabulary::add_chars(const std::string& token) {
  for (std::string& ch : utf8_chars(token)) {
    if (char_index_.count(ch) == 0) {
      char_index_.emplace(ch, char_size());
      chars_.push_back(std::move(ch));
    }
  }
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) > 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
  return tokens_[static_cast<size_t>(id)];
}

int Vocabulary::char_id(std::string_view ch) const {
  auto it = char_index_.find(std::string(ch));
  return it == char_index_.end() ? kCharUnk : it->second;
}

std::vector<int> Vocabulary::encode_ids(
    const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const std::string& t : tokens) ids.push_back(id(t));
  return ids;
}

TokenizedSentence Vocabulary::encode(const std::vector<std::string>& tokens) const {
  TokenizedSentence s;
  s.words = encode_ids(tokens);
  s.chars.reserve(tokens.size());
  for (const std::string& t : tokens) {
    std::vector<int> ids;
    for (const std::string& ch : utf8_chars(t)) ids.push_back(char_id(ch));
    s.chars.push_back(std::move(ids));
  }
  return s;
}

}  // namespace cvt
