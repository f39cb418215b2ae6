#ifndef CVT_VOCAB_H_
#define CVT_VOCAB_H_

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cvt {

// Word ids plus per-character ids for one sentence.
struct TokenizedSentence {
  std::vector<int> words;
  std::vector<std::vector<int>> chars;
};

// Splits a UTF-8 string into code points. Malformed bytes become single
// one-byte "characters".
std::vector<std::string> utf8_chars(std::string_view text);

// Token <-> id map with reserved PAD, UNK and REMOVED ids, and an optional
// BOS/EOS pair for decoder vocabularies. Reserved tokens never come out of
// lookups of surface strings: looking up "<removed>" yields UNK.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kRemoved = 2;
  static constexpr int kBos = 3;  // only with sequence markers
  static constexpr int kEos = 4;  // only with sequence markers

  static constexpr int kCharPad = 0;
  static constexpr int kCharUnk = 1;

  explicit Vocabulary(bool sequence_markers = false);

  // Returns the id of an existing token or appends it.
  int add(const std::string& token);
  void add_chars(const std::string& token);

  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  int first_regular() const { return first_regular_; }
  bool has_sequence_markers() const { return first_regular_ == 5; }

  int char_id(std::string_view ch) const;
  int char_size() const { return static_cast<int>(chars_.size()); }
  const std::string& char_token(int id) const { return chars_[static_cast<size_t>(id)]; }

  TokenizedSentence encode(const std::vector<std::string>& tokens) const;
  std::vector<int> encode_ids(const std::vector<std::string>& tokens) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::string> chars_;
  std::unordered_map<std::string, int> char_index_;
  int first_regular_;
};

}  // namespace cvt

#endif  // CVT_VOCAB_H_
