#ifndef CVT_TESTS_FIXTURES_H_
#define CVT_TESTS_FIXTURES_H_

#include <algorithm>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "cvt/encoder.h"
#include "cvt/graph.h"
#include "cvt/random.h"
#include "cvt/vocab.h"

namespace cvt::testing {

inline constexpr int kTinyVocab = 30;
inline constexpr int kTinyChars = 12;

// Small enough for finite differences, with every encoder feature enabled.
inline EncoderConfig tiny_encoder_config() {
  EncoderConfig c;
  c.word_dim = 6;
  c.char_dim = 4;
  c.char_widths = {2, 3};
  c.char_filters = 3;
  c.lstm1 = 5;
  c.lstm2 = 4;
  c.projection = 3;
  return c;
}

inline TokenizedSentence random_sentence(Rng& rng, int length, int vocab = kTinyVocab,
                                         int chars = kTinyChars) {
  TokenizedSentence s;
  for (int t = 0; t < length; ++t) {
    s.words.push_back(5 + rng.uniform_int(vocab - 5));
    std::vector<int> word_chars;
    const int n = 1 + rng.uniform_int(4);
    for (int k = 0; k < n; ++k) word_chars.push_back(2 + rng.uniform_int(chars - 2));
    s.chars.push_back(word_chars);
  }
  return s;
}

inline std::vector<TokenizedSentence> random_batch(Rng& rng, int sentences, int min_length,
                                                   int max_length) {
  std::vector<TokenizedSentence> batch;
  for (int i = 0; i < sentences; ++i) {
    batch.push_back(random_sentence(rng, min_length + rng.uniform_int(max_length - min_length + 1)));
  }
  return batch;
}

inline Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Rows of `p` each a random probability distribution.
inline Matrix random_distribution(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.05 + rng.uniform();
  for (Eigen::Index r = 0; r < rows; ++r) m.row(r) /= m.row(r).sum();
  return m;
}

// Encoder outputs as constants with the shapes an encoder of `c` produces.
inline EncoderOutput random_encoder_output(Graph& g, Rng& rng, const EncoderConfig& c,
                                           const std::vector<int>& lengths) {
  EncoderOutput out;
  for (int len : lengths) {
    out.layout.offsets.push_back(out.layout.tokens);
    out.layout.lengths.push_back(len);
    out.layout.tokens += len;
    out.layout.max_length = std::max(out.layout.max_length, len);
  }
  const int n = out.layout.tokens;
  const int d1 = c.direction_dim(1);
  const int d2 = c.direction_dim(2);
  out.v = g.constant(random_matrix(rng, n, c.word_dim));
  out.h1fwd = g.constant(random_matrix(rng, n, d1));
  out.h1bwd = g.constant(random_matrix(rng, n, d1));
  out.h1 = concat_cols({out.h1fwd, out.h1bwd});
  out.h2 = g.constant(random_matrix(rng, n, 2 * d2));
  out.h1fwd_prev = g.constant(random_matrix(rng, n, d1));
  out.h1bwd_next = g.constant(random_matrix(rng, n, d1));
  return out;
}

// Replaces every parameter value with draws from N(0, scale^2).
inline void randomize(ParameterStore& store, Rng& rng, double scale) {
  for (Parameter* p : store.parameters()) p->value = random_matrix(rng, p->value.rows(), p->value.cols(), scale);
}

inline bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0;
}

}  // namespace cvt::testing

#endif  // CVT_TESTS_FIXTURES_H_
