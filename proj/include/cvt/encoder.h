#ifndef CVT_ENCODER_H_
#define CVT_ENCODER_H_

#include <istream>
#include <span>
#include <string>
#include <vector>

#include "cvt/graph.h"
#include "cvt/vocab.h"

namespace cvt {

struct EncoderConfig {
  int word_dim = 300;
  int char_dim = 50;
  std::vector<int> char_widths = {2, 3, 4};
  int char_filters = 100;  // per width; 0 disables the character CNN
  int lstm1 = 1024;
  int lstm2 = 512;
  int projection = 512;  // per direction; 0 disables projection

  void validate() const;
  int char_feature_size() const {
    return char_filters * static_cast<int>(char_widths.size());
  }
  bool has_char_cnn() const { return char_filters > 0 && !char_widths.empty(); }
  // Size of one directional output of the given layer (1 or 2).
  int direction_dim(int layer) const;
};

// Row layout of a batch: rows are tokens, sentence-major.
struct BatchLayout {
  std::vector<int> offsets;
  std::vector<int> lengths;
  int tokens = 0;
  int max_length = 0;

  static BatchLayout of(std::span<const TokenizedSentence> batch);
  int sentences() const { return static_cast<int>(lengths.size()); }
  int row(int sentence, int t) const { return offsets[static_cast<size_t>(sentence)] + t; }
};

// All rows are tokens in BatchLayout order.
struct EncoderOutput {
  BatchLayout layout;
  Expr v;
  Expr h1fwd;
  Expr h1bwd;
  Expr h1;  // h1fwd ++ h1bwd
  Expr h2;
  // Row t holds h1fwd at t-1; the forward initial state at t = 0.
  Expr h1fwd_prev;
  // Row t holds h1bwd at t+1; the backward initial state at the last token.
  Expr h1bwd_next;
};

struct EncodeOptions {
  double dropout = 0.0;
  bool train = false;
  Rng* rng = nullptr;
};

// LSTM with optional output projection and learned initial state.
class LstmCell {
 public:
  LstmCell(const std::string& prefix, int input_dim, int hidden, int projection,
           ParameterStore& store, Rng& rng);

  struct State {
    Expr h;
    Expr c;
  };

  State initial_state(Graph& g, int batch) const;
  // Gates i, f, o = sigmoid, candidate g = tanh, c' = f*c + i*g,
  // h' = o*tanh(c'), then h' * P when projected.
  State step(Graph& g, Expr x, const State& state) const;

  int input_dim() const { return input_dim_; }
  int hidden() const { return hidden_; }
  int output_dim() const { return projection_ > 0 ? projection_ : hidden_; }
  Parameter& weights() const { return *weights_; }
  Parameter& bias() const { return *bias_; }
  Parameter* projection() const { return proj_; }
  Parameter& initial_h() const { return *h0_; }
  Parameter& initial_c() const { return *c0_; }
  std::vector<Parameter*> parameters() const;

 private:
  int input_dim_;
  int hidden_;
  int projection_;
  Parameter* weights_;
  Parameter* bias_;
  Parameter* proj_ = nullptr;
  Parameter* h0_;
  Parameter* c0_;
};

// Character CNN + word embeddings followed by a two-layer Bi-LSTM.
class Encoder {
 public:
  Encoder(const EncoderConfig& config, int vocab_size, int char_vocab_size,
          ParameterStore& store, Rng& rng, const std::string& prefix = "encoder/");

  // v[t] = word_embedding(word[t]) + char_projection(char_cnn(chars[t])).
  Expr embed(Graph& g, std::span<const TokenizedSentence> batch) const;
  // Max-over-time character features, before the projection to word_dim.
  Expr char_features(Graph& g, std::span<const TokenizedSentence> batch) const;
  EncoderOutput encode(Graph& g, Expr v, const BatchLayout& layout,
                       const EncodeOptions& options) const;
  EncoderOutput run(Graph& g, std::span<const TokenizedSentence> batch,
                    const EncodeOptions& options) const;

  // Runs one direction over all sentences; returns token rows.
  Expr run_direction(Graph& g, const LstmCell& cell, Expr inputs,
                     const BatchLayout& layout, bool reverse) const;

  // Reads "token v1 ... vD" lines; returns the number of rows initialized.
  int load_embeddings(std::istream& in, const Vocabulary& vocab);

  const EncoderConfig& config() const { return config_; }
  const LstmCell& cell(int layer, bool backward) const;
  const std::string& prefix() const { return prefix_; }
  int vocab_size() const { return vocab_size_; }
  int char_vocab_size() const { return char_vocab_size_; }
  Parameter& word_embedding() const { return *word_embedding_; }
  std::vector<Parameter*> char_parameters() const;

 private:
  EncoderConfig config_;
  std::string prefix_;
  int vocab_size_;
  int char_vocab_size_;
  Parameter* word_embedding_;
  Parameter* char_embedding_ = nullptr;
  std::vector<Parameter*> conv_weights_;
  std::vector<Parameter*> conv_biases_;
  Parameter* char_projection_ = nullptr;
  std::vector<LstmCell> cells_;  // l1 fwd, l1 bwd, l2 fwd, l2 bwd
};

}  // namespace cvt

#endif  // CVT_ENCODER_H_
