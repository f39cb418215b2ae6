#include "cvt/encoder.h"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace cvt {

void EncoderConfig::validate() const {
  if (word_dim <= 0 || lstm1 <= 0 || lstm2 <= 0 || projection < 0 ||
      char_filters < 0 || (char_filters > 0 && char_dim <= 0)) {
    throw std::invalid_argument("encoder sizes must be positive");
  }
  for (int w : char_widths) {
    if (w <= 0) throw std::invalid_argument("char CNN widths must be positive");
  }
  if (projection > std::min(lstm1, lstm2)) {
    throw std::invalid_argument("projection size exceeds LSTM size");
  }
}

int EncoderConfig::direction_dim(int layer) const {
  if (projection > 0) return projection;
  return layer == 1 ? lstm1 : lstm2;
}

BatchLayout BatchLayout::of(std::span<const TokenizedSentence> batch) {
  BatchLayout layout;
  for (const TokenizedSentence& s : batch) {
    if (s.words.empty()) throw std::invalid_argument("empty sentence");
    layout.offsets.push_back(layout.tokens);
    layout.lengths.push_back(static_cast<int>(s.words.size()));
    layout.tokens += static_cast<int>(s.words.size());
    layout.max_length = std::max(layout.max_length, static_cast<int>(s.words.size()));
  }
  return layout;
}

// ---- LstmCell ---------------------------------------------------------------

LstmCell::LstmCell(const std::string& prefix, int input_dim, int hidden,
                   int projection, ParameterStore& store, Rng& rng)
    : input_dim_(input_dim), hidden_(hidden), projection_(projection) {
  const int out = output_dim();
  weights_ = &store.create(prefix + "W", input_dim + out, 4 * hidden, Init::kGlorot, rng);
  bias_ = &store.create(prefix + "b", 1, 4 * hidden, Init::kZero, rng);
  if (projection > 0) {
    proj_ = &store.create(prefix + "P", hidden, projection, Init::kGlorot, rng);
  }
  h0_ = &store.create(prefix + "h0", 1, out, Init::kZero, rng);
  c0_ = &store.create(prefix + "c0", 1, hidden, Init::kZero, rng);
}

LstmCell::State LstmCell::initial_state(Graph& g, int batch) const {
  const std::vector<int> rows(static_cast<size_t>(batch), 0);
  return {gather_rows(g.param(*h0_), rows), gather_rows(g.param(*c0_), rows)};
}

LstmCell::State LstmCell::step(Graph& g, Expr x, const State& state) const {
  Expr pre = add(matmul(concat_cols({x, state.h}), g.param(*weights_)),
                 g.param(*bias_));
  Expr hc = lstm_activation(pre, state.c);
  Expr h = slice_cols(hc, 0, hidden_);
  Expr c = slice_cols(hc, hidden_, hidden_);
  if (proj_ != nullptr) h = matmul(h, g.param(*proj_));
  return {h, c};
}

std::vector<Parameter*> LstmCell::parameters() const {
  std::vector<Parameter*> out = {weights_, bias_};
  if (proj_ != nullptr) out.push_back(proj_);
  out.push_back(h0_);
  out.push_back(c0_);
  return out;
}

// ---- Encoder ----------------------------------------------------------------

Encoder::Encoder(const EncoderConfig& config, int vocab_size, int char_vocab_size,
                 ParameterStore& store, Rng& rng, const std::string& prefix)
    : config_(config),
      prefix_(prefix),
      vocab_size_(vocab_size),
      char_vocab_size_(char_vocab_size) {
  config_.validate();
  if (vocab_size <= 0) throw std::invalid_argument("empty vocabulary");
  word_embedding_ = &store.create(prefix + "word_embedding", vocab_size,
                                  config_.word_dim, Init::kEmbedding, rng);
  if (config_.has_char_cnn()) {
    if (char_vocab_size <= 0) throw std::invalid_argument("empty char vocabulary");
    char_embedding_ = &store.create(prefix + "char_embedding", char_vocab_size,
                                    config_.char_dim, Init::kEmbedding, rng);
    for (int w : config_.char_widths) {
      const std::string tag = prefix + "char_conv" + std::to_string(w);
      conv_weights_.push_back(&store.create(tag + "/W", w * config_.char_dim,
                                            config_.char_filters, Init::kGlorot, rng));
      conv_biases_.push_back(&store.create(tag + "/b", 1, config_.char_filters,
                                           Init::kZero, rng));
    }
    char_projection_ = &store.create(prefix + "char_projection",
                                     config_.char_feature_size(), config_.word_dim,
                                     Init::kGlorot, rng);
  }
  const int p1 = config_.direction_dim(1);
  cells_.emplace_back(prefix + "l1_fwd/", config_.word_dim, config_.lstm1,
                      config_.projection, store, rng);
  cells_.emplace_back(prefix + "l1_bwd/", config_.word_dim, config_.lstm1,
                      config_.projection, store, rng);
  cells_.emplace_back(prefix + "l2_fwd/", 2 * p1, config_.lstm2,
                      config_.projection, store, rng);
  cells_.emplace_back(prefix + "l2_bwd/", 2 * p1, config_.lstm2,
                      config_.projection, store, rng);
}

const LstmCell& Encoder::cell(int layer, bool backward) const {
  if (layer != 1 && layer != 2) throw std::invalid_argument("layer must be 1 or 2");
  return cells_[static_cast<size_t>((layer - 1) * 2 + (backward ? 1 : 0))];
}

std::vector<Parameter*> Encoder::char_parameters() const {
  std::vector<Parameter*> out;
  if (char_embedding_ == nullptr) return out;
  out.push_back(char_embedding_);
  for (size_t i = 0; i < conv_weights_.size(); ++i) {
    out.push_back(conv_weights_[i]);
    out.push_back(conv_biases_[i]);
  }
  out.push_back(char_projection_);
  return out;
}

Expr Encoder::char_features(Graph& g, std::span<const TokenizedSentence> batch) const {
  if (char_embedding_ == nullptr) {
    throw std::logic_error("character CNN is disabled");
  }
  const int max_width =
      *std::max_element(config_.char_widths.begin(), config_.char_widths.end());
  std::vector<int> flat;
  std::vector<int> starts;
  std::vector<int> lengths;
  for (const TokenizedSentence& s : batch) {
    if (s.chars.size() != s.words.size()) {
      throw std::invalid_argument("chars and words differ in length");
    }
    for (const std::vector<int>& token : s.chars) {
      starts.push_back(static_cast<int>(flat.size()));
      lengths.push_back(static_cast<int>(token.size()));
      for (int c : token) {
        if (c < 0 || c >= char_vocab_size_) {
          throw std::out_of_range("character id out of range");
        }
        flat.push_back(c);
      }
    }
  }
  if (flat.empty()) flat.push_back(Vocabulary::kCharPad);
  Expr chars = gather_rows(g.param(*char_embedding_), flat);
  std::vector<Expr> per_width;
  for (size_t k = 0; k < config_.char_widths.size(); ++k) {
    const int w = config_.char_widths[k];
    std::vector<int> index;
    std::vector<int> windows;
    for (size_t tok = 0; tok < starts.size(); ++tok) {
      const int len = lengths[tok];
      const int padded = std::max(len, max_width);
      const int n = padded - w + 1;
      windows.push_back(n);
      for (int s = 0; s < n; ++s) {
        for (int j = 0; j < w; ++j) {
          index.push_back(s + j < len ? starts[tok] + s + j : -1);
        }
      }
    }
    Expr conv = add(matmul(gather_windows(chars, std::move(index), w),
                           g.param(*conv_weights_[k])),
                    g.param(*conv_biases_[k]));
    per_width.push_back(segment_max(conv, std::move(windows)));
  }
  return concat_cols(per_width);
}

Expr Encoder::embed(Graph& g, std::span<const TokenizedSentence> batch) const {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  std::vector<int> ids;
  for (const TokenizedSentence& s : batch) {
    if (s.words.empty()) throw std::invalid_argument("empty sentence");
    for (int id : s.words) {
      if (id < 0 || id >= vocab_size_) throw std::out_of_range("word id out of range");
      ids.push_back(id);
    }
  }
  Expr v = gather_rows(g.param(*word_embedding_), std::move(ids));
  if (char_embedding_ != nullptr) {
    v = add(v, matmul(char_features(g, batch), g.param(*char_projection_)));
  }
  return v;
}

Expr Encoder::run_direction(Graph& g, const LstmCell& cell, Expr inputs,
                            const BatchLayout& layout, bool reverse) const {
  const int batch = layout.sentences();
  const int steps = layout.max_length;
  LstmCell::State state = cell.initial_state(g, batch);
  std::vector<Expr> outputs(static_cast<size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    const int t = reverse ? steps - 1 - k : k;
    std::vector<int> rows(static_cast<size_t>(batch));
    std::vector<char> valid(static_cast<size_t>(batch));
    bool all_valid = true;
    for (int b = 0; b < batch; ++b) {
      const bool ok = t < layout.lengths[static_cast<size_t>(b)];
      valid[static_cast<size_t>(b)] = ok ? 1 : 0;
      rows[static_cast<size_t>(b)] = ok ? layout.row(b, t) : -1;
      all_valid = all_valid && ok;
    }
    LstmCell::State next = cell.step(g, gather_rows(inputs, std::move(rows)), state);
    // Backward runs start at each sentence's own last token, so padded steps
    // must carry the initial state through unchanged.
    if (reverse && !all_valid) {
      next.h = select_rows(next.h, state.h, valid);
      next.c = select_rows(next.c, state.c, std::move(valid));
    }
    state = next;
    outputs[static_cast<size_t>(t)] = state.h;
  }
  std::vector<int> token_rows;
  token_rows.reserve(static_cast<size_t>(layout.tokens));
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < layout.lengths[static_cast<size_t>(b)]; ++t) {
      token_rows.push_back(t * batch + b);
    }
  }
  return gather_rows(concat_rows(outputs), std::move(token_rows));
}

EncoderOutput Encoder::encode(Graph& g, Expr v, const BatchLayout& layout,
                              const EncodeOptions& options) const {
  if (v.rows() != layout.tokens || v.cols() != config_.word_dim) {
    throw std::invalid_argument("encode: v does not match the batch layout");
  }
  if (options.train && options.dropout > 0.0 && options.rng == nullptr) {
    throw std::invalid_argument("encode: training dropout needs an Rng");
  }
  Rng unused(0);
  Rng& rng = options.rng != nullptr ? *options.rng : unused;
  EncoderOutput out;
  out.layout = layout;
  out.v = dropout(v, options.dropout, options.train, rng);

  const int p1 = config_.direction_dim(1);
  Expr f1 = run_direction(g, cells_[0], out.v, layout, false);
  Expr b1 = run_direction(g, cells_[1], out.v, layout, true);
  out.h1 = dropout(concat_cols({f1, b1}), options.dropout, options.train, rng);
  out.h1fwd = slice_cols(out.h1, 0, p1);
  out.h1bwd = slice_cols(out.h1, p1, p1);

  std::vector<int> prev;
  std::vector<int> next;
  for (int b = 0; b < layout.sentences(); ++b) {
    const int len = layout.lengths[static_cast<size_t>(b)];
    for (int t = 0; t < len; ++t) {
      prev.push_back(t > 0 ? layout.row(b, t - 1) : layout.tokens);
      next.push_back(t + 1 < len ? layout.row(b, t + 1) : layout.tokens);
    }
  }
  out.h1fwd_prev = gather_rows(
      concat_rows({out.h1fwd, g.param(cells_[0].initial_h())}), std::move(prev));
  out.h1bwd_next = gather_rows(
      concat_rows({out.h1bwd, g.param(cells_[1].initial_h())}), std::move(next));

  Expr f2 = run_direction(g, cells_[2], out.h1, layout, false);
  Expr b2 = run_direction(g, cells_[3], out.h1, layout, true);
  out.h2 = dropout(concat_cols({f2, b2}), options.dropout, options.train, rng);
  return out;
}

EncoderOutput Encoder::run(Graph& g, std::span<const TokenizedSentence> batch,
                           const EncodeOptions& options) const {
  const BatchLayout layout = BatchLayout::of(batch);
  return encode(g, embed(g, batch), layout, options);
}

int Encoder::load_embeddings(std::istream& in, const Vocabulary& vocab) {
  int loaded = 0;
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    std::vector<double> values;
    double x;
    while (fields >> x) values.push_back(x);
    if (static_cast<int>(values.size()) != config_.word_dim) {
      throw std::runtime_error("embedding line " + std::to_string(line_number) +
                               ": expected " + std::to_string(config_.word_dim) +
                               " values");
    }
    if (!vocab.contains(token)) continue;
    const int id = vocab.id(token);
    if (id >= vocab_size_) continue;
    for (int k = 0; k < config_.word_dim; ++k) {
      word_embedding_->value(id, k) = values[static_cast<size_t>(k)];
    }
    ++loaded;
  }
  return loaded;
}

}  // namespace cvt
