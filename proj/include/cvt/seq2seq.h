#ifndef CVT_SEQ2SEQ_H_
#define CVT_SEQ2SEQ_H_

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cvt/encoder.h"
#include "cvt/graph.h"

namespace cvt {

struct Seq2SeqConfig {
  int target_vocab = 0;  // output classes, including BOS/EOS
  int bos = 3;
  int eos = 4;
  int embedding_dim = 64;
  int hidden = 128;
  int attention_dim = 128;
  double attention_dropout = 0.5;
  double label_smoothing = 0.1;  // applied to beam targets in the CVT loss
  int beam_width = 10;
  int max_length = 50;  // emitted tokens, EOS included

  void validate() const;
};

enum class DecoderKind { kPrimary, kAttentionDropout, kFuture };

std::string_view decoder_kind_name(DecoderKind kind);
DecoderKind parse_decoder_kind(std::string_view name);

struct DecoderState {
  LstmCell::State lstm;
  std::vector<int> prefix;
  bool finished = false;
};

struct Attention {
  Expr weights;  // steps x source length
  Expr vector;   // steps x attention_dim
};

struct BeamResult {
  std::vector<int> tokens;  // without EOS
  double score = 0.0;       // log-probability / emitted tokens
  bool terminated = false;
};

// Attention decoder over the second-layer encoder outputs. The three decoders
// share the target embedding and the decoder LSTM; each has its own
// attention (W_alpha, W_a) and softmax (W_s) parameters.
//
// Decoder step s consumes the previous token (BOS at s = 0) and yields the
// state hbar_s. The primary and attention-dropout decoders predict y_s from
// a_s; the future decoder predicts y_{s+1} from its own a_s.
class Seq2SeqHead {
 public:
  Seq2SeqHead(const std::string& name, const EncoderConfig& encoder,
              const Seq2SeqConfig& config, ParameterStore& store, Rng& rng);

  // Rows of h2 belonging to one sentence.
  static Expr source_states(const EncoderOutput& enc, int sentence);

  // alpha_j ~ exp(h_j W_alpha hbar); c = sum_j alpha_j h_j; a = tanh(W_a [c, hbar]).
  // With drop_probability > 0 each weight is zeroed independently and the
  // rest renormalized; a row that loses every weight keeps the undropped one.
  Attention attend(Graph& g, Expr source, Expr hbar, DecoderKind kind,
                   double drop_probability = 0.0, Rng* rng = nullptr) const;

  DecoderState start(Graph& g) const;
  // Feeds `previous` into the shared LSTM and returns the logits of `kind`.
  Expr decode_step(Graph& g, Expr source, DecoderState& state, int previous,
                   DecoderKind kind, double drop_probability = 0.0,
                   Rng* rng = nullptr) const;

  // Decoder states hbar_0..hbar_K for inputs BOS, y_0..y_{K-1}.
  Expr decoder_states(Graph& g, std::span<const int> target) const;
  // Logits per step under teacher forcing on target (EOS appended): K + 1 rows
  // for the primary and attention-dropout decoders, K rows for the future one.
  Expr teacher_forced_logits(Graph& g, Expr source, std::span<const int> target,
                             DecoderKind kind, double drop_probability = 0.0,
                             Rng* rng = nullptr) const;

  // Mean cross-entropy over all target steps (EOS included) of the batch.
  Expr supervised_loss(Graph& g, const EncoderOutput& enc,
                       std::span<const std::vector<int>> targets,
                       double label_smoothing = 0.0) const;
  // Auxiliary decoders trained on the teacher's beam outputs with smoothed
  // targets; per-sentence means averaged over sentences with a nonempty
  // beam output.
  Expr cvt_loss(Graph& g, std::span<const std::vector<int>> beams,
                const EncoderOutput& student, std::span<const DecoderKind> students,
                Rng& rng, std::span<const double> weights = {}) const;

  BeamResult beam_search(const Matrix& source, int width, int max_length) const;
  BeamResult greedy(const Matrix& source, int max_length) const;
  // Beam outputs for every sentence of an eval-mode encoding.
  std::vector<std::vector<int>> teacher(const EncoderOutput& enc) const;

  std::vector<Parameter*> parameters(DecoderKind kind) const;
  std::vector<Parameter*> shared_parameters() const;
  const Seq2SeqConfig& config() const { return config_; }
  const std::string& name() const { return name_; }
  const LstmCell& lstm() const { return lstm_; }

 private:
  struct Module {
    Parameter* w_alpha;  // source_dim x hidden
    Parameter* w_a;      // (source_dim + hidden) x attention_dim
    Parameter* w_s;      // attention_dim x target_vocab
  };
  const Module& module(DecoderKind kind) const;
  Expr logits_from(Graph& g, Expr source, Expr hbar, DecoderKind kind,
                   double drop_probability, Rng* rng) const;

  std::string name_;
  Seq2SeqConfig config_;
  int source_dim_;
  Parameter* embedding_;
  LstmCell lstm_;
  std::array<Module, 3> modules_;
};

inline constexpr std::array<DecoderKind, 2> kDecoderAuxKinds = {
    DecoderKind::kAttentionDropout, DecoderKind::kFuture};

// Corpus BLEU with n-grams up to 4 and the brevity penalty; in [0, 100].
double bleu(std::span<const std::vector<int>> hypotheses,
            std::span<const std::vector<int>> references);
// Percentage of hypotheses equal to their reference.
double exact_match(std::span<const std::vector<int>> hypotheses,
                   std::span<const std::vector<int>> references);

}  // namespace cvt

#endif  // CVT_SEQ2SEQ_H_
