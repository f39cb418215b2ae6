#include "cvt/seq2seq.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace cvt {

void Seq2SeqConfig::validate() const {
  if (target_vocab <= 0) throw std::invalid_argument("target vocabulary is empty");
  if (bos < 0 || bos >= target_vocab || eos < 0 || eos >= target_vocab) {
    throw std::invalid_argument("BOS/EOS ids outside the target vocabulary");
  }
  if (embedding_dim <= 0 || hidden <= 0 || attention_dim <= 0) {
    throw std::invalid_argument("decoder sizes must be positive");
  }
  if (attention_dropout < 0.0 || attention_dropout >= 1.0) {
    throw std::invalid_argument("attention dropout must be in [0, 1)");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw std::invalid_argument("label smoothing must be in [0, 1)");
  }
  if (beam_width < 1 || max_length < 1) {
    throw std::invalid_argument("beam width and max length must be positive");
  }
}

std::string_view decoder_kind_name(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::kPrimary: return "primary";
    case DecoderKind::kAttentionDropout: return "attention-dropout";
    case DecoderKind::kFuture: return "future";
  }
  return "?";
}

DecoderKind parse_decoder_kind(std::string_view name) {
  for (DecoderKind k : {DecoderKind::kPrimary, DecoderKind::kAttentionDropout,
                        DecoderKind::kFuture}) {
    if (decoder_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown decoder: " + std::string(name));
}

Seq2SeqHead::Seq2SeqHead(const std::string& name, const EncoderConfig& encoder,
                         const Seq2SeqConfig& config, ParameterStore& store, Rng& rng)
    : name_(name),
      config_((config.validate(), config)),
      source_dim_(2 * encoder.direction_dim(2)),
      embedding_(&store.create(name + "/embedding", config.target_vocab,
                               config.embedding_dim, Init::kEmbedding, rng)),
      lstm_(name + "/lstm/", config.embedding_dim, config.hidden, 0, store, rng) {
  for (DecoderKind k : {DecoderKind::kPrimary, DecoderKind::kAttentionDropout,
                        DecoderKind::kFuture}) {
    const std::string prefix = name + "/" + std::string(decoder_kind_name(k)) + "/";
    Module m;
    m.w_alpha = &store.create(prefix + "W_alpha", source_dim_, config.hidden,
                              Init::kGlorot, rng);
    m.w_a = &store.create(prefix + "W_a", source_dim_ + config.hidden,
                          config.attention_dim, Init::kGlorot, rng);
    m.w_s = &store.create(prefix + "W_s", config.attention_dim, config.target_vocab,
                          Init::kGlorot, rng);
    modules_[static_cast<size_t>(k)] = m;
  }
}

const Seq2SeqHead::Module& Seq2SeqHead::module(DecoderKind kind) const {
  const auto i = static_cast<size_t>(kind);
  if (i >= modules_.size()) throw std::invalid_argument("unknown decoder");
  return modules_[i];
}

Expr Seq2SeqHead::source_states(const EncoderOutput& enc, int sentence) {
  return slice_rows(enc.h2, enc.layout.offsets[static_cast<size_t>(sentence)],
                    enc.layout.lengths[static_cast<size_t>(sentence)]);
}

Attention Seq2SeqHead::attend(Graph& g, Expr source, Expr hbar, DecoderKind kind,
                              double drop_probability, Rng* rng) const {
  if (source.rows() == 0) throw std::invalid_argument("attention over no source states");
  if (drop_probability < 0.0 || drop_probability >= 1.0) {
    throw std::invalid_argument("attention dropout must be in [0, 1)");
  }
  const Module& m = module(kind);
  Expr scores = matmul_nt(matmul_nt(hbar, g.param(*m.w_alpha)), source);
  if (drop_probability > 0.0) {
    if (rng == nullptr) throw std::invalid_argument("attention dropout needs an Rng");
    // Zeroing weights and renormalizing equals a softmax over the surviving
    // scores; masking the logits keeps it stable when the survivors underflow.
    Matrix mask = Matrix::Zero(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < mask.rows(); ++i) {
      Eigen::Index kept = 0;
      for (Eigen::Index j = 0; j < mask.cols(); ++j) {
        if (rng->bernoulli(drop_probability)) {
          mask(i, j) = kMaskedLogit;
        } else {
          ++kept;
        }
      }
      if (kept == 0) mask.row(i).setZero();
    }
    scores = add(scores, g.constant(std::move(mask)));
  }
  Expr weights = softmax(scores);
  Expr context = matmul(weights, source);
  Expr vector = tanh(matmul(concat_cols({context, hbar}), g.param(*m.w_a)));
  return {weights, vector};
}

Expr Seq2SeqHead::logits_from(Graph& g, Expr source, Expr hbar, DecoderKind kind,
                              double drop_probability, Rng* rng) const {
  Attention att = attend(g, source, hbar, kind, drop_probability, rng);
  return matmul(att.vector, g.param(*module(kind).w_s));
}

DecoderState Seq2SeqHead::start(Graph& g) const {
  return {lstm_.initial_state(g, 1), {}, false};
}

Expr Seq2SeqHead::decode_step(Graph& g, Expr source, DecoderState& state,
                              int previous, DecoderKind kind, double drop_probability,
                              Rng* rng) const {
  if (state.finished) throw std::logic_error("decode_step on a finished state");
  if (previous < 0 || previous >= config_.target_vocab) {
    throw std::out_of_range("target token out of range");
  }
  state.lstm = lstm_.step(g, gather_rows(g.param(*embedding_), {previous}), state.lstm);
  state.prefix.push_back(previous);
  state.finished = previous == config_.eos;
  return logits_from(g, source, state.lstm.h, kind, drop_probability, rng);
}

Expr Seq2SeqHead::decoder_states(Graph& g, std::span<const int> target) const {
  std::vector<int> inputs = {config_.bos};
  for (int y : target) {
    if (y < 0 || y >= config_.target_vocab) throw std::out_of_range("target token out of range");
    inputs.push_back(y);
  }
  Expr embedded = gather_rows(g.param(*embedding_), inputs);
  LstmCell::State state = lstm_.initial_state(g, 1);
  std::vector<Expr> states;
  for (int s = 0; s < static_cast<int>(inputs.size()); ++s) {
    state = lstm_.step(g, slice_rows(embedded, s, 1), state);
    states.push_back(state.h);
  }
  return concat_rows(states);
}

Expr Seq2SeqHead::teacher_forced_logits(Graph& g, Expr source,
                                        std::span<const int> target, DecoderKind kind,
                                        double drop_probability, Rng* rng) const {
  Expr states = decoder_states(g, target);
  if (kind == DecoderKind::kFuture) {
    if (target.empty()) throw std::invalid_argument("future decoder needs a nonempty target");
    states = slice_rows(states, 0, static_cast<int>(target.size()));
  }
  return logits_from(g, source, states, kind, drop_probability, rng);
}

Expr Seq2SeqHead::supervised_loss(Graph& g, const EncoderOutput& enc,
                                  std::span<const std::vector<int>> targets,
                                  double label_smoothing) const {
  if (static_cast<int>(targets.size()) != enc.layout.sentences()) {
    throw std::invalid_argument("target count does not match the batch");
  }
  size_t steps = 0;
  for (const auto& t : targets) steps += t.size() + 1;
  Expr total = g.constant(Matrix::Zero(1, 1));
  for (int s = 0; s < enc.layout.sentences(); ++s) {
    std::vector<int> gold = targets[static_cast<size_t>(s)];
    Expr logits = teacher_forced_logits(g, source_states(enc, s), gold, DecoderKind::kPrimary);
    gold.push_back(config_.eos);
    const std::vector<double> weights(gold.size(), 1.0 / static_cast<double>(steps));
    total = add(total, soft_cross_entropy(
                           logits, smoothed_targets(gold, config_.target_vocab, label_smoothing),
                           weights));
  }
  return total;
}

Expr Seq2SeqHead::cvt_loss(Graph& g, std::span<const std::vector<int>> beams,
                           const EncoderOutput& student,
                           std::span<const DecoderKind> students, Rng& rng,
                           std::span<const double> weights) const {
  if (static_cast<int>(beams.size()) != student.layout.sentences()) {
    throw std::invalid_argument("one beam output per sentence required");
  }
  if (!weights.empty() && weights.size() != students.size()) {
    throw std::invalid_argument("one weight per decoder required");
  }
  int used = 0;
  for (const auto& b : beams) used += b.empty() ? 0 : 1;
  Expr total = g.constant(Matrix::Zero(1, 1));
  if (used == 0) return total;
  for (int s = 0; s < student.layout.sentences(); ++s) {
    const std::vector<int>& beam = beams[static_cast<size_t>(s)];
    if (beam.empty()) continue;
    Expr source = source_states(student, s);
    std::vector<int> full = beam;
    full.push_back(config_.eos);
    for (size_t k = 0; k < students.size(); ++k) {
      const DecoderKind kind = students[k];
      if (kind == DecoderKind::kPrimary) {
        throw std::invalid_argument("the primary decoder is not a student");
      }
      const double w = weights.empty() ? 1.0 : weights[k];
      Expr logits;
      std::vector<int> gold;
      if (kind == DecoderKind::kFuture) {
        logits = teacher_forced_logits(g, source, beam, kind);
        gold.assign(full.begin() + 1, full.end());
      } else {
        logits = teacher_forced_logits(g, source, beam, kind, config_.attention_dropout, &rng);
        gold = full;
      }
      const std::vector<double> row_weights(
          gold.size(), w / (static_cast<double>(gold.size()) * used));
      total = add(total, soft_cross_entropy(
                             logits,
                             smoothed_targets(gold, config_.target_vocab,
                                              config_.label_smoothing),
                             row_weights));
    }
  }
  return total;
}

BeamResult Seq2SeqHead::beam_search(const Matrix& source, int width, int max_length) const {
  if (width < 1) throw std::invalid_argument("beam width must be at least 1");
  if (max_length < 1) throw std::invalid_argument("max length must be at least 1");
  if (source.rows() == 0) throw std::invalid_argument("empty source");
  struct Hypothesis {
    std::vector<int> tokens;
    double logp;
    Matrix h, c;
  };
  struct Candidate {
    int hypothesis;
    int token;
    double logp;
  };
  std::vector<Hypothesis> alive;
  {
    Graph g(false);
    LstmCell::State init = lstm_.initial_state(g, 1);
    alive.push_back({{}, 0.0, init.h.value(), init.c.value()});
  }
  std::vector<BeamResult> finished;
  const int vocab = config_.target_vocab;
  for (int step = 0; step < max_length && !alive.empty(); ++step) {
    Graph g(false);
    const auto n = static_cast<Eigen::Index>(alive.size());
    Matrix h(n, alive[0].h.cols()), c(n, alive[0].c.cols());
    std::vector<int> previous;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Hypothesis& hyp = alive[static_cast<size_t>(i)];
      h.row(i) = hyp.h;
      c.row(i) = hyp.c;
      previous.push_back(hyp.tokens.empty() ? config_.bos : hyp.tokens.back());
    }
    LstmCell::State next = lstm_.step(g, gather_rows(g.param(*embedding_), previous),
                                      {g.constant(h), g.constant(c)});
    Expr logits = logits_from(g, g.constant(source), next.h, DecoderKind::kPrimary, 0.0, nullptr);
    const Matrix logp = log_softmax(logits).value();

    std::vector<Candidate> candidates;
    candidates.reserve(static_cast<size_t>(n * vocab));
    for (int i = 0; i < n; ++i) {
      for (int v = 0; v < vocab; ++v) {
        candidates.push_back({i, v, alive[static_cast<size_t>(i)].logp + logp(i, v)});
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.logp > b.logp; });
    if (static_cast<int>(candidates.size()) > width) candidates.resize(static_cast<size_t>(width));

    std::vector<Hypothesis> survivors;
    for (const Candidate& cand : candidates) {
      std::vector<int> tokens = alive[static_cast<size_t>(cand.hypothesis)].tokens;
      if (cand.token == config_.eos) {
        const double score = cand.logp / static_cast<double>(tokens.size() + 1);
        finished.push_back({std::move(tokens), score, true});
        continue;
      }
      tokens.push_back(cand.token);
      survivors.push_back({std::move(tokens), cand.logp, next.h.value().row(cand.hypothesis),
                           next.c.value().row(cand.hypothesis)});
    }
    alive = std::move(survivors);
  }

  auto better = [](const BeamResult& a, const BeamResult& b) { return a.score > b.score; };
  if (!finished.empty()) {
    return *std::min_element(finished.begin(), finished.end(), better);
  }
  BeamResult best;
  bool any = false;
  for (const Hypothesis& hyp : alive) {
    const double score = hyp.logp / static_cast<double>(hyp.tokens.size());
    if (!any || score > best.score) best = {hyp.tokens, score, false};
    any = true;
  }
  return best;
}

BeamResult Seq2SeqHead::greedy(const Matrix& source, int max_length) const {
  Graph g(false);
  Expr src = g.constant(source);
  DecoderState state = start(g);
  BeamResult out;
  double logp = 0.0;
  int previous = config_.bos;
  for (int step = 0; step < max_length; ++step) {
    const Matrix lp = log_softmax(decode_step(g, src, state, previous, DecoderKind::kPrimary))
                          .value();
    Eigen::Index best = 0;
    lp.row(0).maxCoeff(&best);
    logp += lp(0, best);
    if (static_cast<int>(best) == config_.eos) {
      out.terminated = true;
      out.score = logp / static_cast<double>(out.tokens.size() + 1);
      return out;
    }
    out.tokens.push_back(static_cast<int>(best));
    previous = static_cast<int>(best);
  }
  out.score = logp / static_cast<double>(out.tokens.size());
  return out;
}

std::vector<std::vector<int>> Seq2SeqHead::teacher(const EncoderOutput& enc) const {
  std::vector<std::vector<int>> out;
  for (int s = 0; s < enc.layout.sentences(); ++s) {
    out.push_back(beam_search(source_states(enc, s).value(), config_.beam_width,
                              config_.max_length)
                      .tokens);
  }
  return out;
}

std::vector<Parameter*> Seq2SeqHead::parameters(DecoderKind kind) const {
  const Module& m = module(kind);
  return {m.w_alpha, m.w_a, m.w_s};
}

std::vector<Parameter*> Seq2SeqHead::shared_parameters() const {
  std::vector<Parameter*> out = {embedding_};
  for (Parameter* p : lstm_.parameters()) out.push_back(p);
  return out;
}

// ---- Metrics ----------------------------------------------------------------

double bleu(std::span<const std::vector<int>> hypotheses,
            std::span<const std::vector<int>> references) {
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("bleu: hypothesis and reference counts differ");
  }
  constexpr int kMaxOrder = 4;
  std::array<double, kMaxOrder> matches{}, totals{};
  double hyp_len = 0, ref_len = 0;
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& hyp = hypotheses[i];
    const auto& ref = references[i];
    hyp_len += static_cast<double>(hyp.size());
    ref_len += static_cast<double>(ref.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
      std::map<std::vector<int>, int> ref_counts;
      for (size_t k = 0; k + n <= ref.size(); ++k) {
        ++ref_counts[std::vector<int>(ref.begin() + static_cast<long>(k),
                                      ref.begin() + static_cast<long>(k + n))];
      }
      for (size_t k = 0; k + n <= hyp.size(); ++k) {
        auto it = ref_counts.find(std::vector<int>(hyp.begin() + static_cast<long>(k),
                                                   hyp.begin() + static_cast<long>(k + n)));
        if (it != ref_counts.end() && it->second > 0) {
          --it->second;
          ++matches[n - 1];
        }
        ++totals[n - 1];
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_precision = 0.0;
  for (int n = 0; n < kMaxOrder; ++n) {
    if (matches[n] == 0) return 0.0;
    log_precision += std::log(matches[n] / totals[n]) / kMaxOrder;
  }
  const double brevity = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return 100.0 * brevity * std::exp(log_precision);
}

double exact_match(std::span<const std::vector<int>> hypotheses,
                   std::span<const std::vector<int>> references) {
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("exact_match: hypothesis and reference counts differ");
  }
  if (hypotheses.empty()) return 0.0;
  size_t same = 0;
  for (size_t i = 0; i < hypotheses.size(); ++i) same += hypotheses[i] == references[i];
  return 100.0 * static_cast<double>(same) / static_cast<double>(hypotheses.size());
}

}  // namespace cvt
