#include "checks.h"

#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <algorithm>
#include <set>
#include <sstream>

#include "cvt/experiment.h"
#include "cvt/parsing.h"
#include "cvt/seq2seq.h"
#include "cvt/tagging.h"
#include "cvt/trainer.h"
#include "fixtures.h"

namespace cvt::testing {

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

Seq2SeqConfig tiny_decoder_config(int vocab) {
  Seq2SeqConfig c;
  c.target_vocab = vocab;
  c.bos = 0;
  c.eos = 1;
  c.embedding_dim = 4;
  c.hidden = 5;
  c.attention_dim = 4;
  c.beam_width = 3;
  c.max_length = 6;
  return c;
}

// Random (head, relation) distribution rows with the self-loop columns zero.
Matrix random_parse_targets(Rng& rng, int tokens, int relations) {
  Matrix m = random_distribution(rng, tokens, (tokens + 1) * relations);
  for (int t = 0; t < tokens; ++t) {
    for (int r = 0; r < relations; ++r) m(t, candidate_column(t + 1, r, relations)) = 0.0;
    m.row(t) /= m.row(t).sum();
  }
  return m;
}

}  // namespace

// ---- Gradient fidelity --------------------------------------------------------

namespace {

using LossBuilder = std::function<Expr(Graph&)>;

// Central differences at h and h/2 agree wherever the loss is smooth on
// [x - h, x + h]; a ReLU or max-pool switch inside the interval breaks that.
bool smooth_at(const LossBuilder& loss, std::span<Parameter* const> params, double h) {
  auto evaluate = [&loss]() {
    Graph g(false);
    return loss(g).scalar();
  };
  for (Parameter* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      double d[2];
      for (int k = 0; k < 2; ++k) {
        const double step = k == 0 ? h : h / 2;
        x = saved + step;
        const double up = evaluate();
        x = saved - step;
        const double down = evaluate();
        d[k] = (up - down) / (2 * step);
      }
      x = saved;
      if (std::abs(d[0] - d[1]) > 1e-5 * std::max(std::abs(d[0]), std::abs(d[1])) + 1e-10) {
        return false;
      }
    }
  }
  return true;
}

// Redraws the random point until no kink lies within one step of any
// coordinate, then runs grad_check there. Gives up after 20 draws and
// checks the last one regardless.
GradCheckResult check_at_smooth_point(const std::function<void()>& draw, const LossBuilder& loss,
                                      std::span<Parameter* const> params, int& redraws) {
  constexpr double kStep = 1e-4;
  for (int attempt = 0; attempt < 20; ++attempt) {
    draw();
    if (smooth_at(loss, params, kStep)) break;
    ++redraws;
  }
  return grad_check(loss, params, kStep);
}

}  // namespace

GradientReport gradient_fidelity(uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  GradientReport report;
  auto record = [&report](const std::string& name, const GradCheckResult& r) {
    report.cases.push_back({name, r.max_relative_error, r.worst_parameter, r.worst_analytic,
                            r.worst_numeric});
    report.worst = std::max(report.worst, r.max_relative_error);
  };
  // Parameters are drawn at scale 0.5 rather than left at their initial
  // values, so that no checked gradient sits at the roundoff floor.
  constexpr double kScale = 0.5;
  Rng rng(seed);
  const EncoderConfig ec = tiny_encoder_config();

  {
    ParameterStore store;
    Encoder encoder(ec, kTinyVocab, kTinyChars, store, rng);
    std::vector<TokenizedSentence> batch;
    Matrix weights;
    const std::vector<Parameter*> params = encoder.char_parameters();
    record("char CNN", check_at_smooth_point(
                           [&] {
                             randomize(store, rng, kScale);
                             batch = random_batch(rng, 2, 1, 4);
                             weights = random_matrix(rng, BatchLayout::of(batch).tokens, ec.word_dim);
                           },
                           [&](Graph& g) {
                             return sum(cwise_mul(encoder.embed(g, batch), g.constant(weights)));
                           },
                           params, report.redraws));
  }
  {
    ParameterStore store;
    LstmCell cell("cell/", 4, 5, 3, store, rng);
    Matrix x0, x1, wh, wc;
    const std::vector<Parameter*> params = cell.parameters();
    record("LSTM cell", check_at_smooth_point(
                            [&] {
                              randomize(store, rng, kScale);
                              x0 = random_matrix(rng, 3, 4);
                              x1 = random_matrix(rng, 3, 4);
                              wh = random_matrix(rng, 3, 3);
                              wc = random_matrix(rng, 3, 5);
                            },
                            [&](Graph& g) {
                              LstmCell::State s = cell.initial_state(g, 3);
                              s = cell.step(g, g.constant(x0), s);
                              s = cell.step(g, g.constant(x1), s);
                              return add(sum(cwise_mul(s.h, g.constant(wh))),
                                         sum(cwise_mul(s.c, g.constant(wc))));
                            },
                            params, report.redraws));
  }
  {
    ParameterStore store;
    Encoder encoder(ec, kTinyVocab, kTinyChars, store, rng);
    TaggingHead head("tag/", ec, 4, 3, store, rng);
    std::vector<TokenizedSentence> batch;
    std::vector<std::vector<int>> gold;
    const std::vector<Parameter*> params = store.with_prefix(encoder.prefix());
    record("encoder", check_at_smooth_point(
                          [&] {
                            randomize(store, rng, kScale);
                            batch = random_batch(rng, 2, 1, 4);
                            gold.clear();
                            for (const auto& s : batch) {
                              std::vector<int> tags;
                              for (size_t t = 0; t < s.words.size(); ++t) {
                                tags.push_back(rng.uniform_int(3));
                              }
                              gold.push_back(tags);
                            }
                          },
                          [&](Graph& g) {
                            EncoderOutput enc = encoder.run(g, batch, {});
                            return head.supervised_loss(g, enc, gold, 0.1);
                          },
                          params, report.redraws));
  }
  {
    ParameterStore store;
    TaggingHead head("tag/", ec, 6, 4, store, rng);
    const std::vector<int> lengths = {3, 1, 4};
    Rng fixed = rng;
    Matrix teacher;
    std::vector<std::vector<int>> gold;
    for (TagView view : {TagView::kPrimary, TagView::kForward, TagView::kBackward,
                         TagView::kFuture, TagView::kPast, TagView::kFullDropped}) {
      const std::vector<Parameter*> params = head.parameters(view);
      record("tagging " + std::string(tag_view_name(view)),
             check_at_smooth_point(
                 [&] {
                   randomize(store, rng, kScale);
                   fixed = Rng(rng.next());
                   Rng draw = fixed;
                   Graph probe;
                   const EncoderOutput shapes = random_encoder_output(probe, draw, ec, lengths);
                   teacher = random_distribution(draw, shapes.layout.tokens, 4);
                   gold.clear();
                   for (int len : lengths) {
                     std::vector<int> tags;
                     for (int t = 0; t < len; ++t) tags.push_back(draw.uniform_int(4));
                     gold.push_back(tags);
                   }
                 },
                 [&](Graph& g) {
                   Rng same = fixed;
                   EncoderOutput enc = random_encoder_output(g, same, ec, lengths);
                   if (view == TagView::kPrimary) return head.supervised_loss(g, enc, gold, 0.1);
                   const TagView views[] = {view};
                   return head.cvt_loss(g, teacher, enc, views);
                 },
                 params, report.redraws));
    }
  }
  {
    ParameterStore store;
    const int relations = 3;
    ParserHead head("parse/", ec, 5, relations, store, rng);
    const std::vector<int> lengths = {3, 4};
    Rng fixed = rng;
    std::vector<Matrix> teacher;
    std::vector<DepParse> gold;
    for (ParseView view : {ParseView::kPrimary, ParseView::kFwdFwd, ParseView::kFwdBwd,
                           ParseView::kBwdFwd, ParseView::kBwdBwd}) {
      const std::vector<Parameter*> params = head.parameters(view);
      record("parser " + std::string(parse_view_name(view)),
             check_at_smooth_point(
                 [&] {
                   randomize(store, rng, kScale);
                   fixed = Rng(rng.next());
                   Rng draw = fixed;
                   Graph probe;
                   random_encoder_output(probe, draw, ec, lengths);
                   teacher.clear();
                   gold.clear();
                   for (int len : lengths) {
                     teacher.push_back(random_parse_targets(draw, len, relations));
                     DepParse p;
                     for (int t = 0; t < len; ++t) {
                       int h = draw.uniform_int(len);
                       if (h == t + 1) h = 0;
                       p.heads.push_back(h);
                       p.relations.push_back(draw.uniform_int(relations));
                     }
                     gold.push_back(p);
                   }
                 },
                 [&](Graph& g) {
                   Rng same = fixed;
                   EncoderOutput enc = random_encoder_output(g, same, ec, lengths);
                   if (view == ParseView::kPrimary) return head.supervised_loss(g, enc, gold);
                   const ParseView views[] = {view};
                   return head.cvt_loss(g, teacher, enc, views);
                 },
                 params, report.redraws));
    }
  }
  {
    ParameterStore store;
    const Seq2SeqConfig dc = tiny_decoder_config(6);
    Seq2SeqHead head("s2s/", ec, dc, store, rng);
    Parameter& source = store.create("source", 4, 2 * ec.direction_dim(2), Init::kGlorot, rng);
    Matrix targets;
    for (DecoderKind kind :
         {DecoderKind::kPrimary, DecoderKind::kAttentionDropout, DecoderKind::kFuture}) {
      std::vector<Parameter*> params = head.parameters(kind);
      for (Parameter* p : head.shared_parameters()) params.push_back(p);
      params.push_back(&source);
      const double drop = kind == DecoderKind::kAttentionDropout ? 0.3 : 0.0;
      record("decoder step " + std::string(decoder_kind_name(kind)),
             check_at_smooth_point(
                 [&] {
                   randomize(store, rng, kScale);
                   targets = random_distribution(rng, 2, dc.target_vocab);
                 },
                 [&](Graph& g) {
                   Rng mask(seed + 17);
                   Expr src = g.param(source);
                   DecoderState state = head.start(g);
                   Expr a = head.decode_step(g, src, state, dc.bos, kind, drop, &mask);
                   Expr b = head.decode_step(g, src, state, 3, kind, drop, &mask);
                   const double w[] = {0.5, 0.5};
                   return soft_cross_entropy(concat_rows({a, b}), targets, w);
                 },
                 params, report.redraws));
    }
  }
  report.seconds = seconds_since(start);
  return report;
}

// ---- View restriction -----------------------------------------------------------

namespace {

struct ViewOutputs {
  std::array<Matrix, 4> tagging;
  std::array<Matrix, 4> parsing;
};

ViewOutputs view_outputs(const Encoder& encoder, const TaggingHead& tagger,
                         const ParserHead& parser, const TokenizedSentence& sentence) {
  Graph g(false);
  const TokenizedSentence batch[] = {sentence};
  const EncoderOutput enc = encoder.run(g, batch, {});
  ViewOutputs out;
  for (size_t k = 0; k < 4; ++k) {
    out.tagging[k] = tagger.logits(g, enc, kTagAuxViews[k]).value();
    out.parsing[k] = parser.scores(g, enc, kParseAuxViews[k], 0).value();
  }
  return out;
}

// Token positions [lo, hi] (inclusive, 0-based) a view output reads.
struct Range {
  int lo = 0;
  int hi = -1;
  bool contains(int k) const { return k >= lo && k <= hi; }
};

Range tag_view_range(TagView view, int t, int n) {
  switch (view) {
    case TagView::kForward: return {0, t};
    case TagView::kBackward: return {t, n - 1};
    case TagView::kFuture: return {0, t - 1};
    case TagView::kPast: return {t + 1, n - 1};
    default: return {0, n - 1};
  }
}

// Head side of candidate u (0 = ROOT, else token u - 1) and dependent side of
// token i.
std::pair<Range, Range> parse_view_ranges(ParseView view, int i, int u, int n) {
  const bool head_forward = view == ParseView::kFwdFwd || view == ParseView::kFwdBwd;
  const bool dep_forward = view == ParseView::kFwdFwd || view == ParseView::kBwdFwd;
  Range head;
  if (u > 0) head = head_forward ? Range{0, u - 1} : Range{u - 1, n - 1};
  const Range dep = dep_forward ? Range{0, i} : Range{i, n - 1};
  return {head, dep};
}

TokenizedSentence perturb(const TokenizedSentence& s, const std::vector<char>& mask, Rng& rng) {
  TokenizedSentence out = s;
  for (size_t t = 0; t < mask.size(); ++t) {
    if (!mask[t]) continue;
    int w = s.words[t];
    while (w == s.words[t]) w = 5 + rng.uniform_int(kTinyVocab - 5);
    out.words[t] = w;
    out.chars[t].clear();
    const int n = 1 + rng.uniform_int(4);
    for (int k = 0; k < n; ++k) out.chars[t].push_back(2 + rng.uniform_int(kTinyChars - 2));
  }
  return out;
}

}  // namespace

ViewReport view_restriction(int sentences, int max_length, uint64_t seed) {
  ViewReport report;
  report.sentences = sentences;
  Rng rng(seed);
  const EncoderConfig ec = tiny_encoder_config();
  ParameterStore store;
  Encoder encoder(ec, kTinyVocab, kTinyChars, store, rng);
  const int relations = 2;
  TaggingHead tagger("tag/", ec, 6, 4, store, rng);
  ParserHead parser("parse/", ec, 5, relations, store, rng);
  Seq2SeqHead decoder("s2s/", ec, tiny_decoder_config(7), store, rng);
  randomize(store, rng, 0.5);

  auto violation = [&report](const std::string& what) {
    ++report.violations;
    if (report.examples.size() < 5) report.examples.push_back(what);
  };

  for (int s = 0; s < sentences; ++s) {
    const int n = 1 + rng.uniform_int(max_length);
    const TokenizedSentence base = random_sentence(rng, n);
    const ViewOutputs ref = view_outputs(encoder, tagger, parser, base);

    std::vector<std::vector<char>> masks;
    for (int m = 1; m <= n; ++m) {
      std::vector<char> prefix(n, 0), suffix(n, 0);
      for (int k = 0; k < m; ++k) prefix[k] = 1;
      for (int k = n - m; k < n; ++k) suffix[k] = 1;
      masks.push_back(prefix);
      masks.push_back(suffix);
    }
    for (int r = 0; r < 10; ++r) {
      const int a = rng.uniform_int(n);
      const int b = a + rng.uniform_int(n - a);
      std::vector<char> interval(n, 0);
      for (int k = a; k <= b; ++k) interval[k] = 1;
      masks.push_back(interval);
    }

    for (const std::vector<char>& mask : masks) {
      const ViewOutputs out = view_outputs(encoder, tagger, parser, perturb(base, mask, rng));
      auto touches = [&mask](const Range& range) {
        for (int k = range.lo; k <= range.hi; ++k) {
          if (mask[static_cast<size_t>(k)]) return true;
        }
        return false;
      };
      for (size_t v = 0; v < 4; ++v) {
        const TagView view = kTagAuxViews[v];
        for (int t = 0; t < n; ++t) {
          if (touches(tag_view_range(view, t, n))) continue;
          ++report.checked;
          if (!bitwise_equal(ref.tagging[v].row(t), out.tagging[v].row(t))) {
            std::ostringstream msg;
            msg << "tagging " << tag_view_name(view) << " sentence " << s << " token " << t;
            violation(msg.str());
          }
        }
      }
      for (size_t v = 0; v < 4; ++v) {
        const ParseView view = kParseAuxViews[v];
        for (int i = 0; i < n; ++i) {
          for (int u = 0; u <= n; ++u) {
            if (u == i + 1) continue;
            const auto [head, dep] = parse_view_ranges(view, i, u, n);
            if (touches(head) || touches(dep)) continue;
            ++report.checked;
            const Matrix a = ref.parsing[v].block(i, u * relations, 1, relations);
            const Matrix b = out.parsing[v].block(i, u * relations, 1, relations);
            if (!bitwise_equal(a, b)) {
              std::ostringstream msg;
              msg << "parser " << parse_view_name(view) << " sentence " << s << " dependent " << i
                  << " head " << u;
              violation(msg.str());
            }
          }
        }
      }
    }

    // Decoder row j predicts y_j (primary) or y_{j+1} (future) and may only
    // read y_0..y_{j-1}.
    Graph g(false);
    const TokenizedSentence batch[] = {base};
    const EncoderOutput enc = encoder.run(g, batch, {});
    const Expr source = Seq2SeqHead::source_states(enc, 0);
    const int k_len = 1 + rng.uniform_int(6);
    std::vector<int> target;
    for (int j = 0; j < k_len; ++j) target.push_back(2 + rng.uniform_int(5));
    const int from = rng.uniform_int(k_len);
    std::vector<int> changed = target;
    for (int j = from; j < k_len; ++j) changed[j] = 2 + (changed[j] - 2 + 1 + rng.uniform_int(4)) % 5;
    for (DecoderKind kind : {DecoderKind::kFuture, DecoderKind::kPrimary}) {
      const Matrix a = decoder.teacher_forced_logits(g, source, target, kind).value();
      const Matrix b = decoder.teacher_forced_logits(g, source, changed, kind).value();
      for (int j = 0; j <= from; ++j) {
        ++report.checked;
        if (!bitwise_equal(a.row(j), b.row(j))) {
          std::ostringstream msg;
          msg << decoder_kind_name(kind) << " decoder sentence " << s << " row " << j;
          violation(msg.str());
        }
      }
    }
  }
  return report;
}

// ---- Teacher contracts ----------------------------------------------------------

namespace {

ExperimentConfig contract_config() {
  ExperimentConfig c;
  c.encoder.word_dim = 8;
  c.encoder.char_dim = 4;
  c.encoder.char_widths = {2, 3};
  c.encoder.char_filters = 3;
  c.encoder.lstm1 = 8;
  c.encoder.lstm2 = 6;
  c.encoder.projection = 0;
  c.heads.tagging_hidden = 8;
  c.heads.parser_mlp = 8;
  c.heads.seq2seq.embedding_dim = 6;
  c.heads.seq2seq.hidden = 8;
  c.heads.seq2seq.attention_dim = 6;
  c.heads.seq2seq.beam_width = 3;
  c.heads.seq2seq.max_length = 12;
  c.dedupe = false;
  auto task = [](const std::string& name, TaskKind kind, SynthKind gen) {
    TaskConfig t;
    t.name = name;
    t.kind = kind;
    SynthTaskSpec spec;
    spec.kind = gen;
    spec.labeled = 20;
    spec.unlabeled = 30;
    spec.dev = 5;
    spec.max_length = 10;
    spec.rule = TransductionRule::kReverse;
    t.synthetic = spec;
    return t;
  };
  c.tasks = {task("markov", TaskKind::kTagging, SynthKind::kMarkovTagger),
             task("tree", TaskKind::kParsing, SynthKind::kTreeGrammar),
             task("reverse", TaskKind::kSeq2Seq, SynthKind::kTransduction)};
  return c;
}

bool same_targets(const TeacherTargets& a, const TeacherTargets& b) {
  if (a.index() != b.index()) return false;
  if (const auto* m = std::get_if<Matrix>(&a)) return bitwise_equal(*m, std::get<Matrix>(b));
  if (const auto* v = std::get_if<std::vector<Matrix>>(&a)) {
    const auto& w = std::get<std::vector<Matrix>>(b);
    if (v->size() != w.size()) return false;
    for (size_t i = 0; i < v->size(); ++i) {
      if (!bitwise_equal((*v)[i], w[i])) return false;
    }
    return true;
  }
  return std::get<std::vector<std::vector<int>>>(a) == std::get<std::vector<std::vector<int>>>(b);
}

}  // namespace

TeacherReport teacher_contracts(uint64_t seed) {
  TeacherReport report;
  const ExperimentConfig config = contract_config();
  const ExperimentData data = load_data(config, seed);
  std::unique_ptr<Model> model = build_model(config, data, seed);
  TrainerConfig tc;
  tc.seed = seed;
  tc.batch_size = 8;
  tc.unlabeled_batch_size = 8;
  Trainer trainer(*model, tc, data.pool);
  const std::vector<TokenizedSentence> batch = trainer.unlabeled_batch(0);

  const int all[] = {0, 1, 2};
  trainer.cvt_objective(batch, all, 0, true);
  double primary = 0.0, student = 0.0;
  for (const auto& task : model->tasks) {
    const std::vector<Parameter*> prim = task->primary_parameters();
    for (Parameter* p : task->parameters()) {
      const double sq = p->grad.squaredNorm();
      if (std::find(prim.begin(), prim.end(), p) != prim.end()) {
        primary += sq;
      } else {
        student += sq;
      }
    }
  }
  report.primary_grad_norm = std::sqrt(primary);
  report.student_grad_norm = std::sqrt(student);

  report.teacher_deterministic = true;
  for (const auto& task : model->tasks) {
    Graph g1(false), g2(false);
    const TeacherTargets a = task->teacher(model->encoder->run(g1, batch, {}));
    const TeacherTargets b = task->teacher(model->encoder->run(g2, batch, {}));
    report.teacher_deterministic = report.teacher_deterministic && same_targets(a, b);
  }

  {
    auto& tagging = dynamic_cast<TaggingTask&>(model->task("markov"));
    const std::vector<Parameter*> from = tagging.head().parameters(TagView::kPrimary);
    const std::vector<Parameter*> to = tagging.head().parameters(TagView::kFullDropped);
    for (size_t i = 0; i < from.size(); ++i) to[i]->value = from[i]->value;
    Graph g;
    const EncoderOutput enc = model->encoder->run(g, batch, {});
    const Matrix teacher = tagging.head().teacher(enc);
    const TagView views[] = {TagView::kFullDropped};
    report.equal_students_loss = tagging.head().cvt_loss(g, teacher, enc, views).scalar();
  }
  {
    auto& parsing = dynamic_cast<ParsingTask&>(model->task("tree"));
    Graph g;
    const EncoderOutput enc = model->encoder->run(g, batch, {});
    std::vector<Matrix> teacher;
    for (int s = 0; s < enc.layout.sentences(); ++s) {
      teacher.push_back(parsing.head().probabilities(g, enc, ParseView::kFwdFwd, s));
    }
    const ParseView views[] = {ParseView::kFwdFwd};
    report.parser_equal_loss = parsing.head().cvt_loss(g, teacher, enc, views).scalar();
  }
  return report;
}

double cvt_decomposition_error(uint64_t seed) {
  const ExperimentConfig config = contract_config();
  const ExperimentData data = load_data(config, seed);
  std::unique_ptr<Model> model = build_model(config, data, seed);
  TrainerConfig tc;
  tc.seed = seed;
  tc.unlabeled_batch_size = 8;
  Trainer trainer(*model, tc, data.pool);
  const std::vector<TokenizedSentence> batch = trainer.unlabeled_batch(3);
  const int64_t t = 5;
  const int all[] = {0, 1, 2};
  const double joint = trainer.cvt_objective(batch, all, t, false).total;
  double separate = 0.0;
  for (int k = 0; k < 3; ++k) {
    const int one[] = {k};
    separate += trainer.cvt_objective(batch, one, t, false).total;
  }
  return std::abs(joint - separate);
}

// ---- Normalization ----------------------------------------------------------------

NormalizationReport normalization(int trials, uint64_t seed) {
  NormalizationReport report;
  Rng rng(seed);
  const EncoderConfig ec = tiny_encoder_config();
  const int relations = 3;
  auto rows = [&report](const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      report.worst = std::max(report.worst, std::abs(m.row(r).sum() - 1.0));
      ++report.distributions;
    }
  };
  for (int trial = 0; trial < trials; ++trial) {
    ParameterStore store;
    Encoder encoder(ec, kTinyVocab, kTinyChars, store, rng);
    TaggingHead tagger("tag/", ec, 6, 5, store, rng);
    ParserHead parser("parse/", ec, 5, relations, store, rng);
    const Seq2SeqConfig dc = tiny_decoder_config(7);
    Seq2SeqHead decoder("s2s/", ec, dc, store, rng);
    const double scales[] = {0.3, 1.0, 3.0, 8.0};
    randomize(store, rng, scales[trial % 4]);

    Graph g(false);
    const auto batch = random_batch(rng, 3, 1, 12);
    const EncoderOutput enc = encoder.run(g, batch, {});
    for (TagView view : {TagView::kPrimary, TagView::kForward, TagView::kBackward,
                         TagView::kFuture, TagView::kPast, TagView::kFullDropped}) {
      rows(tagger.probabilities(g, enc, view).value());
    }
    for (int s = 0; s < enc.layout.sentences(); ++s) {
      for (ParseView view : {ParseView::kPrimary, ParseView::kFwdFwd, ParseView::kFwdBwd,
                             ParseView::kBwdFwd, ParseView::kBwdBwd}) {
        rows(parser.probabilities(g, enc, view, s));
      }
      const Expr source = Seq2SeqHead::source_states(enc, s);
      const Expr hbar = g.constant(random_matrix(rng, 4, dc.hidden, scales[trial % 4]));
      for (DecoderKind kind :
           {DecoderKind::kPrimary, DecoderKind::kAttentionDropout, DecoderKind::kFuture}) {
        rows(decoder.attend(g, source, hbar, kind).weights.value());
        Rng mask(seed + static_cast<uint64_t>(trial));
        rows(decoder.attend(g, source, hbar, kind, 0.5, &mask).weights.value());
        DecoderState state = decoder.start(g);
        int previous = dc.bos;
        for (int step = 0; step < 3; ++step) {
          rows(softmax(decoder.decode_step(g, source, state, previous, kind)).value());
          previous = 2 + rng.uniform_int(dc.target_vocab - 2);
        }
      }
    }
  }
  return report;
}

// ---- Scheduler and EMA ------------------------------------------------------------

ScheduleReport schedule_and_ema() {
  ScheduleReport report;
  report.lr_error = std::max({std::abs(lr(0) - 0.5), std::abs(lr(10000) - 1.0 / 3.0),
                              std::abs(lr(40000) - 0.25)});
  Rng rng(7);
  {
    ParameterStore store;
    Parameter& p = store.create("p", 3, 4, Init::kGlorot, rng);
    Ema ema(store, 0.998);
    const Matrix before = p.value;
    for (int i = 0; i < 10; ++i) ema.update();
    report.ema_fixed_point = bitwise_equal(ema.shadow(p), before) && bitwise_equal(p.value, before);
  }
  {
    ParameterStore store;
    Parameter& p = store.create("p", 3, 4, Init::kGlorot, rng);
    Ema ema(store, 0.998);
    p.value = random_matrix(rng, 3, 4);
    ema.update();
    const Matrix live = p.value, shadow = ema.shadow(p);
    ema.swap();
    const bool exchanged = bitwise_equal(p.value, shadow) && bitwise_equal(ema.shadow(p), live);
    ema.swap();
    report.ema_involution =
        exchanged && bitwise_equal(p.value, live) && bitwise_equal(ema.shadow(p), shadow);
  }
  {
    ParameterStore store;
    Parameter& p = store.create("p", 1, 1, Init::kZero, rng);
    p.value(0, 0) = 1.0;
    Ema ema(store, 0.998);
    p.value(0, 0) = 0.0;
    ema.update();
    report.ema_example = std::abs(ema.shadow(p)(0, 0) - 0.998) < 1e-15;
  }
  return report;
}

// ---- Beam search oracle -----------------------------------------------------------

BeamReport beam_oracle(int draws, uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  BeamReport report;
  const EncoderConfig ec = tiny_encoder_config();
  Seq2SeqConfig dc = tiny_decoder_config(3);
  dc.max_length = 3;
  const int width = 27;
  for (int d = 0; d < draws; ++d) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(d)));
    ParameterStore store;
    Seq2SeqHead head("s2s/", ec, dc, store, rng);
    randomize(store, rng, 1.5);
    const Matrix source = random_matrix(rng, 1 + rng.uniform_int(5), 2 * ec.direction_dim(2));

    // Every terminated sequence of at most max_length emitted tokens.
    std::vector<std::vector<int>> sequences = {{}};
    std::vector<std::vector<int>> frontier = {{}};
    for (int len = 1; len < dc.max_length; ++len) {
      std::vector<std::vector<int>> next;
      for (const auto& prefix : frontier) {
        for (int v = 0; v < dc.target_vocab; ++v) {
          if (v == dc.eos) continue;
          std::vector<int> s = prefix;
          s.push_back(v);
          next.push_back(s);
        }
      }
      sequences.insert(sequences.end(), next.begin(), next.end());
      frontier = next;
    }
    std::vector<int> best;
    double best_score = -std::numeric_limits<double>::infinity();
    for (const auto& seq : sequences) {
      Graph g(false);
      const Matrix logp =
          log_softmax(head.teacher_forced_logits(g, g.constant(source), seq, DecoderKind::kPrimary))
              .value();
      double total = 0.0;
      for (size_t j = 0; j < seq.size(); ++j) total += logp(static_cast<Eigen::Index>(j), seq[j]);
      total += logp(static_cast<Eigen::Index>(seq.size()), dc.eos);
      const double score = total / static_cast<double>(seq.size() + 1);
      if (score > best_score) {
        best_score = score;
        best = seq;
      }
    }
    const BeamResult beam = head.beam_search(source, width, dc.max_length);
    ++report.draws;
    if (beam.tokens != best || !beam.terminated) ++report.mismatches;
    report.worst_score_error = std::max(report.worst_score_error, std::abs(beam.score - best_score));
  }
  report.seconds = seconds_since(start);
  return report;
}

// ---- Evaluation metrics -----------------------------------------------------------

MetricReport metric_fixtures(int roundtrips, uint64_t seed) {
  MetricReport report;
  auto close = [](double a, double b) { return std::abs(a - b) < 1e-9; };

  struct F1Case {
    std::vector<std::vector<Span>> predicted, gold;
    double p, r, f;
  };
  using S = std::vector<Span>;
  const std::vector<F1Case> f1_cases = {
      {{S{{0, 1, "PER"}}}, {S{{0, 1, "PER"}}}, 1.0, 1.0, 1.0},
      {{S{{0, 1, "PER"}, {3, 3, "LOC"}}}, {S{{0, 1, "PER"}, {2, 2, "ORG"}}}, 0.5, 0.5, 0.5},
      {{S{}}, {S{{0, 0, "PER"}}}, 0.0, 0.0, 0.0},
      {{S{{0, 0, "PER"}}}, {S{}}, 0.0, 0.0, 0.0},
      {{S{{0, 1, "PER"}}}, {S{{0, 1, "LOC"}}}, 0.0, 0.0, 0.0},
      {{S{{0, 2, "PER"}}}, {S{{0, 1, "PER"}}}, 0.0, 0.0, 0.0},
      {{S{{0, 0, "A"}, {1, 1, "B"}, {2, 2, "C"}}}, {S{{0, 0, "A"}}}, 1.0 / 3.0, 1.0, 0.5},
      {{S{{0, 0, "A"}}}, {S{{0, 0, "A"}, {1, 1, "B"}, {2, 2, "C"}, {3, 3, "D"}}}, 1.0, 0.25, 0.4},
      {{S{{0, 1, "A"}, {2, 3, "B"}}}, {S{{0, 1, "A"}, {2, 3, "B"}, {5, 6, "C"}}}, 1.0, 2.0 / 3.0,
       0.8},
      {{S{}}, {S{}}, 0.0, 0.0, 0.0},
      {{S{{0, 0, "A"}}, S{{1, 2, "B"}}}, {S{{0, 0, "A"}}, S{{1, 1, "B"}}}, 0.5, 0.5, 0.5},
      {{S{{0, 0, "A"}}, S{}}, {S{}, S{{0, 0, "A"}}}, 0.0, 0.0, 0.0},
      {{S{{0, 1, "A"}, {4, 4, "B"}}, S{{2, 3, "A"}}},
       {S{{0, 1, "A"}}, S{{2, 3, "A"}, {5, 5, "C"}}},
       2.0 / 3.0,
       2.0 / 3.0,
       2.0 / 3.0},
  };
  for (size_t i = 0; i < f1_cases.size(); ++i) {
    const F1Case& c = f1_cases[i];
    const PrecisionRecall pr = span_f1(c.predicted, c.gold);
    ++report.f1_cases;
    if (!close(pr.precision, c.p) || !close(pr.recall, c.r) || !close(pr.f1, c.f)) {
      ++report.f1_failures;
      report.failures.push_back("span_f1 case " + std::to_string(i));
    }
  }
  {
    // Tag sequences decoded first.
    const std::vector<std::string> tags = {"B-PER", "E-PER", "S-LOC", "O"};
    const std::vector<std::string> repair = {"I-ORG"};
    const std::vector<std::vector<Span>> predicted = {bioes_decode(tags), bioes_decode(repair)};
    const std::vector<std::vector<Span>> gold = {S{{0, 1, "PER"}, {2, 2, "LOC"}},
                                                 S{{0, 0, "ORG"}}};
    const PrecisionRecall pr = span_f1(predicted, gold);
    ++report.f1_cases;
    if (!close(pr.f1, 1.0)) {
      ++report.f1_failures;
      report.failures.push_back("span_f1 decoded tags");
    }
  }

  struct AttachmentCase {
    std::vector<DepParse> predicted, gold;
    std::vector<std::vector<char>> punctuation;
    double uas, las;
  };
  using P = DepParse;
  using C = std::vector<char>;
  const std::vector<AttachmentCase> att_cases = {
      {{P{{2, 0, 2}, {1, 2, 3}}}, {P{{2, 0, 2}, {1, 2, 3}}}, {C{0, 0, 0}}, 100.0, 100.0},
      {{P{{2, 0, 2}, {2, 3, 1}}}, {P{{2, 0, 2}, {1, 2, 3}}}, {C{0, 0, 0}}, 100.0, 0.0},
      {{P{{2, 0, 1, 2}, {1, 5, 3, 4}}},
       {P{{2, 0, 2, 2}, {1, 2, 3, 4}}},
       {C{0, 0, 0, 1}},
       200.0 / 3.0,
       100.0 / 3.0},
      {{P{{3, 3, 0}, {0, 0, 0}}}, {P{{2, 0, 2}, {0, 0, 0}}}, {C{0, 0, 0}}, 0.0, 0.0},
      {{P{{0, 1, 2}, {0, 1, 1}}}, {P{{0, 1, 1}, {0, 1, 1}}}, {C{0, 0, 1}}, 100.0, 100.0},
      {{P{{2, 0}, {0, 0}}}, {P{{0, 1}, {0, 0}}}, {C{1, 1}}, 0.0, 0.0},
      {{P{{0}, {1}}}, {P{{0}, {2}}}, {C{0}}, 100.0, 0.0},
      {{P{{2, 0, 2}, {1, 1, 1}}, P{{2, 0}, {1, 1}}},
       {P{{2, 0, 2}, {1, 1, 1}}, P{{0, 1}, {1, 1}}},
       {C{0, 0, 0}, C{0, 0}},
       60.0,
       60.0},
      {{P{{0, 3, 1}, {1, 1, 1}}, P{{2, 0}, {1, 1}}},
       {P{{0, 1, 1}, {1, 1, 1}}, P{{0, 1}, {1, 1}}},
       {C{0, 1, 0}, C{0, 1}},
       200.0 / 3.0,
       200.0 / 3.0},
      {{P{{2, 0, 2, 3, 4}, {1, 2, 1, 1, 2}}},
       {P{{2, 0, 2, 2, 1}, {1, 2, 2, 1, 2}}},
       {C{0, 0, 0, 0, 0}},
       60.0,
       40.0},
      {{P{{2, 1}, {1, 2}}}, {P{{0, 1}, {1, 2}}}, {C{0, 0}}, 50.0, 50.0},
  };
  for (size_t i = 0; i < att_cases.size(); ++i) {
    const AttachmentCase& c = att_cases[i];
    const AttachmentScores s = uas_las(c.predicted, c.gold, c.punctuation);
    ++report.attachment_cases;
    if (!close(s.uas, c.uas) || !close(s.las, c.las)) {
      ++report.attachment_failures;
      report.failures.push_back("uas_las case " + std::to_string(i));
    }
  }

  Rng rng(seed);
  const char* types[] = {"PER", "LOC", "ORG", "MISC"};
  for (int i = 0; i < roundtrips; ++i) {
    const int length = 1 + rng.uniform_int(25);
    std::vector<Span> spans;
    int t = rng.uniform_int(3);
    while (t < length) {
      const int end = std::min(length - 1, t + rng.uniform_int(4));
      spans.push_back({t, end, types[rng.uniform_int(4)]});
      t = end + 1 + rng.uniform_int(3);
    }
    const std::vector<std::string> tags = bioes_encode(spans, length);
    const std::vector<Span> decoded = bioes_decode(tags);
    ++report.roundtrips;
    if (decoded != spans || bioes_encode(decoded, length) != tags) {
      ++report.roundtrip_failures;
      if (report.failures.size() < 10) report.failures.push_back("roundtrip " + std::to_string(i));
    }
  }
  return report;
}

// ---- Baseline plumbing ------------------------------------------------------------

BaselineReport baseline_plumbing(uint64_t seed) {
  BaselineReport report;
  Rng rng(seed);
  std::vector<TokenizedSentence> batch;
  int64_t tokens = 0;
  while (tokens < 100000) {
    batch.push_back(random_sentence(rng, 1 + rng.uniform_int(30)));
    tokens += static_cast<int64_t>(batch.back().words.size());
  }
  Rng noise(mix_seed(seed, 1));
  const std::vector<TokenizedSentence> dropped = word_dropout_view(batch, 0.1, noise);
  int64_t removed = 0;
  for (const auto& s : dropped) {
    for (int w : s.words) removed += w == Vocabulary::kRemoved ? 1 : 0;
  }
  report.tokens = tokens;
  report.replaced_fraction = static_cast<double>(removed) / static_cast<double>(tokens);

  const std::vector<int> lengths = {4, 1, 7, 3, 12};
  BatchLayout layout;
  for (int len : lengths) {
    layout.offsets.push_back(layout.tokens);
    layout.lengths.push_back(len);
    layout.tokens += len;
    layout.max_length = std::max(layout.max_length, len);
  }
  const int dim = 6;
  const Matrix v = random_matrix(rng, layout.tokens, dim);
  const Matrix w = random_matrix(rng, dim, 5);
  const Matrix teacher = random_distribution(rng, layout.tokens, 5);
  const std::vector<double> weights(static_cast<size_t>(layout.tokens), 1.0);
  auto divergence = [&](Graph& g, Expr perturbed) {
    return kl_from_logits(teacher, matmul(tanh(perturbed), g.constant(w)), weights);
  };
  auto flat = [](Graph&, Expr perturbed) { return scale(sum(perturbed), 0.0); };
  for (double eps : {0.5, 1.0, 1.5}) {
    for (int variant = 0; variant < 2; ++variant) {
      Rng probe(mix_seed(seed, static_cast<uint64_t>(eps * 10) + variant));
      const Matrix r = variant == 0 ? vat_perturbation(v, layout, eps, probe, divergence)
                                    : vat_perturbation(v, layout, eps, probe, flat);
      for (int s = 0; s < layout.sentences(); ++s) {
        const double norm = r.middleRows(layout.offsets[s], layout.lengths[s]).norm();
        report.worst_vat_norm_error = std::max(report.worst_vat_norm_error, std::abs(norm - eps));
        ++report.vat_sentences;
      }
    }
  }
  report.epsilon_defaults = default_vat_epsilon(TaskKind::kTagging, "ccg") == 1.5 &&
                            default_vat_epsilon(TaskKind::kParsing, "depparse") == 1.0 &&
                            default_vat_epsilon(TaskKind::kTagging, "ner") == 0.5 &&
                            default_vat_epsilon(TaskKind::kTagging, "chunk") == 0.5 &&
                            default_vat_epsilon(TaskKind::kTagging, "pos") == 0.5 &&
                            default_vat_epsilon(TaskKind::kSeq2Seq, "translate") == 0.5;
  return report;
}

}  // namespace cvt::testing
