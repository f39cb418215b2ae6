#include "cvt/parsing.h"

#include <stdexcept>

#include "cvt/tagging.h"

namespace cvt {

std::string_view parse_view_name(ParseView view) {
  switch (view) {
    case ParseView::kPrimary: return "primary";
    case ParseView::kFwdFwd: return "fwd-fwd";
    case ParseView::kFwdBwd: return "fwd-bwd";
    case ParseView::kBwdFwd: return "bwd-fwd";
    case ParseView::kBwdBwd: return "bwd-bwd";
  }
  return "?";
}

ParseView parse_parse_view(std::string_view name) {
  for (ParseView v : {ParseView::kPrimary, ParseView::kFwdFwd, ParseView::kFwdBwd,
                      ParseView::kBwdFwd, ParseView::kBwdBwd}) {
    if (parse_view_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown parsing view: " + std::string(name));
}

ParserHead::ParserHead(const std::string& name, const EncoderConfig& encoder,
                       int mlp_size, int relations, ParameterStore& store, Rng& rng)
    : name_(name), relations_(relations), mlp_size_(mlp_size) {
  if (mlp_size <= 0 || relations <= 0) {
    throw std::invalid_argument("parser sizes must be positive");
  }
  const int full = 2 * encoder.direction_dim(1) + 2 * encoder.direction_dim(2);
  const int half = encoder.direction_dim(1);
  for (ParseView v : {ParseView::kPrimary, ParseView::kFwdFwd, ParseView::kFwdBwd,
                      ParseView::kBwdFwd, ParseView::kBwdBwd}) {
    const int in = v == ParseView::kPrimary ? full : half;
    const std::string prefix = name + "/" + std::string(parse_view_name(v)) + "/";
    Module m;
    m.head_w = &store.create(prefix + "head_W", in, mlp_size, Init::kGlorot, rng);
    m.head_b = &store.create(prefix + "head_b", 1, mlp_size, Init::kZero, rng);
    m.dep_w = &store.create(prefix + "dep_W", in, mlp_size, Init::kGlorot, rng);
    m.dep_b = &store.create(prefix + "dep_b", 1, mlp_size, Init::kZero, rng);
    m.rel_w = &store.create(prefix + "W_rel", relations * mlp_size, mlp_size,
                            Init::kGlorot, rng);
    m.shared = &store.create(prefix + "W", mlp_size, mlp_size, Init::kGlorot, rng);
    m.root = &store.create(prefix + "root", 1, in, Init::kEmbedding, rng);
    modules_[static_cast<size_t>(v)] = m;
  }
}

const ParserHead::Module& ParserHead::module(ParseView view) const {
  const auto i = static_cast<size_t>(view);
  if (i >= modules_.size()) throw std::invalid_argument("unknown parsing view");
  return modules_[i];
}

std::pair<Expr, Expr> ParserHead::view_inputs(const EncoderOutput& enc,
                                              ParseView view) {
  switch (view) {
    case ParseView::kPrimary: {
      Expr full = concat_cols({enc.h1, enc.h2});
      return {full, full};
    }
    case ParseView::kFwdFwd: return {enc.h1fwd, enc.h1fwd};
    case ParseView::kFwdBwd: return {enc.h1fwd, enc.h1bwd};
    case ParseView::kBwdFwd: return {enc.h1bwd, enc.h1fwd};
    case ParseView::kBwdBwd: return {enc.h1bwd, enc.h1bwd};
  }
  throw std::invalid_argument("unknown parsing view");
}

Expr ParserHead::score_rows(Graph& g, const Module& m, Expr heads, Expr deps) const {
  Expr hh = relu(add(matmul(heads, g.param(*m.head_w)), g.param(*m.head_b)));
  Expr dd = relu(add(matmul(deps, g.param(*m.dep_w)), g.param(*m.dep_b)));
  return bilinear_scores(hh, dd, g.param(*m.rel_w), g.param(*m.shared), relations_);
}

Expr ParserHead::edge_score(Graph& g, Expr head, Expr dependent, int relation,
                            ParseView view) const {
  if (relation < 0 || relation >= relations_) {
    throw std::out_of_range("relation id out of range");
  }
  if (head.rows() != 1 || dependent.rows() != 1) {
    throw std::invalid_argument("edge_score takes single-row representations");
  }
  return slice_cols(score_rows(g, module(view), head, dependent), relation, 1);
}

Expr ParserHead::scores(Graph& g, const EncoderOutput& enc, ParseView view,
                        int sentence) const {
  const Module& m = module(view);
  const int offset = enc.layout.offsets[static_cast<size_t>(sentence)];
  const int len = enc.layout.lengths[static_cast<size_t>(sentence)];
  auto [head_in, dep_in] = view_inputs(enc, view);
  Expr heads = concat_rows({g.param(*m.root), slice_rows(head_in, offset, len)});
  Expr deps = slice_rows(dep_in, offset, len);
  Matrix mask = Matrix::Zero(len, (len + 1) * relations_);
  for (int t = 0; t < len; ++t) {
    mask.block(t, (t + 1) * relations_, 1, relations_).setConstant(kMaskedLogit);
  }
  return add(score_rows(g, m, heads, deps), g.constant(std::move(mask)));
}

Matrix ParserHead::probabilities(Graph& g, const EncoderOutput& enc, ParseView view,
                                 int sentence) const {
  return softmax(scores(g, enc, view, sentence)).value();
}

Expr ParserHead::supervised_loss(Graph& g, const EncoderOutput& enc,
                                 std::span<const DepParse> gold) const {
  const BatchLayout& layout = enc.layout;
  if (static_cast<int>(gold.size()) != layout.sentences()) {
    throw std::invalid_argument("gold parse count does not match the batch");
  }
  const double per_token = 1.0 / layout.tokens;
  Expr total = g.constant(Matrix::Zero(1, 1));
  for (int s = 0; s < layout.sentences(); ++s) {
    const int len = layout.lengths[static_cast<size_t>(s)];
    const DepParse& p = gold[static_cast<size_t>(s)];
    if (static_cast<int>(p.heads.size()) != len ||
        static_cast<int>(p.relations.size()) != len) {
      throw std::invalid_argument("gold parse and sentence differ in length");
    }
    Matrix targets = Matrix::Zero(len, (len + 1) * relations_);
    for (int t = 0; t < len; ++t) {
      const int head = p.heads[static_cast<size_t>(t)];
      const int rel = p.relations[static_cast<size_t>(t)];
      if (head == t + 1) throw std::invalid_argument("gold head is a self-loop");
      if (head < 0 || head > len) throw std::out_of_range("gold head out of range");
      if (rel < 0 || rel >= relations_) throw std::out_of_range("gold relation out of range");
      targets(t, candidate_column(head, rel, relations_)) = 1.0;
    }
    const std::vector<double> weights(static_cast<size_t>(len), per_token);
    total = add(total, soft_cross_entropy(scores(g, enc, ParseView::kPrimary, s),
                                          targets, weights));
  }
  return total;
}

Expr ParserHead::cvt_loss(Graph& g, std::span<const Matrix> teacher,
                          const EncoderOutput& student,
                          std::span<const ParseView> views,
                          std::span<const double> view_weights) const {
  const BatchLayout& layout = student.layout;
  if (static_cast<int>(teacher.size()) != layout.sentences()) {
    throw std::invalid_argument("one teacher matrix per sentence required");
  }
  if (!view_weights.empty() && view_weights.size() != views.size()) {
    throw std::invalid_argument("one weight per view required");
  }
  const double n = layout.sentences();
  Expr total = g.constant(Matrix::Zero(1, 1));
  for (size_t k = 0; k < views.size(); ++k) {
    if (views[k] == ParseView::kPrimary) {
      throw std::invalid_argument("the primary module is not a student");
    }
    const double vw = view_weights.empty() ? 1.0 : view_weights[k];
    for (int s = 0; s < layout.sentences(); ++s) {
      const int len = layout.lengths[static_cast<size_t>(s)];
      const std::vector<double> weights(static_cast<size_t>(len), vw / (len * n));
      total = add(total, kl_from_logits(teacher[static_cast<size_t>(s)],
                                        scores(g, student, views[k], s), weights));
    }
  }
  return total;
}

std::vector<Matrix> ParserHead::teacher(const EncoderOutput& enc) const {
  Graph& g = enc.h1.graph();
  std::vector<Matrix> out;
  for (int s = 0; s < enc.layout.sentences(); ++s) {
    out.push_back(probabilities(g, enc, ParseView::kPrimary, s));
  }
  return out;
}

std::vector<Parameter*> ParserHead::parameters(ParseView view) const {
  const Module& m = module(view);
  return {m.head_w, m.head_b, m.dep_w, m.dep_b, m.rel_w, m.shared, m.root};
}

DepParse parse_decode(const Matrix& probabilities, int relations) {
  const auto len = static_cast<int>(probabilities.rows());
  if (relations <= 0 || probabilities.cols() != (len + 1) * relations) {
    throw std::invalid_argument("parse_decode: unexpected probability shape");
  }
  DepParse out;
  for (int t = 0; t < len; ++t) {
    int best_head = -1, best_rel = -1;
    double best = -1.0;
    for (int u = 0; u <= len; ++u) {
      if (u == t + 1) continue;
      for (int r = 0; r < relations; ++r) {
        const double p = probabilities(t, candidate_column(u, r, relations));
        if (p > best) {
          best = p;
          best_head = u;
          best_rel = r;
        }
      }
    }
    out.heads.push_back(best_head);
    out.relations.push_back(best_rel);
  }
  return out;
}

bool has_cycle(const DepParse& parse) {
  const int n = static_cast<int>(parse.heads.size());
  for (int h : parse.heads) {
    if (h < 0 || h > n) throw std::out_of_range("head index out of range");
  }
  // Any walk that has not reached ROOT after n steps has entered a cycle.
  for (int start = 1; start <= n; ++start) {
    int node = start;
    for (int steps = 0; steps < n && node != 0; ++steps) {
      node = parse.heads[static_cast<size_t>(node - 1)];
    }
    if (node != 0) return true;
  }
  return false;
}

AttachmentScores uas_las(const DepParse& predicted, const DepParse& gold,
                         std::span<const char> punctuation) {
  const DepParse preds[] = {predicted};
  const DepParse golds[] = {gold};
  const std::vector<char> punct(punctuation.begin(), punctuation.end());
  const std::vector<char> puncts[] = {punct};
  return uas_las(preds, golds, puncts);
}

AttachmentScores uas_las(std::span<const DepParse> predicted,
                         std::span<const DepParse> gold,
                         std::span<const std::vector<char>> punctuation) {
  if (predicted.size() != gold.size() || punctuation.size() != gold.size()) {
    throw std::invalid_argument("uas_las: sentence counts differ");
  }
  int scored = 0, heads = 0, labeled = 0;
  for (size_t s = 0; s < gold.size(); ++s) {
    const size_t len = gold[s].heads.size();
    if (predicted[s].heads.size() != len || punctuation[s].size() != len) {
      throw std::invalid_argument("uas_las: sentence lengths differ");
    }
    for (size_t t = 0; t < len; ++t) {
      if (punctuation[s][t]) continue;
      ++scored;
      if (predicted[s].heads[t] == gold[s].heads[t]) {
        ++heads;
        if (predicted[s].relations[t] == gold[s].relations[t]) ++labeled;
      }
    }
  }
  AttachmentScores out;
  out.scored = scored;
  if (scored > 0) {
    out.uas = 100.0 * heads / scored;
    out.las = 100.0 * labeled / scored;
  }
  return out;
}

}  // namespace cvt
