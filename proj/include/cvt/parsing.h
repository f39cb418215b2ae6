#ifndef CVT_PARSING_H_
#define CVT_PARSING_H_

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cvt/encoder.h"
#include "cvt/graph.h"

namespace cvt {

// heads[t] is 0 for ROOT or the 1-based index of the head word.
struct DepParse {
  std::vector<int> heads;
  std::vector<int> relations;

  bool operator==(const DepParse&) const = default;
};

enum class ParseView { kPrimary, kFwdFwd, kFwdBwd, kBwdFwd, kBwdBwd };

inline constexpr std::array<ParseView, 4> kParseAuxViews = {
    ParseView::kFwdFwd, ParseView::kFwdBwd, ParseView::kBwdFwd, ParseView::kBwdBwd};

std::string_view parse_view_name(ParseView view);
ParseView parse_parse_view(std::string_view name);

// Graph-based parser: every dependent t picks one (head, relation) pair out of
// ROOT plus the other words, scored by
//   s(z1, z2, r) = mlp_head(z1) (W_r + W) mlp_dep(z2)
// and normalized jointly over all T * |R| candidates.
//
// Score matrices have one row per dependent and (T + 1) * |R| columns, column
// u * R + r for head u (0 = ROOT); self-loop columns carry kMaskedLogit.
class ParserHead {
 public:
  ParserHead(const std::string& name, const EncoderConfig& encoder, int mlp_size,
             int relations, ParameterStore& store, Rng& rng);

  // Head-side and dependent-side representations of a view, one row per token.
  static std::pair<Expr, Expr> view_inputs(const EncoderOutput& enc, ParseView view);

  Expr edge_score(Graph& g, Expr head, Expr dependent, int relation,
                  ParseView view = ParseView::kPrimary) const;
  Expr scores(Graph& g, const EncoderOutput& enc, ParseView view, int sentence) const;
  Matrix probabilities(Graph& g, const EncoderOutput& enc, ParseView view,
                       int sentence) const;

  // Mean cross-entropy of the gold (head, relation) of every token.
  Expr supervised_loss(Graph& g, const EncoderOutput& enc,
                       std::span<const DepParse> gold) const;
  // Sum over views of KL(teacher || view), averaged per sentence then batch.
  Expr cvt_loss(Graph& g, std::span<const Matrix> teacher,
                const EncoderOutput& student, std::span<const ParseView> views,
                std::span<const double> view_weights = {}) const;
  // Primary distributions per sentence.
  std::vector<Matrix> teacher(const EncoderOutput& enc) const;

  std::vector<Parameter*> parameters(ParseView view) const;
  int relations() const { return relations_; }
  const std::string& name() const { return name_; }

 private:
  struct Module {
    Parameter* head_w;
    Parameter* head_b;
    Parameter* dep_w;
    Parameter* dep_b;
    Parameter* rel_w;   // R stacked m x m blocks
    Parameter* shared;  // m x m
    Parameter* root;    // 1 x head-input
  };
  const Module& module(ParseView view) const;
  Expr score_rows(Graph& g, const Module& m, Expr heads, Expr deps) const;

  std::string name_;
  int relations_;
  int mlp_size_;
  std::array<Module, 5> modules_;
};

// Column index of (head, relation).
inline int candidate_column(int head, int relation, int relations) {
  return head * relations + relation;
}

// Per-dependent argmax; ties go to the lower head, then the lower relation.
// No tree constraint is imposed.
DepParse parse_decode(const Matrix& probabilities, int relations);
bool has_cycle(const DepParse& parse);

struct AttachmentScores {
  double uas = 0.0;  // percent
  double las = 0.0;  // percent
  int scored = 0;
};

// Scores non-punctuation tokens only.
AttachmentScores uas_las(const DepParse& predicted, const DepParse& gold,
                         std::span<const char> punctuation);
AttachmentScores uas_las(std::span<const DepParse> predicted,
                         std::span<const DepParse> gold,
                         std::span<const std::vector<char>> punctuation);

}  // namespace cvt

#endif  // CVT_PARSING_H_
