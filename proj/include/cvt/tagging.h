#ifndef CVT_TAGGING_H_
#define CVT_TAGGING_H_

#include <array>
#include <compare>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cvt/encoder.h"
#include "cvt/graph.h"

namespace cvt {

// ---- Labels and spans -------------------------------------------------------

enum class TagScheme { kPlain, kBioes };

class TagSet {
 public:
  explicit TagSet(TagScheme scheme = TagScheme::kPlain) : scheme_(scheme) {}

  int add(const std::string& label);
  // Throws std::out_of_range for unknown labels.
  int id(const std::string& label) const;
  bool contains(const std::string& label) const { return index_.count(label) > 0; }
  const std::string& label(int id) const;
  int size() const { return static_cast<int>(labels_.size()); }
  TagScheme scheme() const { return scheme_; }
  const std::vector<std::string>& labels() const { return labels_; }

 private:
  TagScheme scheme_;
  std::vector<std::string> labels_;
  std::unordered_map<std::string, int> index_;
};

// Inclusive token range with an entity type.
struct Span {
  int start = 0;
  int end = 0;
  std::string type;

  auto operator<=>(const Span&) const = default;
};

// Splits "B-PER" into ('B', "PER"); "O" and unprefixed labels give ('O', "").
std::pair<char, std::string> split_bioes(std::string_view label);

// Spans of a BIOES sequence. I/E without an open span of the same type start
// a new span; a B..I run without E closes at its last I.
std::vector<Span> bioes_decode(std::span<const std::string> tags);
std::vector<std::string> bioes_encode(std::span<const Span> spans, int length);
// BIO (IOB2; stray I- opens a span) to BIOES.
std::vector<std::string> bio_to_bioes(std::span<const std::string> tags);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Exact-match (start, end, type) scores; F1 is 0 when P + R = 0.
PrecisionRecall span_f1(std::span<const Span> predicted, std::span<const Span> gold);
PrecisionRecall span_f1(std::span<const std::vector<Span>> predicted,
                        std::span<const std::vector<Span>> gold);

// ---- Head -------------------------------------------------------------------

enum class TagView { kPrimary, kForward, kBackward, kFuture, kPast, kFullDropped };

inline constexpr std::array<TagView, 5> kTagAuxViews = {
    TagView::kForward, TagView::kBackward, TagView::kFuture, TagView::kPast,
    TagView::kFullDropped};

std::string_view tag_view_name(TagView view);
// Accepts fwd, bwd, future, past, full-dropped, primary.
TagView parse_tag_view(std::string_view name);

// A primary one-hidden-layer classifier on h1 ++ h2 plus one classifier per
// restricted view: softmax(U relu(W x) + b).
class TaggingHead {
 public:
  TaggingHead(const std::string& name, const EncoderConfig& encoder, int hidden,
              int classes, ParameterStore& store, Rng& rng);

  // Representation consumed by a view, one row per token.
  static Expr view_input(const EncoderOutput& enc, TagView view);
  Expr logits(Graph& g, const EncoderOutput& enc, TagView view) const;
  Expr probabilities(Graph& g, const EncoderOutput& enc, TagView view) const;

  // Mean over tokens of the cross-entropy against (1 - eps) onehot + eps/K.
  Expr supervised_loss(Graph& g, const EncoderOutput& enc,
                       std::span<const std::vector<int>> gold,
                       double label_smoothing) const;

  // Sum over views of KL(teacher || view), averaged over the tokens of each
  // sentence and over sentences. teacher has one row per token.
  Expr cvt_loss(Graph& g, const Matrix& teacher, const EncoderOutput& student,
                std::span<const TagView> views,
                std::span<const double> view_weights = {}) const;

  // Primary distribution with gradients cut, as a plain matrix.
  Matrix teacher(const EncoderOutput& enc) const;

  std::vector<Parameter*> parameters(TagView view) const;
  int classes() const { return classes_; }
  const std::string& name() const { return name_; }

 private:
  struct Module {
    Parameter* w;
    Parameter* u;
    Parameter* b;
  };
  const Module& module(TagView view) const;

  std::string name_;
  int classes_;
  std::array<Module, 6> modules_;
};

// Weights 1/(len * sentences) per token row.
std::vector<double> per_sentence_token_weights(const BatchLayout& layout);

}  // namespace cvt

#endif  // CVT_TAGGING_H_
