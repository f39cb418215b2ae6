#include "cvt/tagging.h"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace cvt {

int TagSet::add(const std::string& label) {
  auto it = index_.find(label);
  if (it != index_.end()) return it->second;
  if (scheme_ == TagScheme::kBioes) {
    auto [prefix, type] = split_bioes(label);
    if (label != "O" && (std::string("BIES").find(prefix) == std::string::npos ||
                         type.empty())) {
      throw std::invalid_argument("not a BIOES label: " + label);
    }
  }
  const int id = size();
  labels_.push_back(label);
  index_.emplace(label, id);
  return id;
}

int TagSet::id(const std::string& label) const {
  auto it = index_.find(label);
  if (it == index_.end()) throw std::out_of_range("unknown label: " + label);
  return it->second;
}

const std::string& TagSet::label(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("label id out of range");
  return labels_[static_cast<size_t>(id)];
}

std::pair<char, std::string> split_bioes(std::string_view label) {
  if (label.size() >= 2 && label[1] == '-' &&
      std::string_view("BIES").find(label[0]) != std::string_view::npos) {
    return {label[0], std::string(label.substr(2))};
  }
  return {'O', ""};
}

std::vector<Span> bioes_decode(std::span<const std::string> tags) {
  std::vector<Span> spans;
  int open_start = -1;
  std::string open_type;
  auto close = [&](int end) {
    if (open_start >= 0) spans.push_back({open_start, end, open_type});
    open_start = -1;
    open_type.clear();
  };
  for (int t = 0; t < static_cast<int>(tags.size()); ++t) {
    auto [prefix, type] = split_bioes(tags[static_cast<size_t>(t)]);
    switch (prefix) {
      case 'S':
        close(t - 1);
        spans.push_back({t, t, type});
        break;
      case 'B':
        close(t - 1);
        open_start = t;
        open_type = type;
        break;
      case 'I':
        if (open_start < 0 || open_type != type) {
          close(t - 1);
          open_start = t;
          open_type = type;
        }
        break;
      case 'E':
        if (open_start < 0 || open_type != type) {
          close(t - 1);
          open_start = t;
          open_type = type;
        }
        close(t);
        break;
      default:
        close(t - 1);
        break;
    }
  }
  close(static_cast<int>(tags.size()) - 1);
  return spans;
}

std::vector<std::string> bioes_encode(std::span<const Span> spans, int length) {
  std::vector<std::string> tags(static_cast<size_t>(length), "O");
  for (const Span& s : spans) {
    if (s.start < 0 || s.end >= length || s.start > s.end) {
      throw std::out_of_range("span outside the sentence");
    }
    if (s.start == s.end) {
      tags[static_cast<size_t>(s.start)] = "S-" + s.type;
      continue;
    }
    tags[static_cast<size_t>(s.start)] = "B-" + s.type;
    for (int t = s.start + 1; t < s.end; ++t) tags[static_cast<size_t>(t)] = "I-" + s.type;
    tags[static_cast<size_t>(s.end)] = "E-" + s.type;
  }
  return tags;
}

std::vector<std::string> bio_to_bioes(std::span<const std::string> tags) {
  std::vector<Span> spans;
  int open_start = -1;
  std::string open_type;
  auto close = [&](int end) {
    if (open_start >= 0) spans.push_back({open_start, end, open_type});
    open_start = -1;
  };
  for (int t = 0; t < static_cast<int>(tags.size()); ++t) {
    auto [prefix, type] = split_bioes(tags[static_cast<size_t>(t)]);
    if (prefix == 'B' || (prefix == 'I' && (open_start < 0 || open_type != type))) {
      close(t - 1);
      open_start = t;
      open_type = type;
    } else if (prefix != 'I') {
      close(t - 1);
    }
  }
  close(static_cast<int>(tags.size()) - 1);
  return bioes_encode(spans, static_cast<int>(tags.size()));
}

namespace {

PrecisionRecall from_counts(double correct, double predicted, double gold) {
  PrecisionRecall out;
  out.precision = predicted > 0 ? correct / predicted : 0.0;
  out.recall = gold > 0 ? correct / gold : 0.0;
  const double denom = out.precision + out.recall;
  out.f1 = denom > 0 ? 2.0 * out.precision * out.recall / denom : 0.0;
  return out;
}

size_t count_matches(std::span<const Span> predicted, std::span<const Span> gold) {
  std::multiset<Span> pool(gold.begin(), gold.end());
  size_t correct = 0;
  for (const Span& s : predicted) {
    auto it = pool.find(s);
    if (it != pool.end()) {
      pool.erase(it);
      ++correct;
    }
  }
  return correct;
}

}  // namespace

PrecisionRecall span_f1(std::span<const Span> predicted, std::span<const Span> gold) {
  return from_counts(static_cast<double>(count_matches(predicted, gold)),
                     static_cast<double>(predicted.size()),
                     static_cast<double>(gold.size()));
}

PrecisionRecall span_f1(std::span<const std::vector<Span>> predicted,
                        std::span<const std::vector<Span>> gold) {
  if (predicted.size() != gold.size()) {
    throw std::invalid_argument("span_f1: sentence counts differ");
  }
  double correct = 0, npred = 0, ngold = 0;
  for (size_t i = 0; i < gold.size(); ++i) {
    correct += static_cast<double>(count_matches(predicted[i], gold[i]));
    npred += static_cast<double>(predicted[i].size());
    ngold += static_cast<double>(gold[i].size());
  }
  return from_counts(correct, npred, ngold);
}

// ---- Head -------------------------------------------------------------------

std::string_view tag_view_name(TagView view) {
  switch (view) {
    case TagView::kPrimary: return "primary";
    case TagView::kForward: return "fwd";
    case TagView::kBackward: return "bwd";
    case TagView::kFuture: return "future";
    case TagView::kPast: return "past";
    case TagView::kFullDropped: return "full-dropped";
  }
  return "?";
}

TagView parse_tag_view(std::string_view name) {
  for (TagView v : {TagView::kPrimary, TagView::kForward, TagView::kBackward,
                    TagView::kFuture, TagView::kPast, TagView::kFullDropped}) {
    if (tag_view_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown tagging view: " + std::string(name));
}

TaggingHead::TaggingHead(const std::string& name, const EncoderConfig& encoder,
                         int hidden, int classes, ParameterStore& store, Rng& rng)
    : name_(name), classes_(classes) {
  if (hidden <= 0 || classes <= 0) {
    throw std::invalid_argument("tagging head sizes must be positive");
  }
  const int full = 2 * encoder.direction_dim(1) + 2 * encoder.direction_dim(2);
  const int half = encoder.direction_dim(1);
  for (TagView v : {TagView::kPrimary, TagView::kForward, TagView::kBackward,
                    TagView::kFuture, TagView::kPast, TagView::kFullDropped}) {
    const bool wide = v == TagView::kPrimary || v == TagView::kFullDropped;
    const std::string prefix = name + "/" + std::string(tag_view_name(v)) + "/";
    Module m;
    m.w = &store.create(prefix + "W", wide ? full : half, hidden, Init::kGlorot, rng);
    m.u = &store.create(prefix + "U", hidden, classes, Init::kGlorot, rng);
    m.b = &store.create(prefix + "b", 1, classes, Init::kZero, rng);
    modules_[static_cast<size_t>(v)] = m;
  }
}

const TaggingHead::Module& TaggingHead::module(TagView view) const {
  const auto i = static_cast<size_t>(view);
  if (i >= modules_.size()) throw std::invalid_argument("unknown tagging view");
  return modules_[i];
}

Expr TaggingHead::view_input(const EncoderOutput& enc, TagView view) {
  switch (view) {
    case TagView::kPrimary:
    case TagView::kFullDropped:
      return concat_cols({enc.h1, enc.h2});
    case TagView::kForward: return enc.h1fwd;
    case TagView::kBackward: return enc.h1bwd;
    case TagView::kFuture: return enc.h1fwd_prev;
    case TagView::kPast: return enc.h1bwd_next;
  }
  throw std::invalid_argument("unknown tagging view");
}

Expr TaggingHead::logits(Graph& g, const EncoderOutput& enc, TagView view) const {
  const Module& m = module(view);
  Expr hidden = relu(matmul(view_input(enc, view), g.param(*m.w)));
  return add(matmul(hidden, g.param(*m.u)), g.param(*m.b));
}

Expr TaggingHead::probabilities(Graph& g, const EncoderOutput& enc,
                                TagView view) const {
  return softmax(logits(g, enc, view));
}

Expr TaggingHead::supervised_loss(Graph& g, const EncoderOutput& enc,
                                  std::span<const std::vector<int>> gold,
                                  double label_smoothing) const {
  const BatchLayout& layout = enc.layout;
  if (static_cast<int>(gold.size()) != layout.sentences()) {
    throw std::invalid_argument("gold sentence count does not match the batch");
  }
  std::vector<int> flat;
  for (size_t s = 0; s < gold.size(); ++s) {
    if (static_cast<int>(gold[s].size()) != layout.lengths[s]) {
      throw std::invalid_argument("gold tags and tokens differ in length");
    }
    flat.insert(flat.end(), gold[s].begin(), gold[s].end());
  }
  const Matrix targets = smoothed_targets(flat, classes_, label_smoothing);
  const std::vector<double> weights(flat.size(), 1.0 / static_cast<double>(flat.size()));
  return soft_cross_entropy(logits(g, enc, TagView::kPrimary), targets, weights);
}

std::vector<double> per_sentence_token_weights(const BatchLayout& layout) {
  std::vector<double> weights;
  weights.reserve(static_cast<size_t>(layout.tokens));
  const double n = layout.sentences();
  for (int len : layout.lengths) {
    for (int t = 0; t < len; ++t) weights.push_back(1.0 / (len * n));
  }
  return weights;
}

Expr TaggingHead::cvt_loss(Graph& g, const Matrix& teacher,
                           const EncoderOutput& student,
                           std::span<const TagView> views,
                           std::span<const double> view_weights) const {
  if (!view_weights.empty() && view_weights.size() != views.size()) {
    throw std::invalid_argument("one weight per view required");
  }
  const std::vector<double> weights = per_sentence_token_weights(student.layout);
  Expr total = g.constant(Matrix::Zero(1, 1));
  for (size_t k = 0; k < views.size(); ++k) {
    if (views[k] == TagView::kPrimary) {
      throw std::invalid_argument("the primary module is not a student");
    }
    Expr term = kl_from_logits(teacher, logits(g, student, views[k]), weights);
    if (!view_weights.empty()) term = scale(term, view_weights[k]);
    total = add(total, term);
  }
  return total;
}

Matrix TaggingHead::teacher(const EncoderOutput& enc) const {
  Graph& g = enc.h1.graph();
  return softmax(logits(g, enc, TagView::kPrimary)).value();
}

std::vector<Parameter*> TaggingHead::parameters(TagView view) const {
  const Module& m = module(view);
  return {m.w, m.u, m.b};
}

}  // namespace cvt
