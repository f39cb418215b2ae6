#include "cvt/trainer.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <stdexcept>

#include "json.hpp"

namespace cvt {

// ---- Optimization -------------------------------------------------------------

double LrSchedule::operator()(int64_t t) const {
  if (t < 0) throw std::invalid_argument("negative step");
  return base / (1.0 + decay * std::sqrt(static_cast<double>(t)));
}

double lr(int64_t t) { return LrSchedule{}(t); }

void round_to_float(Matrix& m) { m = m.cast<float>().cast<double>(); }

SgdMomentum::SgdMomentum(ParameterStore& store, double momentum, LrSchedule schedule,
                         Precision precision)
    : store_(store), mu_(momentum), schedule_(schedule), precision_(precision) {}

Matrix& SgdMomentum::momentum(const Parameter& p) {
  auto it = momentum_.find(&p);
  if (it == momentum_.end()) {
    it = momentum_.emplace(&p, Matrix::Zero(p.value.rows(), p.value.cols())).first;
  }
  return it->second;
}

void SgdMomentum::step() {
  const double rate = schedule_(t_);
  for (Parameter* p : store_.parameters()) {
    if (p->frozen) continue;
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) {
      throw std::invalid_argument("gradient shape mismatch for " + p->name);
    }
    Matrix& m = momentum(*p);
    m = mu_ * m + p->grad;
    p->value -= rate * m;
    if (precision_ == Precision::kFloat32) {
      round_to_float(m);
      round_to_float(p->value);
    }
  }
  ++t_;
}

double clip_global_norm(ParameterStore& store, double max_norm) {
  double squared = 0.0;
  for (Parameter* p : store.parameters()) {
    if (!p->frozen) squared += p->grad.squaredNorm();
  }
  const double norm = std::sqrt(squared);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (Parameter* p : store.parameters()) {
      if (!p->frozen) p->grad *= factor;
    }
  }
  return norm;
}

Ema::Ema(ParameterStore& store, double decay, Precision precision)
    : store_(store), decay_(decay), precision_(precision) {
  if (decay < 0.0 || decay > 1.0) throw std::invalid_argument("EMA decay must be in [0, 1]");
  for (Parameter* p : store.parameters()) shadow_.emplace(p, p->value);
}

Matrix& Ema::shadow(const Parameter& p) {
  auto it = shadow_.find(&p);
  if (it == shadow_.end()) it = shadow_.emplace(&p, p.value).first;
  return it->second;
}

void Ema::update() {
  for (Parameter* p : store_.parameters()) {
    Matrix& s = shadow(*p);
    s += (1.0 - decay_) * (p->value - s);
    if (precision_ == Precision::kFloat32) round_to_float(s);
  }
}

void Ema::swap() {
  for (Parameter* p : store_.parameters()) p->value.swap(shadow(*p));
}

// ---- Checkpoints ----------------------------------------------------------------

namespace {

void put_u32(std::ostream& out, uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
    throw std::runtime_error("truncated checkpoint");
  }
  return static_cast<uint32_t>(bytes[0]) | static_cast<uint32_t>(bytes[1]) << 8 |
         static_cast<uint32_t>(bytes[2]) << 16 | static_cast<uint32_t>(bytes[3]) << 24;
}

}  // namespace

void write_checkpoint(std::ostream& out, std::span<const NamedTensor> tensors) {
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    put_u32(out, static_cast<uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(out, 2);
    put_u32(out, static_cast<uint32_t>(t.value.rows()));
    put_u32(out, static_cast<uint32_t>(t.value.cols()));
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(t.value.data()[i])));
    }
  }
  if (!out) throw std::runtime_error("failed to write checkpoint");
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  const uint32_t version = get_u32(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const uint32_t count = get_u32(in);
  std::vector<NamedTensor> out;
  for (uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name.resize(get_u32(in));
    if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) {
      throw std::runtime_error("truncated checkpoint");
    }
    const uint32_t rank = get_u32(in);
    if (rank == 0 || rank > 2) throw std::runtime_error("unsupported tensor rank in checkpoint");
    std::vector<uint32_t> dims;
    for (uint32_t r = 0; r < rank; ++r) dims.push_back(get_u32(in));
    t.value.resize(dims[0], rank == 2 ? dims[1] : 1);
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      t.value.data()[i] = static_cast<double>(std::bit_cast<float>(get_u32(in)));
    }
    out.push_back(std::move(t));
  }
  return out;
}

// ---- Metric log -----------------------------------------------------------------

void MetricLog::add(MetricRecord record) {
  if (sink_ != nullptr) *sink_ << to_json_line(record) << '\n' << std::flush;
  records_.push_back(std::move(record));
}

std::string MetricLog::to_json_line(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["task"] = r.task;
  j["split"] = r.split;
  j["metric"] = r.metric;
  j["value"] = r.value;
  return j.dump();
}

void MetricLog::write(std::ostream& out) const {
  for (const MetricRecord& r : records_) out << to_json_line(r) << '\n';
}

std::vector<MetricRecord> MetricLog::read(std::istream& in) {
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("step").get<int64_t>(), j.at("task").get<std::string>(),
                   j.at("split").get<std::string>(), j.at("metric").get<std::string>(),
                   j.at("value").get<double>()});
  }
  return out;
}

// ---- Tasks ------------------------------------------------------------------------

namespace {

constexpr int kEvalBatch = 128;
constexpr std::array<Split, 3> kSplits = {Split::kTrain, Split::kDev, Split::kTest};

std::vector<TokenizedSentence> encode_all(const Vocabulary& vocab,
                                          const std::vector<Example>& examples) {
  std::vector<TokenizedSentence> out;
  out.reserve(examples.size());
  for (const Example& e : examples) {
    if (e.words.empty()) throw std::invalid_argument("empty sentence in corpus");
    out.push_back(vocab.encode(e.words));
  }
  return out;
}

template <typename Fn>
void for_each_batch(int n, Fn&& fn) {
  for (int begin = 0; begin < n; begin += kEvalBatch) {
    fn(begin, std::min(n, begin + kEvalBatch));
  }
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    m.row(r).maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

Expr zero_loss(Graph& g) { return g.constant(Matrix::Zero(1, 1)); }

template <typename View, size_t N>
std::vector<View> remove_views(const std::vector<View>& current,
                               std::span<const std::string> names,
                               std::string_view (*name_of)(View),
                               const std::array<View, N>& all) {
  for (const std::string& n : names) {
    bool known = false;
    for (View v : all) known = known || name_of(v) == n;
    if (!known) throw std::invalid_argument("unknown view to ablate: " + n);
  }
  std::vector<View> out;
  for (View v : current) {
    if (std::find(names.begin(), names.end(), std::string(name_of(v))) == names.end()) {
      out.push_back(v);
    }
  }
  return out;
}

}  // namespace

const std::vector<TokenizedSentence>& Task::inputs(Split s) const {
  return inputs_[static_cast<size_t>(s)];
}

double default_vat_epsilon(TaskKind kind, std::string_view task_name) {
  std::string lower(task_name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower.find("ccg") != std::string::npos) return 1.5;
  if (kind == TaskKind::kParsing) return 1.0;
  return 0.5;
}

// Tagging.

namespace {

TagSet build_tagset(const LabeledCorpus& corpus, TagScheme scheme) {
  TagSet tags(scheme);
  for (Split s : kSplits) {
    for (const Example& e : corpus.split(s)) {
      for (const std::string& t : e.tags) tags.add(t);
    }
  }
  if (tags.size() == 0) throw std::invalid_argument("tagging corpus has no labels");
  return tags;
}

}  // namespace

TaggingTask::TaggingTask(std::string name, const LabeledCorpus& corpus, TagScheme scheme,
                         const Vocabulary& vocab, const EncoderConfig& encoder,
                         const HeadConfig& head, ParameterStore& store, Rng& rng)
    : Task(name, TaskKind::kTagging),
      tags_(build_tagset(corpus, scheme)),
      head_(name, encoder, head.tagging_hidden, tags_.size(), store, rng),
      views_(kTagAuxViews.begin(), kTagAuxViews.end()),
      label_smoothing_(head.label_smoothing) {
  vat_epsilon = default_vat_epsilon(TaskKind::kTagging, name);
  for (Split s : kSplits) {
    const auto& examples = corpus.split(s);
    inputs_[static_cast<size_t>(s)] = encode_all(vocab, examples);
    auto& gold = gold_[static_cast<size_t>(s)];
    for (const Example& e : examples) {
      if (e.tags.size() != e.words.size()) {
        throw std::invalid_argument("tags and words differ in length");
      }
      std::vector<int> ids;
      for (const std::string& t : e.tags) ids.push_back(tags_.id(t));
      gold.push_back(std::move(ids));
    }
  }
}

Expr TaggingTask::supervised_loss(Graph& g, const EncoderOutput& enc,
                                  std::span<const int> indices) const {
  std::vector<std::vector<int>> gold;
  for (int i : indices) gold.push_back(gold_[0].at(static_cast<size_t>(i)));
  return head_.supervised_loss(g, enc, gold, label_smoothing_);
}

TeacherTargets TaggingTask::teacher(const EncoderOutput& clean) const {
  return head_.teacher(clean);
}

Expr TaggingTask::cvt_loss(Graph& g, const TeacherTargets& targets,
                           const EncoderOutput& student, Rng&) const {
  if (views_.empty()) return zero_loss(g);
  return head_.cvt_loss(g, std::get<Matrix>(targets), student, views_);
}

Expr TaggingTask::consistency_loss(Graph& g, const TeacherTargets& targets,
                                   const EncoderOutput& student, Rng&) const {
  return kl_from_logits(std::get<Matrix>(targets),
                        head_.logits(g, student, TagView::kPrimary),
                        per_sentence_token_weights(student.layout));
}

std::vector<Metric> TaggingTask::evaluate(const Encoder& encoder, Split split) const {
  const auto& inputs = this->inputs(split);
  const auto& gold = gold_[static_cast<size_t>(split)];
  int64_t correct = 0, total = 0;
  std::vector<std::vector<Span>> predicted_spans, gold_spans;
  for_each_batch(static_cast<int>(inputs.size()), [&](int begin, int end) {
    Graph g(false);
    std::span<const TokenizedSentence> batch(inputs.data() + begin, inputs.data() + end);
    EncoderOutput enc = encoder.run(g, batch, {});
    const std::vector<int> best =
        argmax_rows(head_.logits(g, enc, TagView::kPrimary).value());
    for (int s = begin; s < end; ++s) {
      const auto& y = gold[static_cast<size_t>(s)];
      std::vector<std::string> pred_labels, gold_labels;
      for (size_t t = 0; t < y.size(); ++t) {
        const int p = best[static_cast<size_t>(enc.layout.row(s - begin, static_cast<int>(t)))];
        correct += p == y[t];
        ++total;
        if (tags_.scheme() == TagScheme::kBioes) {
          pred_labels.push_back(tags_.label(p));
          gold_labels.push_back(tags_.label(y[t]));
        }
      }
      if (tags_.scheme() == TagScheme::kBioes) {
        predicted_spans.push_back(bioes_decode(pred_labels));
        gold_spans.push_back(bioes_decode(gold_labels));
      }
    }
  });
  const double accuracy = total > 0 ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  if (tags_.scheme() == TagScheme::kBioes) {
    const PrecisionRecall pr = span_f1(predicted_spans, gold_spans);
    return {{"f1", 100.0 * pr.f1}, {"precision", 100.0 * pr.precision},
            {"recall", 100.0 * pr.recall}, {"accuracy", accuracy}};
  }
  return {{"accuracy", accuracy}};
}

std::vector<Parameter*> TaggingTask::primary_parameters() const {
  return head_.parameters(TagView::kPrimary);
}

std::vector<Parameter*> TaggingTask::parameters() const {
  std::vector<Parameter*> out = head_.parameters(TagView::kPrimary);
  for (TagView v : kTagAuxViews) {
    for (Parameter* p : head_.parameters(v)) out.push_back(p);
  }
  return out;
}

std::vector<std::string> TaggingTask::views() const {
  std::vector<std::string> out;
  for (TagView v : views_) out.emplace_back(tag_view_name(v));
  return out;
}

void TaggingTask::ablate(std::span<const std::string> names) {
  views_ = remove_views(views_, names, &tag_view_name, kTagAuxViews);
}

// Parsing.

namespace {

TagSet build_relations(const LabeledCorpus& corpus) {
  TagSet rels(TagScheme::kPlain);
  for (Split s : kSplits) {
    for (const Example& e : corpus.split(s)) {
      for (const std::string& r : e.relations) rels.add(r);
    }
  }
  if (rels.size() == 0) throw std::invalid_argument("parsing corpus has no relations");
  return rels;
}

}  // namespace

ParsingTask::ParsingTask(std::string name, const LabeledCorpus& corpus,
                         const Vocabulary& vocab, const EncoderConfig& encoder,
                         const HeadConfig& head, ParameterStore& store, Rng& rng)
    : Task(name, TaskKind::kParsing),
      relations_(build_relations(corpus)),
      head_(name, encoder, head.parser_mlp, relations_.size(), store, rng),
      views_(kParseAuxViews.begin(), kParseAuxViews.end()) {
  vat_epsilon = default_vat_epsilon(TaskKind::kParsing, name);
  for (Split s : kSplits) {
    const auto& examples = corpus.split(s);
    inputs_[static_cast<size_t>(s)] = encode_all(vocab, examples);
    for (const Example& e : examples) {
      if (e.heads.size() != e.words.size() || e.relations.size() != e.words.size()) {
        throw std::invalid_argument("parse and words differ in length");
      }
      DepParse p;
      p.heads = e.heads;
      for (const std::string& r : e.relations) p.relations.push_back(relations_.id(r));
      gold_[static_cast<size_t>(s)].push_back(std::move(p));
      std::vector<char> punct = e.punctuation;
      punct.resize(e.words.size(), 0);
      punctuation_[static_cast<size_t>(s)].push_back(std::move(punct));
    }
  }
}

Expr ParsingTask::supervised_loss(Graph& g, const EncoderOutput& enc,
                                  std::span<const int> indices) const {
  std::vector<DepParse> gold;
  for (int i : indices) gold.push_back(gold_[0].at(static_cast<size_t>(i)));
  return head_.supervised_loss(g, enc, gold);
}

TeacherTargets ParsingTask::teacher(const EncoderOutput& clean) const {
  return head_.teacher(clean);
}

Expr ParsingTask::cvt_loss(Graph& g, const TeacherTargets& targets,
                           const EncoderOutput& student, Rng&) const {
  if (views_.empty()) return zero_loss(g);
  return head_.cvt_loss(g, std::get<std::vector<Matrix>>(targets), student, views_);
}

Expr ParsingTask::consistency_loss(Graph& g, const TeacherTargets& targets,
                                   const EncoderOutput& student, Rng&) const {
  const auto& teacher = std::get<std::vector<Matrix>>(targets);
  const double n = student.layout.sentences();
  Expr total = zero_loss(g);
  for (int s = 0; s < student.layout.sentences(); ++s) {
    const int len = student.layout.lengths[static_cast<size_t>(s)];
    const std::vector<double> w(static_cast<size_t>(len), 1.0 / (len * n));
    total = add(total, kl_from_logits(teacher[static_cast<size_t>(s)],
                                      head_.scores(g, student, ParseView::kPrimary, s), w));
  }
  return total;
}

std::vector<Metric> ParsingTask::evaluate(const Encoder& encoder, Split split) const {
  const auto& inputs = this->inputs(split);
  std::vector<DepParse> predicted;
  int cycles = 0;
  for_each_batch(static_cast<int>(inputs.size()), [&](int begin, int end) {
    Graph g(false);
    std::span<const TokenizedSentence> batch(inputs.data() + begin, inputs.data() + end);
    EncoderOutput enc = encoder.run(g, batch, {});
    for (int s = 0; s < end - begin; ++s) {
      DepParse p = parse_decode(head_.probabilities(g, enc, ParseView::kPrimary, s),
                                relations_.size());
      cycles += has_cycle(p) ? 1 : 0;
      predicted.push_back(std::move(p));
    }
  });
  const AttachmentScores scores =
      uas_las(predicted, gold_[static_cast<size_t>(split)], punctuation_[static_cast<size_t>(split)]);
  const double cycle_rate =
      inputs.empty() ? 0.0 : 100.0 * cycles / static_cast<double>(inputs.size());
  return {{"uas", scores.uas}, {"las", scores.las}, {"cyclic_sentences", cycle_rate}};
}

std::vector<Parameter*> ParsingTask::primary_parameters() const {
  return head_.parameters(ParseView::kPrimary);
}

std::vector<Parameter*> ParsingTask::parameters() const {
  std::vector<Parameter*> out = head_.parameters(ParseView::kPrimary);
  for (ParseView v : kParseAuxViews) {
    for (Parameter* p : head_.parameters(v)) out.push_back(p);
  }
  return out;
}

std::vector<std::string> ParsingTask::views() const {
  std::vector<std::string> out;
  for (ParseView v : views_) out.emplace_back(parse_view_name(v));
  return out;
}

void ParsingTask::ablate(std::span<const std::string> names) {
  views_ = remove_views(views_, names, &parse_view_name, kParseAuxViews);
}

// Sequence transduction.

namespace {

Vocabulary build_target_vocab(const LabeledCorpus& corpus, int unk_threshold) {
  std::vector<Tokens> targets;
  for (const Example& e : corpus.train) targets.push_back(e.target);
  const std::vector<std::vector<Tokens>> corpora = {targets};
  return build_vocab(corpora, 1, unk_threshold, true);
}

Seq2SeqConfig with_vocab(Seq2SeqConfig config, const Vocabulary& target) {
  config.target_vocab = target.size();
  config.bos = Vocabulary::kBos;
  config.eos = Vocabulary::kEos;
  return config;
}

}  // namespace

Seq2SeqTask::Seq2SeqTask(std::string name, const LabeledCorpus& corpus,
                         const Vocabulary& vocab, const EncoderConfig& encoder,
                         const HeadConfig& head, ParameterStore& store, Rng& rng)
    : Task(name, TaskKind::kSeq2Seq),
      target_vocab_(build_target_vocab(corpus, head.target_unk_threshold)),
      head_(std::make_unique<Seq2SeqHead>(name, encoder, with_vocab(head.seq2seq, target_vocab_),
                                          store, rng)),
      views_(kDecoderAuxKinds.begin(), kDecoderAuxKinds.end()) {
  vat_epsilon = default_vat_epsilon(TaskKind::kSeq2Seq, name);
  for (Split s : kSplits) {
    const auto& examples = corpus.split(s);
    inputs_[static_cast<size_t>(s)] = encode_all(vocab, examples);
    for (const Example& e : examples) {
      gold_[static_cast<size_t>(s)].push_back(target_vocab_.encode_ids(e.target));
    }
  }
  for (Split s : kSplits) {
    for (const Example& e : corpus.split(s)) gold_text_[static_cast<size_t>(s)].push_back(e.target);
  }
}

Expr Seq2SeqTask::supervised_loss(Graph& g, const EncoderOutput& enc,
                                  std::span<const int> indices) const {
  std::vector<std::vector<int>> gold;
  for (int i : indices) gold.push_back(gold_[0].at(static_cast<size_t>(i)));
  return head_->supervised_loss(g, enc, gold);
}

TeacherTargets Seq2SeqTask::teacher(const EncoderOutput& clean) const {
  return head_->teacher(clean);
}

Expr Seq2SeqTask::cvt_loss(Graph& g, const TeacherTargets& targets,
                           const EncoderOutput& student, Rng& rng) const {
  if (views_.empty()) return zero_loss(g);
  return head_->cvt_loss(g, std::get<std::vector<std::vector<int>>>(targets), student,
                         views_, rng);
}

Expr Seq2SeqTask::consistency_loss(Graph& g, const TeacherTargets& targets,
                                   const EncoderOutput& student, Rng&) const {
  const auto& beams = std::get<std::vector<std::vector<int>>>(targets);
  const Seq2SeqConfig& cfg = head_->config();
  int used = 0;
  for (const auto& b : beams) used += b.empty() ? 0 : 1;
  Expr total = zero_loss(g);
  for (int s = 0; s < student.layout.sentences(); ++s) {
    const auto& beam = beams[static_cast<size_t>(s)];
    if (beam.empty()) continue;
    std::vector<int> full = beam;
    full.push_back(cfg.eos);
    const std::vector<double> w(full.size(), 1.0 / (static_cast<double>(full.size()) * used));
    Expr logits = head_->teacher_forced_logits(g, Seq2SeqHead::source_states(student, s), beam,
                                               DecoderKind::kPrimary);
    total = add(total, soft_cross_entropy(
                           logits, smoothed_targets(full, cfg.target_vocab, cfg.label_smoothing), w));
  }
  return total;
}

std::vector<Metric> Seq2SeqTask::evaluate(const Encoder& encoder, Split split) const {
  const auto& inputs = this->inputs(split);
  const auto& gold_text = gold_text_[static_cast<size_t>(split)];
  // Compare surface strings so gold tokens are never folded into UNK.
  std::map<std::string, int> ids;
  auto intern = [&ids](const Tokens& tokens) {
    std::vector<int> out;
    for (const std::string& t : tokens) out.push_back(ids.emplace(t, static_cast<int>(ids.size())).first->second);
    return out;
  };
  std::vector<std::vector<int>> hyps, refs;
  for_each_batch(static_cast<int>(inputs.size()), [&](int begin, int end) {
    Graph g(false);
    std::span<const TokenizedSentence> batch(inputs.data() + begin, inputs.data() + end);
    EncoderOutput enc = encoder.run(g, batch, {});
    const auto beams = head_->teacher(enc);
    for (int s = begin; s < end; ++s) {
      Tokens words;
      for (int id : beams[static_cast<size_t>(s - begin)]) words.push_back(target_vocab_.token(id));
      hyps.push_back(intern(words));
      refs.push_back(intern(gold_text[static_cast<size_t>(s)]));
    }
  });
  return {{"exact_match", exact_match(hyps, refs)}, {"bleu", bleu(hyps, refs)}};
}

std::vector<Parameter*> Seq2SeqTask::primary_parameters() const {
  return head_->parameters(DecoderKind::kPrimary);
}

std::vector<Parameter*> Seq2SeqTask::parameters() const {
  std::vector<Parameter*> out = head_->shared_parameters();
  for (DecoderKind k : {DecoderKind::kPrimary, DecoderKind::kAttentionDropout,
                        DecoderKind::kFuture}) {
    for (Parameter* p : head_->parameters(k)) out.push_back(p);
  }
  return out;
}

std::vector<std::string> Seq2SeqTask::views() const {
  std::vector<std::string> out;
  for (DecoderKind k : views_) out.emplace_back(decoder_kind_name(k));
  return out;
}

void Seq2SeqTask::ablate(std::span<const std::string> names) {
  views_ = remove_views(views_, names, &decoder_kind_name, kDecoderAuxKinds);
}

Task& Model::task(std::string_view name) {
  for (auto& t : tasks) {
    if (t->name() == name) return *t;
  }
  throw std::invalid_argument("unknown task: " + std::string(name));
}

// ---- Modes ------------------------------------------------------------------------

std::string_view cvt_mode_name(CvtMode mode) {
  switch (mode) {
    case CvtMode::kOn: return "on";
    case CvtMode::kOff: return "off";
    case CvtMode::kOneAtATime: return "one-at-a-time";
  }
  return "?";
}

CvtMode parse_cvt_mode(std::string_view name) {
  for (CvtMode m : {CvtMode::kOn, CvtMode::kOff, CvtMode::kOneAtATime}) {
    if (cvt_mode_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown CVT mode: " + std::string(name));
}

std::string_view baseline_name(Baseline baseline) {
  switch (baseline) {
    case Baseline::kNone: return "none";
    case Baseline::kWordDropout: return "word-dropout";
    case Baseline::kVat: return "vat";
  }
  return "?";
}

Baseline parse_baseline(std::string_view name) {
  for (Baseline b : {Baseline::kNone, Baseline::kWordDropout, Baseline::kVat}) {
    if (baseline_name(b) == name) return b;
  }
  throw std::invalid_argument("unknown baseline: " + std::string(name));
}

// ---- Baselines --------------------------------------------------------------------

std::vector<TokenizedSentence> word_dropout_view(std::span<const TokenizedSentence> batch,
                                                 double rate, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("word dropout rate must be in [0, 1]");
  std::vector<TokenizedSentence> out(batch.begin(), batch.end());
  for (TokenizedSentence& s : out) {
    for (size_t t = 0; t < s.words.size(); ++t) {
      if (rng.bernoulli(rate)) {
        s.words[t] = Vocabulary::kRemoved;
        if (t < s.chars.size()) s.chars[t] = {Vocabulary::kCharUnk};
      }
    }
  }
  return out;
}

Matrix vat_perturbation(const Matrix& v, const BatchLayout& layout, double epsilon, Rng& rng,
                        const std::function<Expr(Graph&, Expr)>& divergence) {
  if (epsilon < 0.0) throw std::invalid_argument("VAT norm must be nonnegative");
  Matrix probe(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = rng.normal();
  for (int s = 0; s < layout.sentences(); ++s) {
    auto block = probe.middleRows(layout.offsets[static_cast<size_t>(s)],
                                  layout.lengths[static_cast<size_t>(s)]);
    const double norm = block.norm();
    if (norm > 0.0) block /= norm;
  }
  Matrix direction = Matrix::Zero(v.rows(), v.cols());
  if (epsilon > 0.0) {
    Graph g;
    Expr d = g.input(probe);
    Expr loss = divergence(g, add(g.constant(v), d));
    g.backward(loss);
    if (g.grad(d).size() != 0) direction = g.grad(d);
  }
  Matrix r(v.rows(), v.cols());
  for (int s = 0; s < layout.sentences(); ++s) {
    const int offset = layout.offsets[static_cast<size_t>(s)];
    const int len = layout.lengths[static_cast<size_t>(s)];
    auto grad = direction.middleRows(offset, len);
    const double norm = grad.norm();
    if (norm > 0.0 && std::isfinite(norm)) {
      r.middleRows(offset, len) = epsilon * grad / norm;
    } else {
      r.middleRows(offset, len) = epsilon * probe.middleRows(offset, len);
    }
  }
  return r;
}

// ---- Trainer ----------------------------------------------------------------------

namespace {

enum Stream : uint64_t {
  kTaskChoice = 0x7a5c,
  kEncoderDropout = 0xe4c0,
  kTaskNoise = 0x7a40,
  kWordDropoutNoise = 0xd40f,
  kVatProbe = 0x7a7,
  kLabeledOrder = 0x1abe,
  kUnlabeledOrder = 0x0171,
};

// Float32 storage starts from representable values so checkpoints are exact.
ParameterStore& rounded(ParameterStore& store, Precision precision) {
  if (precision == Precision::kFloat32) {
    for (Parameter* p : store.parameters()) round_to_float(p->value);
  }
  return store;
}

uint64_t stream(uint64_t seed, int64_t t, uint64_t kind) {
  return mix_seed(mix_seed(seed, static_cast<uint64_t>(t)), kind);
}

// Batch `draw` of consecutive epochs, each a fresh permutation of n items.
std::vector<int> epoch_batch(int n, int batch_size, uint64_t seed, int64_t draw) {
  if (n <= 0) throw std::invalid_argument("cannot draw a batch from an empty dataset");
  const int b = std::min(batch_size, n);
  const int64_t per_epoch = (n + b - 1) / b;
  const int64_t epoch = draw / per_epoch;
  const int64_t k = draw % per_epoch;
  const std::vector<int> order = permutation(n, mix_seed(seed, static_cast<uint64_t>(epoch)));
  const auto begin = static_cast<size_t>(k * b);
  const size_t end = std::min(begin + static_cast<size_t>(b), static_cast<size_t>(n));
  return {order.begin() + static_cast<long>(begin), order.begin() + static_cast<long>(end)};
}

}  // namespace

Trainer::Trainer(Model& model, TrainerConfig config, const UnlabeledPool& pool)
    : model_(model),
      config_(std::move(config)),
      optimizer_(model.store, config_.momentum, config_.schedule, config_.precision),
      ema_(rounded(model.store, config_.precision), config_.ema, config_.precision) {
  if (model.tasks.empty()) throw std::invalid_argument("trainer needs at least one task");
  if (config_.ratio_labeled < 0 || config_.ratio_unlabeled < 0 ||
      config_.ratio_labeled + config_.ratio_unlabeled == 0) {
    throw std::invalid_argument("invalid alternation ratio");
  }
  if (!config_.task_weights.empty() && config_.task_weights.size() != model.tasks.size()) {
    throw std::invalid_argument("one CVT weight per task required");
  }
  for (const Tokens& s : pool.sentences) {
    if (s.empty() || static_cast<int>(s.size()) > config_.max_unlabeled_length) continue;
    unlabeled_.push_back(model.vocab.encode(s));
  }
  counters_.labeled_draws.assign(model.tasks.size(), 0);
}

bool Trainer::is_supervised_step(int64_t t) const {
  if (config_.cvt == CvtMode::kOff && config_.baseline == Baseline::kNone) return true;
  const int64_t period = config_.ratio_labeled + config_.ratio_unlabeled;
  return t % period < config_.ratio_labeled;
}

std::vector<int> Trainer::labeled_batch(int task, int64_t draw) const {
  return epoch_batch(model_.tasks.at(static_cast<size_t>(task))->size(Split::kTrain),
                     config_.batch_size,
                     mix_seed(mix_seed(config_.seed, kLabeledOrder), static_cast<uint64_t>(task)),
                     draw);
}

std::vector<TokenizedSentence> Trainer::unlabeled_batch(int64_t draw) const {
  const std::vector<int> idx =
      epoch_batch(static_cast<int>(unlabeled_.size()), config_.unlabeled_batch_size,
                  mix_seed(config_.seed, kUnlabeledOrder), draw);
  std::vector<TokenizedSentence> out;
  for (int i : idx) out.push_back(unlabeled_[static_cast<size_t>(i)]);
  return out;
}

void Trainer::finish_update() {
  clip_global_norm(model_.store, config_.grad_clip);
  optimizer_.step();
  ema_.update();
}

double Trainer::step() {
  return is_supervised_step(optimizer_.t()) ? supervised_step() : cvt_step();
}

double Trainer::supervised_step() {
  const int64_t t = optimizer_.t();
  std::vector<int> candidates;
  for (size_t k = 0; k < model_.tasks.size(); ++k) {
    if (model_.tasks[k]->size(Split::kTrain) > 0) candidates.push_back(static_cast<int>(k));
  }
  if (candidates.empty()) throw std::runtime_error("no task has labeled training data");
  Rng choice(stream(config_.seed, t, kTaskChoice));
  const int k = candidates[static_cast<size_t>(choice.uniform_int(static_cast<int>(candidates.size())))];
  Task& task = *model_.tasks[static_cast<size_t>(k)];
  const std::vector<int> indices = labeled_batch(k, counters_.labeled_draws[static_cast<size_t>(k)]++);
  std::vector<TokenizedSentence> batch;
  for (int i : indices) batch.push_back(task.inputs(Split::kTrain)[static_cast<size_t>(i)]);

  model_.store.zero_grad();
  Graph g;
  Rng dropout_rng(stream(config_.seed, t, kEncoderDropout));
  EncoderOutput enc = model_.encoder->run(g, batch, {config_.dropout_labeled, true, &dropout_rng});
  Expr loss = task.supervised_loss(g, enc, indices);
  g.backward(loss);
  finish_update();
  ++counters_.supervised;
  return loss.scalar();
}

double Trainer::cvt_step() {
  const int64_t t = optimizer_.t();
  const std::vector<TokenizedSentence> batch = unlabeled_batch(counters_.unlabeled_draws++);
  std::vector<int> tasks;
  if (config_.cvt == CvtMode::kOneAtATime && config_.baseline == Baseline::kNone) {
    Rng choice(stream(config_.seed, t, kTaskChoice));
    tasks.push_back(choice.uniform_int(static_cast<int>(model_.tasks.size())));
  } else {
    for (size_t k = 0; k < model_.tasks.size(); ++k) tasks.push_back(static_cast<int>(k));
  }
  const CvtLoss loss = cvt_objective(batch, tasks, t, true);
  finish_update();
  ++counters_.unsupervised;
  return loss.total;
}

CvtLoss Trainer::cvt_objective(std::span<const TokenizedSentence> batch,
                               std::span<const int> tasks, int64_t t, bool apply) {
  if (batch.empty()) throw std::invalid_argument("empty unlabeled batch");
  const Encoder& encoder = *model_.encoder;
  // Teacher: every primary module on the clean batch, dropout off, no
  // gradient tracking.
  std::vector<TeacherTargets> targets;
  {
    Graph tg(false);
    EncoderOutput clean = encoder.run(tg, batch, {});
    for (int k : tasks) targets.push_back(model_.tasks.at(static_cast<size_t>(k))->teacher(clean));
  }

  std::vector<TokenizedSentence> student_batch(batch.begin(), batch.end());
  if (config_.baseline == Baseline::kWordDropout) {
    Rng noise(stream(config_.seed, t, kWordDropoutNoise));
    student_batch = word_dropout_view(batch, config_.word_dropout, noise);
  }
  const BatchLayout layout = BatchLayout::of(student_batch);
  const bool baseline = config_.baseline != Baseline::kNone;
  auto task_rng = [&](int k) {
    return Rng(mix_seed(stream(config_.seed, t, kTaskNoise), static_cast<uint64_t>(k)));
  };

  Graph g;
  Expr v = encoder.embed(g, student_batch);
  if (config_.baseline == Baseline::kVat) {
    double epsilon = std::numeric_limits<double>::infinity();
    for (int k : tasks) epsilon = std::min(epsilon, model_.tasks[static_cast<size_t>(k)]->vat_epsilon);
    Rng probe(stream(config_.seed, t, kVatProbe));
    const Matrix r = vat_perturbation(v.value(), layout, epsilon, probe, [&](Graph& pg, Expr pv) {
      EncoderOutput enc = encoder.encode(pg, pv, layout, {});
      Expr total = pg.constant(Matrix::Zero(1, 1));
      for (size_t i = 0; i < tasks.size(); ++i) {
        Rng rng = task_rng(tasks[i]);
        total = add(total, model_.tasks[static_cast<size_t>(tasks[i])]->consistency_loss(
                               pg, targets[i], enc, rng));
      }
      return total;
    });
    v = add(v, g.constant(r));
  }
  if (apply) model_.store.zero_grad();

  Rng dropout_rng(stream(config_.seed, t, kEncoderDropout));
  EncoderOutput student =
      encoder.encode(g, v, layout, {config_.dropout_unlabeled, true, &dropout_rng});
  CvtLoss out;
  Expr total = g.constant(Matrix::Zero(1, 1));
  for (size_t i = 0; i < tasks.size(); ++i) {
    const int k = tasks[i];
    const Task& task = *model_.tasks.at(static_cast<size_t>(k));
    Rng rng = task_rng(k);
    Expr loss = baseline ? task.consistency_loss(g, targets[i], student, rng)
                         : task.cvt_loss(g, targets[i], student, rng);
    if (!config_.task_weights.empty()) loss = scale(loss, config_.task_weights[static_cast<size_t>(k)]);
    out.per_task.push_back(loss.scalar());
    total = add(total, loss);
  }
  out.total = total.scalar();
  if (apply) g.backward(total);
  return out;
}

void Trainer::evaluate(MetricLog& log, bool eval_train) {
  ema_.swap();
  try {
    for (const auto& task : model_.tasks) {
      std::vector<Split> splits = {Split::kDev};
      if (eval_train) splits.insert(splits.begin(), Split::kTrain);
      for (Split s : splits) {
        if (task->size(s) == 0) continue;
        for (const Metric& m : task->evaluate(*model_.encoder, s)) {
          log.add({optimizer_.t(), task->name(), s == Split::kTrain ? "train" : "dev", m.name,
                   m.value});
        }
      }
    }
  } catch (...) {
    ema_.swap();
    throw;
  }
  ema_.swap();
}

void Trainer::train(int64_t steps, int64_t eval_every, MetricLog* log, bool eval_train) {
  double sup_sum = 0.0, cvt_sum = 0.0;
  int64_t sup_n = 0, cvt_n = 0;
  auto flush = [&]() {
    if (log == nullptr) return;
    if (sup_n > 0) log->add({optimizer_.t(), "all", "train", "supervised_loss", sup_sum / sup_n});
    if (cvt_n > 0) log->add({optimizer_.t(), "all", "train", "cvt_loss", cvt_sum / cvt_n});
    sup_sum = cvt_sum = 0.0;
    sup_n = cvt_n = 0;
    evaluate(*log, eval_train);
  };
  bool evaluated = false;
  while (optimizer_.t() < steps) {
    const bool supervised = is_supervised_step(optimizer_.t());
    const double loss = supervised ? supervised_step() : cvt_step();
    (supervised ? sup_sum : cvt_sum) += loss;
    ++(supervised ? sup_n : cvt_n);
    evaluated = false;
    if (eval_every > 0 && optimizer_.t() % eval_every == 0) {
      flush();
      evaluated = true;
    }
  }
  if (!evaluated) flush();
}

void Trainer::save(const std::filesystem::path& path) const {
  std::vector<NamedTensor> tensors;
  auto& self = const_cast<Trainer&>(*this);
  for (Parameter* p : model_.store.parameters()) tensors.push_back({p->name, p->value});
  for (Parameter* p : model_.store.parameters()) tensors.push_back({"ema/" + p->name, self.ema_.shadow(*p)});
  for (Parameter* p : model_.store.parameters()) {
    tensors.push_back({"momentum/" + p->name, self.optimizer_.momentum(*p)});
  }
  Matrix counters(1, 4 + static_cast<Eigen::Index>(counters_.labeled_draws.size()));
  counters(0, 0) = static_cast<double>(optimizer_.t());
  counters(0, 1) = static_cast<double>(counters_.supervised);
  counters(0, 2) = static_cast<double>(counters_.unsupervised);
  counters(0, 3) = static_cast<double>(counters_.unlabeled_draws);
  for (size_t k = 0; k < counters_.labeled_draws.size(); ++k) {
    counters(0, 4 + static_cast<Eigen::Index>(k)) = static_cast<double>(counters_.labeled_draws[k]);
  }
  tensors.push_back({"trainer/counters", counters});
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_checkpoint(out, tensors);
}

void Trainer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::map<std::string, Matrix> tensors;
  for (NamedTensor& t : read_checkpoint(in)) tensors.emplace(std::move(t.name), std::move(t.value));
  auto take = [&](const std::string& name, const Matrix& like) -> Matrix {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint lacks " + name);
    if (it->second.rows() != like.rows() || it->second.cols() != like.cols()) {
      throw std::runtime_error("shape mismatch for " + name);
    }
    return it->second;
  };
  for (Parameter* p : model_.store.parameters()) {
    p->value = take(p->name, p->value);
    ema_.shadow(*p) = take("ema/" + p->name, p->value);
    optimizer_.momentum(*p) = take("momentum/" + p->name, p->value);
  }
  auto it = tensors.find("trainer/counters");
  if (it == tensors.end() ||
      it->second.cols() != 4 + static_cast<Eigen::Index>(counters_.labeled_draws.size())) {
    throw std::runtime_error("checkpoint lacks matching trainer counters");
  }
  const Matrix& c = it->second;
  optimizer_.set_t(static_cast<int64_t>(c(0, 0)));
  counters_.supervised = static_cast<int64_t>(c(0, 1));
  counters_.unsupervised = static_cast<int64_t>(c(0, 2));
  counters_.unlabeled_draws = static_cast<int64_t>(c(0, 3));
  for (size_t k = 0; k < counters_.labeled_draws.size(); ++k) {
    counters_.labeled_draws[k] = static_cast<int64_t>(c(0, 4 + static_cast<Eigen::Index>(k)));
  }
}

// ---- Frozen-encoder transfer ----------------------------------------------------

std::vector<CachedEncoding> cache_encodings(const Encoder& encoder,
                                            std::span<const TokenizedSentence> sentences) {
  std::vector<CachedEncoding> out;
  out.reserve(sentences.size());
  for (const TokenizedSentence& s : sentences) {
    Graph g(false);
    EncoderOutput enc = encoder.run(g, std::span<const TokenizedSentence>(&s, 1), {});
    out.push_back({enc.v.value(), enc.h1fwd.value(), enc.h1bwd.value(), enc.h1.value(),
                   enc.h2.value(), enc.h1fwd_prev.value(), enc.h1bwd_next.value()});
  }
  return out;
}

EncoderOutput assemble(Graph& g, std::span<const CachedEncoding> cache,
                       std::span<const int> indices) {
  EncoderOutput out;
  BatchLayout& layout = out.layout;
  auto stack = [&](Matrix CachedEncoding::*field) {
    Eigen::Index rows = 0, cols = 0;
    for (int i : indices) {
      const Matrix& m = cache[static_cast<size_t>(i)].*field;
      rows += m.rows();
      cols = m.cols();
    }
    Matrix all(rows, cols);
    Eigen::Index r = 0;
    for (int i : indices) {
      const Matrix& m = cache[static_cast<size_t>(i)].*field;
      all.middleRows(r, m.rows()) = m;
      r += m.rows();
    }
    return g.constant(std::move(all));
  };
  for (int i : indices) {
    const int len = static_cast<int>(cache[static_cast<size_t>(i)].h2.rows());
    layout.offsets.push_back(layout.tokens);
    layout.lengths.push_back(len);
    layout.tokens += len;
    layout.max_length = std::max(layout.max_length, len);
  }
  out.v = stack(&CachedEncoding::v);
  out.h1fwd = stack(&CachedEncoding::h1fwd);
  out.h1bwd = stack(&CachedEncoding::h1bwd);
  out.h1 = stack(&CachedEncoding::h1);
  out.h2 = stack(&CachedEncoding::h2);
  out.h1fwd_prev = stack(&CachedEncoding::h1fwd_prev);
  out.h1bwd_next = stack(&CachedEncoding::h1bwd_next);
  return out;
}

FrozenHeadResult train_frozen_head(Model& model, Task& task, const TrainerConfig& config,
                                   int64_t steps, bool use_cache) {
  std::vector<std::pair<Parameter*, bool>> saved;
  const std::vector<Parameter*> trainable = task.parameters();
  for (Parameter* p : model.store.parameters()) {
    saved.emplace_back(p, p->frozen);
    p->frozen = std::find(trainable.begin(), trainable.end(), p) == trainable.end();
  }
  FrozenHeadResult result;
  try {
    const auto& inputs = task.inputs(Split::kTrain);
    std::vector<CachedEncoding> cache;
    if (use_cache) cache = cache_encodings(*model.encoder, inputs);
    SgdMomentum optimizer(model.store, config.momentum, config.schedule, config.precision);
    Ema ema(model.store, config.ema, config.precision);
    const uint64_t order_seed = mix_seed(config.seed, kLabeledOrder);
    for (int64_t t = 0; t < steps; ++t) {
      const std::vector<int> indices =
          epoch_batch(static_cast<int>(inputs.size()), config.batch_size, order_seed, t);
      Graph g;
      EncoderOutput enc;
      std::vector<CachedEncoding> fresh;
      if (use_cache) {
        enc = assemble(g, cache, indices);
      } else {
        std::vector<TokenizedSentence> batch;
        for (int i : indices) batch.push_back(inputs[static_cast<size_t>(i)]);
        fresh = cache_encodings(*model.encoder, batch);
        std::vector<int> all(indices.size());
        for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
        enc = assemble(g, fresh, all);
      }
      model.store.zero_grad();
      Expr loss = task.supervised_loss(g, enc, indices);
      g.backward(loss);
      clip_global_norm(model.store, config.grad_clip);
      optimizer.step();
      ema.update();
      result.losses.push_back(loss.scalar());
    }
    ema.swap();
    result.dev = task.evaluate(*model.encoder, Split::kDev);
    ema.swap();
  } catch (...) {
    for (auto& [p, f] : saved) p->frozen = f;
    throw;
  }
  for (auto& [p, f] : saved) p->frozen = f;
  return result;
}

}  // namespace cvt
