#ifndef CVT_TRAINER_H_
#define CVT_TRAINER_H_

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <unordered_map>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "cvt/dataio.h"
#include "cvt/encoder.h"
#include "cvt/graph.h"
#include "cvt/parsing.h"
#include "cvt/seq2seq.h"
#include "cvt/tagging.h"
#include "cvt/vocab.h"

namespace cvt {

// ---- Optimization ---------------------------------------------------------

struct LrSchedule {
  double base = 0.5;
  double decay = 0.005;
  double operator()(int64_t t) const;
};

// lr(t) = 0.5 / (1 + 0.005 sqrt(t)).
double lr(int64_t t);

// Classical momentum: m <- mu m + g; theta <- theta - lr(t) m; t <- t + 1.
class SgdMomentum {
 public:
  explicit SgdMomentum(ParameterStore& store, double momentum = 0.9,
                       LrSchedule schedule = {}, Precision precision = Precision::kFloat64);

  // Applies Parameter::grad of every trainable parameter.
  void step();
  int64_t t() const { return t_; }
  void set_t(int64_t t) { t_ = t; }
  Matrix& momentum(const Parameter& p);
  const LrSchedule& schedule() const { return schedule_; }

 private:
  ParameterStore& store_;
  double mu_;
  LrSchedule schedule_;
  Precision precision_;
  int64_t t_ = 0;
  std::unordered_map<const Parameter*, Matrix> momentum_;
};

// Rescales all trainable gradients so their joint L2 norm is at most
// max_norm; returns the norm before clipping. max_norm <= 0 disables it.
double clip_global_norm(ParameterStore& store, double max_norm);

// Shadow weights: shadow <- decay * shadow + (1 - decay) * theta, computed as
// shadow + (1 - decay) * (theta - shadow) so shadow = theta is an exact fixed
// point.
class Ema {
 public:
  explicit Ema(ParameterStore& store, double decay = 0.998,
               Precision precision = Precision::kFloat64);
  void update();
  // Exchanges live and shadow values; applying it twice restores both.
  void swap();
  Matrix& shadow(const Parameter& p);
  double decay() const { return decay_; }

 private:
  ParameterStore& store_;
  double decay_;
  Precision precision_;
  std::unordered_map<const Parameter*, Matrix> shadow_;
};

// Rounds every entry to the nearest binary32 value.
void round_to_float(Matrix& m);

// ---- Checkpoints and logs ---------------------------------------------------

struct NamedTensor {
  std::string name;
  Matrix value;
};

inline constexpr uint32_t kCheckpointVersion = 1;

// Little-endian: u32 version, u32 count, then per tensor u32 name length,
// name bytes, u32 rank, u32 dims, f32 values in row-major order.
void write_checkpoint(std::ostream& out, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

struct MetricRecord {
  int64_t step = 0;
  std::string task;
  std::string split;
  std::string metric;
  double value = 0.0;

  bool operator==(const MetricRecord&) const = default;
};

// Line-delimited JSON records {step, task, split, metric, value}.
class MetricLog {
 public:
  void add(MetricRecord record);
  const std::vector<MetricRecord>& records() const { return records_; }
  void write(std::ostream& out) const;
  static std::string to_json_line(const MetricRecord& record);
  static std::vector<MetricRecord> read(std::istream& in);
  // Streams every new record to `out` as it arrives.
  void tee(std::ostream* out) { sink_ = out; }

 private:
  std::vector<MetricRecord> records_;
  std::ostream* sink_ = nullptr;
};

// ---- Tasks ------------------------------------------------------------------

// Teacher output per task kind: soft token distributions for tagging, soft
// per-sentence candidate distributions for parsing, hard beam outputs for
// sequence transduction.
using TeacherTargets =
    std::variant<Matrix, std::vector<Matrix>, std::vector<std::vector<int>>>;

struct Metric {
  std::string name;
  double value;
};

class Task {
 public:
  Task(std::string name, TaskKind kind) : name_(std::move(name)), kind_(kind) {}
  virtual ~Task() = default;
  Task(const Task&) = delete;
  Task& operator=(const Task&) = delete;

  const std::string& name() const { return name_; }
  TaskKind kind() const { return kind_; }

  const std::vector<TokenizedSentence>& inputs(Split s) const;
  int size(Split s) const { return static_cast<int>(inputs(s).size()); }

  virtual Expr supervised_loss(Graph& g, const EncoderOutput& enc,
                               std::span<const int> indices) const = 0;
  virtual TeacherTargets teacher(const EncoderOutput& clean) const = 0;
  // Restricted-view students against the teacher.
  virtual Expr cvt_loss(Graph& g, const TeacherTargets& targets,
                        const EncoderOutput& student, Rng& rng) const = 0;
  // Primary module as the student (Word Dropout and VAT baselines).
  virtual Expr consistency_loss(Graph& g, const TeacherTargets& targets,
                                const EncoderOutput& student, Rng& rng) const = 0;
  // First entry is the headline metric (higher is better).
  virtual std::vector<Metric> evaluate(const Encoder& encoder, Split split) const = 0;

  virtual std::vector<Parameter*> primary_parameters() const = 0;
  virtual std::vector<Parameter*> parameters() const = 0;
  // Student views, by name, that take part in cvt_loss.
  virtual std::vector<std::string> views() const = 0;
  // Removes the named students; unknown names are an error.
  virtual void ablate(std::span<const std::string> names) = 0;

  double vat_epsilon = 0.5;

 protected:
  std::array<std::vector<TokenizedSentence>, 3> inputs_;

 private:
  std::string name_;
  TaskKind kind_;
};

struct HeadConfig {
  int tagging_hidden = 512;
  int parser_mlp = 512;
  double label_smoothing = 0.0;  // supervised tagging targets
  Seq2SeqConfig seq2seq;
  // Target tokens seen this many times or fewer in training become UNK.
  int target_unk_threshold = 5;
};

// VAT norms: 1.5 for CCG, 1.0 for dependency parsing, 0.5 otherwise.
double default_vat_epsilon(TaskKind kind, std::string_view task_name);

class TaggingTask : public Task {
 public:
  TaggingTask(std::string name, const LabeledCorpus& corpus, TagScheme scheme,
              const Vocabulary& vocab, const EncoderConfig& encoder,
              const HeadConfig& head, ParameterStore& store, Rng& rng);

  Expr supervised_loss(Graph& g, const EncoderOutput& enc,
                       std::span<const int> indices) const override;
  TeacherTargets teacher(const EncoderOutput& clean) const override;
  Expr cvt_loss(Graph& g, const TeacherTargets& targets, const EncoderOutput& student,
                Rng& rng) const override;
  Expr consistency_loss(Graph& g, const TeacherTargets& targets,
                        const EncoderOutput& student, Rng& rng) const override;
  std::vector<Metric> evaluate(const Encoder& encoder, Split split) const override;
  std::vector<Parameter*> primary_parameters() const override;
  std::vector<Parameter*> parameters() const override;
  std::vector<std::string> views() const override;
  void ablate(std::span<const std::string> names) override;

  const TaggingHead& head() const { return head_; }
  const TagSet& tags() const { return tags_; }
  const std::vector<std::vector<int>>& gold(Split s) const {
    return gold_[static_cast<size_t>(s)];
  }

 private:
  TagSet tags_;
  TaggingHead head_;
  std::vector<TagView> views_;
  double label_smoothing_;
  std::array<std::vector<std::vector<int>>, 3> gold_;
};

class ParsingTask : public Task {
 public:
  ParsingTask(std::string name, const LabeledCorpus& corpus, const Vocabulary& vocab,
              const EncoderConfig& encoder, const HeadConfig& head,
              ParameterStore& store, Rng& rng);

  Expr supervised_loss(Graph& g, const EncoderOutput& enc,
                       std::span<const int> indices) const override;
  TeacherTargets teacher(const EncoderOutput& clean) const override;
  Expr cvt_loss(Graph& g, const TeacherTargets& targets, const EncoderOutput& student,
                Rng& rng) const override;
  Expr consistency_loss(Graph& g, const TeacherTargets& targets,
                        const EncoderOutput& student, Rng& rng) const override;
  std::vector<Metric> evaluate(const Encoder& encoder, Split split) const override;
  std::vector<Parameter*> primary_parameters() const override;
  std::vector<Parameter*> parameters() const override;
  std::vector<std::string> views() const override;
  void ablate(std::span<const std::string> names) override;

  const ParserHead& head() const { return head_; }

 private:
  TagSet relations_;
  ParserHead head_;
  std::vector<ParseView> views_;
  std::array<std::vector<DepParse>, 3> gold_;
  std::array<std::vector<std::vector<char>>, 3> punctuation_;
};

class Seq2SeqTask : public Task {
 public:
  Seq2SeqTask(std::string name, const LabeledCorpus& corpus, const Vocabulary& vocab,
              const EncoderConfig& encoder, const HeadConfig& head,
              ParameterStore& store, Rng& rng);

  Expr supervised_loss(Graph& g, const EncoderOutput& enc,
                       std::span<const int> indices) const override;
  TeacherTargets teacher(const EncoderOutput& clean) const override;
  Expr cvt_loss(Graph& g, const TeacherTargets& targets, const EncoderOutput& student,
                Rng& rng) const override;
  Expr consistency_loss(Graph& g, const TeacherTargets& targets,
                        const EncoderOutput& student, Rng& rng) const override;
  std::vector<Metric> evaluate(const Encoder& encoder, Split split) const override;
  std::vector<Parameter*> primary_parameters() const override;
  std::vector<Parameter*> parameters() const override;
  std::vector<std::string> views() const override;
  void ablate(std::span<const std::string> names) override;

  const Seq2SeqHead& head() const { return *head_; }
  const Vocabulary& target_vocab() const { return target_vocab_; }

 private:
  Vocabulary target_vocab_;
  std::unique_ptr<Seq2SeqHead> head_;
  std::vector<DecoderKind> views_;
  std::array<std::vector<std::vector<int>>, 3> gold_;
  std::array<std::vector<Tokens>, 3> gold_text_;
};

// Shared encoder plus task heads. All tasks read the same encoder parameters.
struct Model {
  ParameterStore store;
  Vocabulary vocab;
  std::unique_ptr<Encoder> encoder;
  std::vector<std::unique_ptr<Task>> tasks;

  Task& task(std::string_view name);
};

// ---- Training -----------------------------------------------------------------

enum class CvtMode { kOn, kOff, kOneAtATime };
enum class Baseline { kNone, kWordDropout, kVat };

std::string_view cvt_mode_name(CvtMode mode);
CvtMode parse_cvt_mode(std::string_view name);
std::string_view baseline_name(Baseline baseline);
Baseline parse_baseline(std::string_view name);

struct TrainerConfig {
  uint64_t seed = 1;
  int batch_size = 64;
  int unlabeled_batch_size = 64;
  double momentum = 0.9;
  LrSchedule schedule;
  double grad_clip = 1.0;
  double ema = 0.998;
  double dropout_labeled = 0.5;
  double dropout_unlabeled = 0.8;
  int ratio_labeled = 1;
  int ratio_unlabeled = 1;
  CvtMode cvt = CvtMode::kOn;
  Baseline baseline = Baseline::kNone;
  double word_dropout = 0.1;
  int max_unlabeled_length = 60;
  Precision precision = Precision::kFloat64;
  std::vector<double> task_weights;  // CVT loss weight per task, default 1
};

// Each token independently becomes REMOVED with probability `rate`.
std::vector<TokenizedSentence> word_dropout_view(std::span<const TokenizedSentence> batch,
                                                 double rate, Rng& rng);

// r_adv = eps * g / ||g|| per sentence, where g is the gradient of
// divergence(v + d) with respect to a random probe d of unit norm per
// sentence. Returns r_adv with the shape of v.
Matrix vat_perturbation(const Matrix& v, const BatchLayout& layout, double epsilon,
                        Rng& rng,
                        const std::function<Expr(Graph&, Expr perturbed)>& divergence);

struct CvtLoss {
  double total = 0.0;
  std::vector<double> per_task;
};

struct StepCounters {
  int64_t supervised = 0;
  int64_t unsupervised = 0;
  int64_t unlabeled_draws = 0;
  std::vector<int64_t> labeled_draws;  // per task
};

class Trainer {
 public:
  Trainer(Model& model, TrainerConfig config, const UnlabeledPool& pool);

  // Step t is supervised iff t mod (a + b) < a for ratio a:b, or always
  // when CVT and baselines are off.
  bool is_supervised_step(int64_t t) const;
  // One optimizer update of the kind the schedule asks for; returns the loss.
  double step();
  double supervised_step();
  double cvt_step();

  // Loss of the unlabeled objective for the given tasks on `batch`, using the
  // random streams of step `t`. With apply=true the gradients of every
  // parameter are replaced by those of this objective.
  CvtLoss cvt_objective(std::span<const TokenizedSentence> batch,
                        std::span<const int> tasks, int64_t t, bool apply);

  // Runs until `steps` updates in total have been made, evaluating with the
  // EMA weights every eval_every updates and at the end.
  void train(int64_t steps, int64_t eval_every, MetricLog* log,
             bool eval_train = false);
  void evaluate(MetricLog& log, bool eval_train = false);

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

  int64_t t() const { return optimizer_.t(); }
  const StepCounters& counters() const { return counters_; }
  SgdMomentum& optimizer() { return optimizer_; }
  Ema& ema() { return ema_; }
  const TrainerConfig& config() const { return config_; }
  std::span<const TokenizedSentence> unlabeled() const { return unlabeled_; }
  std::vector<int> labeled_batch(int task, int64_t draw) const;
  std::vector<TokenizedSentence> unlabeled_batch(int64_t draw) const;

 private:
  void finish_update();

  Model& model_;
  TrainerConfig config_;
  std::vector<TokenizedSentence> unlabeled_;
  SgdMomentum optimizer_;
  Ema ema_;
  StepCounters counters_;
};

// ---- Frozen-encoder transfer ----------------------------------------------------

// Eval-mode encodings of single sentences, one entry per sentence.
struct CachedEncoding {
  Matrix v, h1fwd, h1bwd, h1, h2, h1fwd_prev, h1bwd_next;
};
std::vector<CachedEncoding> cache_encodings(const Encoder& encoder,
                                            std::span<const TokenizedSentence> sentences);
// Stacks cached sentences into an EncoderOutput of constants.
EncoderOutput assemble(Graph& g, std::span<const CachedEncoding> cache,
                       std::span<const int> indices);

struct FrozenHeadResult {
  std::vector<Metric> dev;
  std::vector<double> losses;
};

// Trains only `task`'s parameters on top of a frozen encoder. With
// use_cache the encoder runs once per training sentence.
FrozenHeadResult train_frozen_head(Model& model, Task& task, const TrainerConfig& config,
                                   int64_t steps, bool use_cache = true);

}  // namespace cvt

#endif  // CVT_TRAINER_H_
