#ifndef CVT_EXPERIMENT_H_
#define CVT_EXPERIMENT_H_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cvt/dataio.h"
#include "cvt/encoder.h"
#include "cvt/trainer.h"

namespace cvt {

// One [task.NAME] section. A task reads its splits from files, or from a
// synthetic generator when `synthetic` is set.
struct TaskConfig {
  std::string name;
  TaskKind kind = TaskKind::kTagging;
  TagScheme scheme = TagScheme::kPlain;
  bool bio_to_bioes = false;
  std::filesystem::path train, dev, test;  // CoNLL files
  // Parallel text for seq2seq tasks.
  std::filesystem::path train_source, train_target, dev_source, dev_target, test_source,
      test_target;
  std::optional<SynthTaskSpec> synthetic;
  // Synthetic sentences come from stream mix(run seed, sample_stream), or
  // the run seed itself for 0; tasks on one stream share their sentences.
  uint64_t sample_stream = 0;
  double labeled_fraction = 1.0;
  std::optional<double> vat_epsilon;
  double weight = 1.0;  // CVT loss weight
  std::vector<std::string> ablate_views;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::vector<uint64_t> seeds = {1};
  int64_t steps = 1000;
  int64_t eval_every = 500;
  bool eval_train = false;
  // Sentences left over by labeled_fraction join the unlabeled pool.
  bool return_unused_labels = false;
  bool dedupe = true;
  int min_count = 1;
  std::filesystem::path unlabeled;  // one sentence per line; optional
  int unlabeled_limit = 0;          // 0: all
  std::filesystem::path embeddings;
  std::filesystem::path metrics_out;
  std::filesystem::path checkpoint_dir;
  bool resume = false;
  // Frozen-encoder transfer: only the task heads train, on top of the
  // encoder loaded from `pretrained` (EMA weights) or a random one.
  bool freeze_encoder = false;
  std::filesystem::path pretrained;

  EncoderConfig encoder;
  HeadConfig heads;
  TrainerConfig trainer;
  std::vector<TaskConfig> tasks;
};

// key = value lines under [experiment], [encoder], [heads], [training] and
// [task.NAME] sections. Unknown sections or keys raise one error listing
// all of them.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);

struct ExperimentData {
  std::vector<LabeledCorpus> corpora;  // one per task, in config order
  UnlabeledPool pool;
  std::map<std::string, int> deduplicated;
};

ExperimentData load_data(const ExperimentConfig& config, uint64_t seed);

// Vocabulary over the training and unlabeled sentences, the shared encoder
// and one head per task.
std::unique_ptr<Model> build_model(const ExperimentConfig& config, const ExperimentData& data,
                                   uint64_t seed);

struct SeedResult {
  uint64_t seed = 0;
  MetricLog log;
  // Final dev metrics per task.
  std::map<std::string, std::vector<Metric>> dev;
};

struct SummaryRow {
  std::string task;
  std::string metric;
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for one run
  int runs = 0;
};

struct ExperimentResult {
  std::vector<SeedResult> runs;
  std::vector<SummaryRow> summary;
};

SeedResult run_seed(const ExperimentConfig& config, uint64_t seed);
ExperimentResult run_experiment(const ExperimentConfig& config);
std::vector<SummaryRow> summarize(const std::vector<SeedResult>& runs);
void print_summary(std::ostream& out, const std::vector<SummaryRow>& rows);

double mean(const std::vector<double>& values);
double sample_sd(const std::vector<double>& values);

}  // namespace cvt

#endif  // CVT_EXPERIMENT_H_
