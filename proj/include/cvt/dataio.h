#ifndef CVT_DATAIO_H_
#define CVT_DATAIO_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cvt/random.h"
#include "cvt/vocab.h"

namespace cvt {

using Tokens = std::vector<std::string>;

enum class TaskKind { kTagging, kParsing, kSeq2Seq };
enum class Split { kTrain, kDev, kTest };

std::string_view task_kind_name(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

// One labeled sentence. Only the fields of the corpus' task kind are filled.
struct Example {
  Tokens words;
  Tokens tags;                    // tagging
  std::vector<int> heads;         // parsing, 0 = ROOT
  Tokens relations;               // parsing
  std::vector<char> punctuation;  // parsing, excluded from evaluation
  Tokens target;                  // seq2seq

  bool operator==(const Example&) const = default;
};

struct LabeledCorpus {
  TaskKind kind = TaskKind::kTagging;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;

  std::vector<Example>& split(Split s);
  const std::vector<Example>& split(Split s) const;
};

// Raw sentences with no annotation of any kind.
struct UnlabeledPool {
  std::string source;
  std::vector<Tokens> sentences;
};

// ---- File formats -----------------------------------------------------------

// Whitespace-separated columns, token first and tag last, blank lines between
// sentences. Lines starting with "-DOCSTART-" are skipped.
std::vector<Example> load_conll_tagging(const std::filesystem::path& path,
                                        bool bio_to_bioes_tags = false);
std::vector<Example> read_conll_tagging(std::istream& in, bool bio_to_bioes_tags = false);
void write_conll_tagging(std::ostream& out, std::span<const Example> examples);

// Punctuation symbols used when no list is configured.
const std::set<std::string>& default_punctuation();

// Columns: index, form, head (0 = ROOT), relation. A token is punctuation when
// its form or its relation is in `punctuation`.
std::vector<Example> load_conll_parses(const std::filesystem::path& path,
                                       const std::set<std::string>& punctuation =
                                           default_punctuation());
std::vector<Example> read_conll_parses(std::istream& in,
                                       const std::set<std::string>& punctuation =
                                           default_punctuation());
void write_conll_parses(std::ostream& out, std::span<const Example> examples);

// Two aligned files, one sentence per line.
std::vector<Example> load_parallel(const std::filesystem::path& source,
                                   const std::filesystem::path& target);
UnlabeledPool load_unlabeled(const std::filesystem::path& path);
// Projective iff no two arcs cross and nothing covers ROOT's dependents.
bool is_projective(std::span<const int> heads);

// ---- Vocabulary and split hygiene -------------------------------------------

// A token is kept when count >= min_count and count > unk_threshold; ids
// follow (count desc, token). Characters of every kept token are added.
Vocabulary build_vocab(std::span<const std::vector<Tokens>> corpora, int min_count = 1,
                       int unk_threshold = 0, bool sequence_markers = false);

struct NamedCorpus {
  std::string name;
  LabeledCorpus* corpus;
};

// Removes every train sentence whose tokens occur in any dev/test split of the
// given tasks. Returns the removal count per task name.
std::map<std::string, int> dedupe_splits(std::span<const NamedCorpus> registry);

// Keeps round(fraction * n) sentences, a prefix of a seeded permutation so
// smaller fractions are subsets of larger ones. Dropped sentences are
// appended to `returned` (words only) when it is given.
std::vector<Example> subsample_labeled(std::span<const Example> corpus, double fraction,
                                       uint64_t seed, UnlabeledPool* returned = nullptr);

// ---- Synthetic tasks --------------------------------------------------------

enum class SynthKind { kMarkovTagger, kTreeGrammar, kTransduction };
enum class TransductionRule { kCopy, kReverse, kLexicon };
// Label functions over the hidden state chain of the Markov tagger.
enum class MarkovLabel { kState, kCoarse, kNextState, kPreviousState };

struct SynthTaskSpec {
  SynthKind kind = SynthKind::kMarkovTagger;
  int states = 8;
  int vocab = 200;
  double noise = 0.3;
  int min_length = 5;
  int max_length = 20;
  int labeled = 1000;
  int unlabeled = 5000;
  int dev = 1000;
  int test = 0;
  uint64_t seed = 1;
  // Tagging only.
  MarkovLabel label = MarkovLabel::kState;
  // Tree grammar only.
  int relations = 6;
  // Transduction only.
  TransductionRule rule = TransductionRule::kCopy;
};

struct SynthData {
  LabeledCorpus corpus;
  UnlabeledPool pool;
};

// The hidden process depends only on (kind, states, vocab, noise, seed); the
// sentences themselves are drawn from a stream mixed with `sample_seed`, so
// tasks built from one process can use different sentences.
SynthData gen_synthetic(const SynthTaskSpec& spec);
SynthData gen_synthetic(const SynthTaskSpec& spec, uint64_t sample_seed);

// Markov tagger sentences with every label function applied to the same
// hidden chains, for tasks that share inputs.
struct MarkovSample {
  Tokens words;
  std::vector<int> states;
};
class MarkovProcess {
 public:
  MarkovProcess(int states, int vocab, double noise, uint64_t seed);
  MarkovSample sample(Rng& rng, int min_length, int max_length) const;
  static Tokens labels(const MarkovSample& sample, MarkovLabel label, int states);
  int states() const { return states_; }

 private:
  int states_;
  int vocab_;
  double noise_;
  std::vector<double> initial_;
  std::vector<std::vector<double>> transitions_;
  std::vector<std::vector<int>> blocks_;         // word ids per state
  std::vector<std::vector<double>> emissions_;   // Zipfian weights per block
};

}  // namespace cvt

#endif  // CVT_DATAIO_H_
