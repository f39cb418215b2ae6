#include "cvt/dataio.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "cvt/tagging.h"

namespace cvt {

std::string_view task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kTagging: return "tagging";
    case TaskKind::kParsing: return "parsing";
    case TaskKind::kSeq2Seq: return "seq2seq";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  for (TaskKind k : {TaskKind::kTagging, TaskKind::kParsing, TaskKind::kSeq2Seq}) {
    if (task_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown task kind: " + std::string(name));
}

std::vector<Example>& LabeledCorpus::split(Split s) {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kDev: return dev;
    case Split::kTest: return test;
  }
  throw std::invalid_argument("unknown split");
}

const std::vector<Example>& LabeledCorpus::split(Split s) const {
  return const_cast<LabeledCorpus*>(this)->split(s);
}

namespace {

Tokens split_whitespace(const std::string& line) {
  std::istringstream in(line);
  Tokens out;
  std::string field;
  while (in >> field) out.push_back(field);
  return out;
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

std::string at_line(size_t line) { return " (line " + std::to_string(line) + ")"; }

}  // namespace

// ---- Tagging files ------------------------------------------------------------

std::vector<Example> read_conll_tagging(std::istream& in, bool bio_to_bioes_tags) {
  std::vector<Example> out;
  Example current;
  size_t columns = 0;
  size_t line_no = 0;
  auto flush = [&]() {
    if (current.words.empty()) return;
    if (bio_to_bioes_tags) current.tags = bio_to_bioes(current.tags);
    out.push_back(std::move(current));
    current = Example{};
    columns = 0;
  };
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    Tokens fields = split_whitespace(line);
    if (fields.empty()) {
      flush();
      continue;
    }
    if (fields[0] == "-DOCSTART-") continue;
    if (fields.size() < 2) {
      throw std::runtime_error("tagging line needs a token and a tag" + at_line(line_no));
    }
    if (columns == 0) columns = fields.size();
    if (fields.size() != columns) {
      throw std::runtime_error("ragged columns" + at_line(line_no));
    }
    current.words.push_back(fields.front());
    current.tags.push_back(fields.back());
  }
  flush();
  return out;
}

std::vector<Example> load_conll_tagging(const std::filesystem::path& path,
                                        bool bio_to_bioes_tags) {
  std::ifstream in = open_or_throw(path);
  return read_conll_tagging(in, bio_to_bioes_tags);
}

void write_conll_tagging(std::ostream& out, std::span<const Example> examples) {
  for (const Example& e : examples) {
    for (size_t t = 0; t < e.words.size(); ++t) out << e.words[t] << ' ' << e.tags[t] << '\n';
    out << '\n';
  }
}

// ---- Parse files --------------------------------------------------------------

const std::set<std::string>& default_punctuation() {
  static const std::set<std::string> kPunctuation = {
      ".", ",", ":", ";", "?", "!", "``", "''", "\"", "'", "`", "-LRB-", "-RRB-",
      "(", ")", "--", "...", "#", "$", "punct"};
  return kPunctuation;
}

std::vector<Example> read_conll_parses(std::istream& in,
                                       const std::set<std::string>& punctuation) {
  std::vector<Example> out;
  Example current;
  size_t line_no = 0;
  size_t first_line = 0;
  auto flush = [&]() {
    if (current.words.empty()) return;
    const int n = static_cast<int>(current.words.size());
    for (int t = 0; t < n; ++t) {
      const int h = current.heads[static_cast<size_t>(t)];
      if (h < 0 || h > n) {
        throw std::runtime_error("head index out of range" + at_line(first_line + t));
      }
      if (h == t + 1) throw std::runtime_error("self-loop head" + at_line(first_line + t));
    }
    out.push_back(std::move(current));
    current = Example{};
  };
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    Tokens fields = split_whitespace(line);
    if (fields.empty()) {
      flush();
      continue;
    }
    if (fields.size() != 4) {
      throw std::runtime_error("parse line needs index, form, head, relation" + at_line(line_no));
    }
    if (current.words.empty()) first_line = line_no;
    int index = 0, head = 0;
    try {
      index = std::stoi(fields[0]);
      head = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw std::runtime_error("non-numeric index or head" + at_line(line_no));
    }
    if (index != static_cast<int>(current.words.size()) + 1) {
      throw std::runtime_error("token indices must count up from 1" + at_line(line_no));
    }
    current.words.push_back(fields[1]);
    current.heads.push_back(head);
    current.relations.push_back(fields[3]);
    current.punctuation.push_back(
        punctuation.count(fields[1]) > 0 || punctuation.count(fields[3]) > 0 ? 1 : 0);
  }
  flush();
  return out;
}

std::vector<Example> load_conll_parses(const std::filesystem::path& path,
                                       const std::set<std::string>& punctuation) {
  std::ifstream in = open_or_throw(path);
  return read_conll_parses(in, punctuation);
}

void write_conll_parses(std::ostream& out, std::span<const Example> examples) {
  for (const Example& e : examples) {
    for (size_t t = 0; t < e.words.size(); ++t) {
      out << t + 1 << ' ' << e.words[t] << ' ' << e.heads[t] << ' ' << e.relations[t] << '\n';
    }
    out << '\n';
  }
}

bool is_projective(std::span<const int> heads) {
  const int n = static_cast<int>(heads.size());
  for (int a = 1; a <= n; ++a) {
    const int ha = heads[static_cast<size_t>(a - 1)];
    const int lo_a = std::min(a, ha), hi_a = std::max(a, ha);
    for (int b = 1; b <= n; ++b) {
      const int hb = heads[static_cast<size_t>(b - 1)];
      const int lo_b = std::min(b, hb), hi_b = std::max(b, hb);
      if (lo_a < lo_b && lo_b < hi_a && hi_a < hi_b) return false;
    }
  }
  return true;
}

// ---- Parallel and raw text ----------------------------------------------------

std::vector<Example> load_parallel(const std::filesystem::path& source,
                                   const std::filesystem::path& target) {
  std::ifstream src = open_or_throw(source);
  std::ifstream tgt = open_or_throw(target);
  std::vector<Example> out;
  std::string a, b;
  size_t line_no = 0;
  while (true) {
    const bool more_a = static_cast<bool>(std::getline(src, a));
    const bool more_b = static_cast<bool>(std::getline(tgt, b));
    if (!more_a && !more_b) break;
    ++line_no;
    if (more_a != more_b) {
      throw std::runtime_error("parallel files differ in length" + at_line(line_no));
    }
    Example e;
    e.words = split_whitespace(a);
    e.target = split_whitespace(b);
    if (e.words.empty()) continue;
    out.push_back(std::move(e));
  }
  return out;
}

UnlabeledPool load_unlabeled(const std::filesystem::path& path) {
  std::ifstream in = open_or_throw(path);
  UnlabeledPool pool;
  pool.source = path.string();
  std::string line;
  while (std::getline(in, line)) {
    Tokens words = split_whitespace(line);
    if (!words.empty()) pool.sentences.push_back(std::move(words));
  }
  return pool;
}

// ---- Vocabulary -----------------------------------------------------------------

Vocabulary build_vocab(std::span<const std::vector<Tokens>> corpora, int min_count,
                       int unk_threshold, bool sequence_markers) {
  std::unordered_map<std::string, int> counts;
  for (const auto& corpus : corpora) {
    for (const Tokens& sentence : corpus) {
      for (const std::string& w : sentence) ++counts[w];
    }
  }
  std::vector<std::pair<std::string, int>> kept;
  for (const auto& [token, count] : counts) {
    if (count >= min_count && count > unk_threshold) kept.emplace_back(token, count);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocabulary vocab(sequence_markers);
  for (const auto& [token, count] : kept) {
    vocab.add(token);
    vocab.add_chars(token);
  }
  return vocab;
}

// ---- Split hygiene --------------------------------------------------------------

std::map<std::string, int> dedupe_splits(std::span<const NamedCorpus> registry) {
  std::set<Tokens> held_out;
  for (const NamedCorpus& task : registry) {
    for (Split s : {Split::kDev, Split::kTest}) {
      for (const Example& e : task.corpus->split(s)) held_out.insert(e.words);
    }
  }
  std::map<std::string, int> removed;
  for (const NamedCorpus& task : registry) {
    auto& train = task.corpus->train;
    const size_t before = train.size();
    std::erase_if(train, [&](const Example& e) { return held_out.count(e.words) > 0; });
    removed[task.name] += static_cast<int>(before - train.size());
  }
  return removed;
}

std::vector<Example> subsample_labeled(std::span<const Example> corpus, double fraction,
                                       uint64_t seed, UnlabeledPool* returned) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("labeled fraction must be in (0, 1]");
  }
  const int n = static_cast<int>(corpus.size());
  const auto keep = static_cast<int>(std::llround(fraction * n));
  const std::vector<int> order = permutation(n, mix_seed(seed, 0x5ab5));
  std::vector<char> chosen(static_cast<size_t>(n), 0);
  for (int i = 0; i < keep; ++i) chosen[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    if (chosen[static_cast<size_t>(i)]) {
      out.push_back(corpus[static_cast<size_t>(i)]);
    } else if (returned != nullptr) {
      returned->sentences.push_back(corpus[static_cast<size_t>(i)].words);
    }
  }
  return out;
}

// ---- Markov tagger ----------------------------------------------------------------

MarkovProcess::MarkovProcess(int states, int vocab, double noise, uint64_t seed)
    : states_(states), vocab_(vocab), noise_(noise) {
  if (states < 1 || vocab < states) {
    throw std::invalid_argument("need at least one state and one word per state");
  }
  if (noise < 0.0 || noise > 1.0) throw std::invalid_argument("noise must be in [0, 1]");
  Rng rng(mix_seed(seed, 0x3a7c));
  initial_.assign(static_cast<size_t>(states), 1.0);
  // Each state moves to a few successors only, so neighbors carry information
  // about a token whose word was replaced by noise.
  const int successors = std::min(3, states);
  for (int s = 0; s < states; ++s) {
    std::vector<int> order = permutation(states, rng.next());
    std::vector<double> row(static_cast<size_t>(states), 0.0);
    for (int k = 0; k < successors; ++k) {
      row[static_cast<size_t>(order[static_cast<size_t>(k)])] = rng.uniform(0.2, 1.0);
    }
    transitions_.push_back(std::move(row));
  }
  const std::vector<int> words = permutation(vocab, rng.next());
  blocks_.resize(static_cast<size_t>(states));
  for (int i = 0; i < vocab; ++i) {
    blocks_[static_cast<size_t>(i % states)].push_back(words[static_cast<size_t>(i)]);
  }
  for (const auto& block : blocks_) {
    std::vector<double> zipf;
    for (size_t k = 0; k < block.size(); ++k) zipf.push_back(1.0 / static_cast<double>(k + 1));
    emissions_.push_back(std::move(zipf));
  }
}

MarkovSample MarkovProcess::sample(Rng& rng, int min_length, int max_length) const {
  if (min_length < 1 || max_length < min_length) {
    throw std::invalid_argument("invalid sentence length range");
  }
  const int length = min_length + rng.uniform_int(max_length - min_length + 1);
  MarkovSample out;
  int state = rng.categorical(initial_);
  for (int t = 0; t < length; ++t) {
    if (t > 0) state = rng.categorical(transitions_[static_cast<size_t>(state)]);
    int word;
    if (rng.bernoulli(noise_)) {
      word = rng.uniform_int(vocab_);
    } else {
      const auto s = static_cast<size_t>(state);
      word = blocks_[s][static_cast<size_t>(rng.categorical(emissions_[s]))];
    }
    out.words.push_back("w" + std::to_string(word));
    out.states.push_back(state);
  }
  return out;
}

Tokens MarkovProcess::labels(const MarkovSample& sample, MarkovLabel label, int states) {
  Tokens out;
  const auto n = sample.states.size();
  for (size_t t = 0; t < n; ++t) {
    switch (label) {
      case MarkovLabel::kState:
        out.push_back("S" + std::to_string(sample.states[t]));
        break;
      case MarkovLabel::kCoarse:
        out.push_back("C" + std::to_string(sample.states[t] * 2 / std::max(states, 2)));
        break;
      case MarkovLabel::kNextState:
        out.push_back(t + 1 < n ? "S" + std::to_string(sample.states[t + 1]) : "END");
        break;
      case MarkovLabel::kPreviousState:
        out.push_back(t > 0 ? "S" + std::to_string(sample.states[t - 1]) : "START");
        break;
    }
  }
  return out;
}

// ---- Tree grammar -------------------------------------------------------------------

namespace {

class TreeGrammar {
 public:
  TreeGrammar(int categories, int vocab, int relations, double noise, uint64_t seed)
      : categories_(categories), vocab_(vocab), relations_(relations), noise_(noise) {
    if (categories < 1 || vocab < categories || relations < 1) {
      throw std::invalid_argument("invalid tree grammar sizes");
    }
    Rng rng(mix_seed(seed, 0x76ee));
    for (int side = 0; side < 2; ++side) {
      auto& table = side == 0 ? left_ : right_;
      for (int c = 0; c < categories; ++c) {
        std::vector<double> row(static_cast<size_t>(categories), 0.0);
        std::vector<int> order = permutation(categories, rng.next());
        for (int k = 0; k < std::min(3, categories); ++k) {
          row[static_cast<size_t>(order[static_cast<size_t>(k)])] = rng.uniform(0.2, 1.0);
        }
        table.push_back(std::move(row));
      }
    }
    for (int i = 0; i < 2 * categories * categories; ++i) {
      relation_of_.push_back(rng.uniform_int(relations));
    }
    const std::vector<int> words = permutation(vocab, rng.next());
    blocks_.resize(static_cast<size_t>(categories));
    for (int i = 0; i < vocab; ++i) {
      blocks_[static_cast<size_t>(i % categories)].push_back(words[static_cast<size_t>(i)]);
    }
  }

  Example sample(Rng& rng, int min_length, int max_length) const {
    while (true) {
      std::vector<Node> nodes;
      grow(rng, rng.uniform_int(categories_), 0, rng.uniform_int(relations_), nodes);
      std::vector<int> order;  // node ids in surface order
      linearize(nodes, 0, order);
      const bool punct = rng.bernoulli(0.5);
      const int n = static_cast<int>(order.size()) + (punct ? 1 : 0);
      if (n < min_length || n > max_length) continue;
      std::vector<int> position(nodes.size());
      for (size_t i = 0; i < order.size(); ++i) position[static_cast<size_t>(order[i])] = static_cast<int>(i) + 1;
      Example e;
      for (int id : order) {
        const Node& node = nodes[static_cast<size_t>(id)];
        e.words.push_back(word(rng, node.category));
        e.heads.push_back(node.parent < 0 ? 0 : position[static_cast<size_t>(node.parent)]);
        e.relations.push_back("rel" + std::to_string(node.relation));
        e.punctuation.push_back(0);
      }
      if (punct) {
        e.words.push_back(".");
        e.heads.push_back(position[0]);
        e.relations.push_back("punct");
        e.punctuation.push_back(1);
      }
      return e;
    }
  }

 private:
  struct Node {
    int category;
    int relation;
    int parent;
    std::vector<int> left;   // nearest child last
    std::vector<int> right;  // nearest child first
  };

  int grow(Rng& rng, int category, int depth, int relation, std::vector<Node>& nodes,
           int parent = -1) const {
    const int id = static_cast<int>(nodes.size());
    nodes.push_back({category, relation, parent, {}, {}});
    const double p = 0.75 / (1.0 + 0.6 * depth);
    for (int side = 0; side < 2; ++side) {
      const auto& table = side == 0 ? left_ : right_;
      for (int k = 0; k < 2 && depth < 4 && rng.bernoulli(p); ++k) {
        const int child = rng.categorical(table[static_cast<size_t>(category)]);
        const int cid = grow(rng, child, depth + 1, relation_for(category, child, side), nodes, id);
        auto& list = side == 0 ? nodes[static_cast<size_t>(id)].left
                               : nodes[static_cast<size_t>(id)].right;
        list.push_back(cid);
      }
    }
    return id;
  }

  // Children are contiguous subtrees around their head, so the result is
  // projective.
  static void linearize(const std::vector<Node>& nodes, int id, std::vector<int>& order) {
    const Node& node = nodes[static_cast<size_t>(id)];
    for (int c : node.left) linearize(nodes, c, order);
    order.push_back(id);
    for (int c : node.right) linearize(nodes, c, order);
  }

  int relation_for(int head, int child, int side) const {
    return relation_of_[static_cast<size_t>((side * categories_ + head) * categories_ + child)];
  }

  std::string word(Rng& rng, int category) const {
    if (rng.bernoulli(noise_)) return "w" + std::to_string(rng.uniform_int(vocab_));
    const auto& block = blocks_[static_cast<size_t>(category)];
    std::vector<double> zipf;
    for (size_t k = 0; k < block.size(); ++k) zipf.push_back(1.0 / static_cast<double>(k + 1));
    return "w" + std::to_string(block[static_cast<size_t>(rng.categorical(zipf))]);
  }

  int categories_;
  int vocab_;
  int relations_;
  double noise_;
  std::vector<std::vector<double>> left_;
  std::vector<std::vector<double>> right_;
  std::vector<int> relation_of_;
  std::vector<std::vector<int>> blocks_;
};

Example transduce(Rng& rng, const SynthTaskSpec& spec, const std::vector<int>& lexicon) {
  const int length = spec.min_length + rng.uniform_int(spec.max_length - spec.min_length + 1);
  Example e;
  std::vector<int> symbols;
  for (int t = 0; t < length; ++t) symbols.push_back(rng.uniform_int(spec.vocab));
  for (int s : symbols) e.words.push_back("a" + std::to_string(s));
  switch (spec.rule) {
    case TransductionRule::kCopy:
      e.target = e.words;
      break;
    case TransductionRule::kReverse:
      e.target.assign(e.words.rbegin(), e.words.rend());
      break;
    case TransductionRule::kLexicon:
      for (int s : symbols) e.target.push_back("b" + std::to_string(lexicon[static_cast<size_t>(s)]));
      break;
  }
  return e;
}

}  // namespace

SynthData gen_synthetic(const SynthTaskSpec& spec) { return gen_synthetic(spec, spec.seed); }

SynthData gen_synthetic(const SynthTaskSpec& spec, uint64_t sample_seed) {
  if (spec.labeled < 0 || spec.unlabeled < 0 || spec.dev < 0 || spec.test < 0) {
    throw std::invalid_argument("split sizes must be nonnegative");
  }
  if (spec.min_length < 1 || spec.max_length < spec.min_length) {
    throw std::invalid_argument("invalid sentence length range");
  }
  Rng rng(mix_seed(sample_seed, 0x9e4d));
  std::function<Example()> draw;
  std::unique_ptr<MarkovProcess> markov;
  std::unique_ptr<TreeGrammar> grammar;
  std::vector<int> lexicon;
  SynthData out;
  switch (spec.kind) {
    case SynthKind::kMarkovTagger:
      out.corpus.kind = TaskKind::kTagging;
      markov = std::make_unique<MarkovProcess>(spec.states, spec.vocab, spec.noise, spec.seed);
      draw = [&]() {
        MarkovSample s = markov->sample(rng, spec.min_length, spec.max_length);
        Example e;
        e.tags = MarkovProcess::labels(s, spec.label, spec.states);
        e.words = std::move(s.words);
        return e;
      };
      break;
    case SynthKind::kTreeGrammar:
      out.corpus.kind = TaskKind::kParsing;
      grammar = std::make_unique<TreeGrammar>(spec.states, spec.vocab, spec.relations,
                                              spec.noise, spec.seed);
      draw = [&]() { return grammar->sample(rng, spec.min_length, spec.max_length); };
      break;
    case SynthKind::kTransduction:
      out.corpus.kind = TaskKind::kSeq2Seq;
      if (spec.vocab < 1) throw std::invalid_argument("empty transduction alphabet");
      lexicon = permutation(spec.vocab, mix_seed(spec.seed, 0x1e71));
      draw = [&]() { return transduce(rng, spec, lexicon); };
      break;
  }
  // Resample duplicates so the splits are disjoint by construction.
  std::set<Tokens> seen;
  auto fresh = [&]() {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Example e = draw();
      if (seen.insert(e.words).second) return e;
    }
    throw std::runtime_error("synthetic generator keeps repeating sentences");
  };
  for (int i = 0; i < spec.labeled; ++i) out.corpus.train.push_back(fresh());
  for (int i = 0; i < spec.dev; ++i) out.corpus.dev.push_back(fresh());
  for (int i = 0; i < spec.test; ++i) out.corpus.test.push_back(fresh());
  out.pool.source = "synthetic";
  for (int i = 0; i < spec.unlabeled; ++i) out.pool.sentences.push_back(fresh().words);
  return out;
}

}  // namespace cvt
