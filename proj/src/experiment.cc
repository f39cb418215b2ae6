#include "cvt/experiment.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <type_traits>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace cvt {

namespace {

using boost::property_tree::ptree;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class ValueError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reads one section, remembering which keys were consumed so the leftovers
// can be reported.
class Section {
 public:
  Section(std::string name, const ptree& tree) : name_(std::move(name)), tree_(tree) {}

  bool has(const std::string& key) const { return tree_.find(key) != tree_.not_found(); }

  std::optional<std::string> raw(const std::string& key) {
    used_.insert(key);
    auto it = tree_.find(key);
    if (it == tree_.not_found()) return std::nullopt;
    return trim(it->second.data());
  }

  template <typename T>
  void read(const std::string& key, T& target) {
    if (auto v = raw(key)) target = convert<T>(key, *v);
  }

  void read_path(const std::string& key, std::filesystem::path& target) {
    if (auto v = raw(key)) target = *v;
  }

  std::vector<std::string> unknown() const {
    std::vector<std::string> out;
    for (const auto& [key, child] : tree_) {
      if (!used_.count(key)) out.push_back(name_ + "." + key);
    }
    return out;
  }

 private:
  template <typename T>
  T convert(const std::string& key, const std::string& v) const {
    try {
      if constexpr (std::is_same_v<T, bool>) {
        std::string l = v;
        std::transform(l.begin(), l.end(), l.begin(), ::tolower);
        if (l == "true" || l == "1" || l == "yes" || l == "on") return true;
        if (l == "false" || l == "0" || l == "no" || l == "off") return false;
        throw ValueError("not a boolean");
      } else if constexpr (std::is_same_v<T, std::string>) {
        return v;
      } else if constexpr (std::is_floating_point_v<T>) {
        size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw ValueError("trailing characters");
        return static_cast<T>(d);
      } else {
        size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw ValueError("trailing characters");
        return static_cast<T>(i);
      }
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad value '" + v + "' for " + name_ + "." + key);
    }
  }

  std::string name_;
  const ptree& tree_;
  std::set<std::string> used_;
};

template <typename T>
std::vector<T> to_numbers(const std::string& key, const std::string& value) {
  std::vector<T> out;
  for (const std::string& item : split_list(value)) {
    size_t pos = 0;
    try {
      const unsigned long long n = std::stoull(item, &pos);
      if (pos != item.size()) throw ValueError("trailing characters");
      out.push_back(static_cast<T>(n));
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad list entry '" + item + "' for " + key);
    }
  }
  return out;
}

SynthKind parse_generator(const std::string& name) {
  if (name == "markov") return SynthKind::kMarkovTagger;
  if (name == "tree") return SynthKind::kTreeGrammar;
  if (name == "transduction") return SynthKind::kTransduction;
  throw std::invalid_argument("config: unknown generator '" + name + "'");
}

MarkovLabel parse_markov_label(const std::string& name) {
  if (name == "state") return MarkovLabel::kState;
  if (name == "coarse") return MarkovLabel::kCoarse;
  if (name == "next") return MarkovLabel::kNextState;
  if (name == "previous") return MarkovLabel::kPreviousState;
  throw std::invalid_argument("config: unknown label function '" + name + "'");
}

TransductionRule parse_rule(const std::string& name) {
  if (name == "copy") return TransductionRule::kCopy;
  if (name == "reverse") return TransductionRule::kReverse;
  if (name == "lexicon") return TransductionRule::kLexicon;
  throw std::invalid_argument("config: unknown transduction rule '" + name + "'");
}

TaskConfig parse_task(const std::string& name, Section& s) {
  TaskConfig t;
  t.name = name;
  if (auto v = s.raw("kind")) t.kind = parse_task_kind(*v);
  if (auto v = s.raw("scheme")) {
    if (*v == "plain") {
      t.scheme = TagScheme::kPlain;
    } else if (*v == "bioes") {
      t.scheme = TagScheme::kBioes;
    } else {
      throw std::invalid_argument("config: unknown tag scheme '" + *v + "'");
    }
  }
  s.read("bio_to_bioes", t.bio_to_bioes);
  s.read_path("train", t.train);
  s.read_path("dev", t.dev);
  s.read_path("test", t.test);
  s.read_path("train_source", t.train_source);
  s.read_path("train_target", t.train_target);
  s.read_path("dev_source", t.dev_source);
  s.read_path("dev_target", t.dev_target);
  s.read_path("test_source", t.test_source);
  s.read_path("test_target", t.test_target);
  s.read("sample_stream", t.sample_stream);
  s.read("labeled_fraction", t.labeled_fraction);
  if (s.has("vat_epsilon")) {
    double eps = 0.0;
    s.read("vat_epsilon", eps);
    t.vat_epsilon = eps;
  }
  s.read("weight", t.weight);
  if (auto v = s.raw("ablate_views")) t.ablate_views = split_list(*v);

  if (auto v = s.raw("generator")) {
    SynthTaskSpec spec;
    spec.kind = parse_generator(*v);
    spec.seed = 0;
    s.read("states", spec.states);
    s.read("vocab", spec.vocab);
    s.read("noise", spec.noise);
    s.read("min_length", spec.min_length);
    s.read("max_length", spec.max_length);
    s.read("labeled", spec.labeled);
    s.read("unlabeled", spec.unlabeled);
    s.read("dev_size", spec.dev);
    s.read("test_size", spec.test);
    s.read("data_seed", spec.seed);
    if (auto l = s.raw("label")) spec.label = parse_markov_label(*l);
    s.read("relations", spec.relations);
    if (auto r = s.raw("rule")) spec.rule = parse_rule(*r);
    t.synthetic = spec;
  }
  if (t.labeled_fraction <= 0.0 || t.labeled_fraction > 1.0) {
    throw std::invalid_argument("config: labeled_fraction of " + name + " must be in (0, 1]");
  }
  return t;
}

std::vector<Tokens> words_of(const std::vector<Example>& examples) {
  std::vector<Tokens> out;
  out.reserve(examples.size());
  for (const Example& e : examples) out.push_back(e.words);
  return out;
}

LabeledCorpus load_task_files(const TaskConfig& t) {
  LabeledCorpus c;
  c.kind = t.kind;
  auto tagging = [&](const std::filesystem::path& p) {
    return p.empty() ? std::vector<Example>{} : load_conll_tagging(p, t.bio_to_bioes);
  };
  auto parses = [&](const std::filesystem::path& p) {
    return p.empty() ? std::vector<Example>{} : load_conll_parses(p);
  };
  auto parallel = [&](const std::filesystem::path& s, const std::filesystem::path& g) {
    return s.empty() ? std::vector<Example>{} : load_parallel(s, g);
  };
  switch (t.kind) {
    case TaskKind::kTagging:
      c.train = tagging(t.train);
      c.dev = tagging(t.dev);
      c.test = tagging(t.test);
      break;
    case TaskKind::kParsing:
      c.train = parses(t.train);
      c.dev = parses(t.dev);
      c.test = parses(t.test);
      break;
    case TaskKind::kSeq2Seq:
      c.train = parallel(t.train_source, t.train_target);
      c.dev = parallel(t.dev_source, t.dev_target);
      c.test = parallel(t.test_source, t.test_target);
      break;
  }
  if (c.train.empty()) throw std::invalid_argument("task " + t.name + " has no training data");
  return c;
}

void load_pretrained_encoder(Model& model, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::map<std::string, Matrix> tensors;
  for (NamedTensor& t : read_checkpoint(in)) tensors.emplace(std::move(t.name), std::move(t.value));
  for (Parameter* p : model.store.with_prefix(model.encoder->prefix())) {
    auto it = tensors.find("ema/" + p->name);
    if (it == tensors.end()) it = tensors.find(p->name);
    if (it == tensors.end()) throw std::runtime_error("pretrained checkpoint lacks " + p->name);
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
      throw std::runtime_error("pretrained shape mismatch for " + p->name);
    }
    p->value = it->second;
  }
}

std::filesystem::path seed_path(const std::filesystem::path& base, uint64_t seed, size_t runs) {
  if (runs <= 1 || base.empty()) return base;
  std::filesystem::path p = base;
  p.replace_filename(base.stem().string() + ".seed" + std::to_string(seed) +
                     base.extension().string());
  return p;
}

}  // namespace

ExperimentConfig parse_config(std::istream& in) {
  ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  ExperimentConfig c;
  std::vector<std::string> unknown;
  for (const auto& [section_name, child] : tree) {
    if (child.empty() && !child.data().empty()) {
      unknown.push_back(section_name);
      continue;
    }
    Section s(section_name, child);
    if (section_name == "experiment") {
      s.read("name", c.name);
      if (auto v = s.raw("seeds")) {
        c.seeds = to_numbers<uint64_t>("experiment.seeds", *v);
        if (c.seeds.empty()) throw std::invalid_argument("config: seeds is empty");
      }
      s.read("steps", c.steps);
      s.read("eval_every", c.eval_every);
      s.read("eval_train", c.eval_train);
      s.read("return_unused_labels", c.return_unused_labels);
      s.read("dedupe", c.dedupe);
      s.read("min_count", c.min_count);
      s.read_path("unlabeled", c.unlabeled);
      s.read("unlabeled_limit", c.unlabeled_limit);
      s.read_path("embeddings", c.embeddings);
      s.read_path("metrics_out", c.metrics_out);
      s.read_path("checkpoint_dir", c.checkpoint_dir);
      s.read("resume", c.resume);
      s.read("freeze_encoder", c.freeze_encoder);
      s.read_path("pretrained", c.pretrained);
    } else if (section_name == "encoder") {
      EncoderConfig& e = c.encoder;
      s.read("word_dim", e.word_dim);
      s.read("char_dim", e.char_dim);
      if (auto v = s.raw("char_widths")) e.char_widths = to_numbers<int>("encoder.char_widths", *v);
      s.read("char_filters", e.char_filters);
      s.read("lstm1", e.lstm1);
      s.read("lstm2", e.lstm2);
      s.read("projection", e.projection);
    } else if (section_name == "heads") {
      HeadConfig& h = c.heads;
      s.read("tagging_hidden", h.tagging_hidden);
      s.read("parser_mlp", h.parser_mlp);
      s.read("label_smoothing", h.label_smoothing);
      s.read("target_unk_threshold", h.target_unk_threshold);
      s.read("decoder_embedding", h.seq2seq.embedding_dim);
      s.read("decoder_hidden", h.seq2seq.hidden);
      s.read("attention_dim", h.seq2seq.attention_dim);
      s.read("attention_dropout", h.seq2seq.attention_dropout);
      s.read("beam_label_smoothing", h.seq2seq.label_smoothing);
      s.read("beam_width", h.seq2seq.beam_width);
      s.read("max_decode_length", h.seq2seq.max_length);
    } else if (section_name == "training") {
      TrainerConfig& t = c.trainer;
      s.read("batch_size", t.batch_size);
      s.read("unlabeled_batch_size", t.unlabeled_batch_size);
      s.read("momentum", t.momentum);
      s.read("lr_base", t.schedule.base);
      s.read("lr_decay", t.schedule.decay);
      s.read("grad_clip", t.grad_clip);
      s.read("ema", t.ema);
      s.read("dropout_labeled", t.dropout_labeled);
      s.read("dropout_unlabeled", t.dropout_unlabeled);
      s.read("ratio_labeled", t.ratio_labeled);
      s.read("ratio_unlabeled", t.ratio_unlabeled);
      if (auto v = s.raw("cvt")) t.cvt = parse_cvt_mode(*v);
      if (auto v = s.raw("baseline")) t.baseline = parse_baseline(*v);
      s.read("word_dropout", t.word_dropout);
      s.read("max_unlabeled_length", t.max_unlabeled_length);
      if (auto v = s.raw("precision")) {
        if (*v == "float32") {
          t.precision = Precision::kFloat32;
        } else if (*v == "float64") {
          t.precision = Precision::kFloat64;
        } else {
          throw std::invalid_argument("config: precision must be float32 or float64");
        }
      }
    } else if (section_name.rfind("task.", 0) == 0 && section_name.size() > 5) {
      c.tasks.push_back(parse_task(section_name.substr(5), s));
    } else {
      unknown.push_back("[" + section_name + "]");
      continue;
    }
    for (std::string& k : s.unknown()) unknown.push_back(std::move(k));
  }
  if (!unknown.empty()) {
    std::string msg = "config: unknown keys:";
    for (const std::string& k : unknown) msg += " " + k;
    throw std::invalid_argument(msg);
  }
  if (c.tasks.empty()) throw std::invalid_argument("config: no [task.NAME] section");
  if (c.steps < 0 || c.eval_every <= 0) {
    throw std::invalid_argument("config: steps must be >= 0 and eval_every > 0");
  }
  c.encoder.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_config(in);
}

ExperimentData load_data(const ExperimentConfig& config, uint64_t seed) {
  ExperimentData data;
  std::vector<Tokens> pool;
  for (size_t k = 0; k < config.tasks.size(); ++k) {
    const TaskConfig& t = config.tasks[k];
    LabeledCorpus corpus;
    if (t.synthetic) {
      SynthTaskSpec spec = *t.synthetic;
      if (spec.seed == 0) spec.seed = seed;
      SynthData synth = gen_synthetic(
          spec, t.sample_stream != 0 ? mix_seed(seed, t.sample_stream) : seed);
      if ((spec.kind == SynthKind::kTransduction) != (t.kind == TaskKind::kSeq2Seq) ||
          (spec.kind == SynthKind::kTreeGrammar) != (t.kind == TaskKind::kParsing)) {
        throw std::invalid_argument("task " + t.name + ": generator does not match its kind");
      }
      corpus = std::move(synth.corpus);
      pool.insert(pool.end(), synth.pool.sentences.begin(), synth.pool.sentences.end());
    } else {
      corpus = load_task_files(t);
    }
    if (t.labeled_fraction < 1.0) {
      UnlabeledPool returned;
      corpus.train = subsample_labeled(corpus.train, t.labeled_fraction, mix_seed(seed, k),
                                       config.return_unused_labels ? &returned : nullptr);
      pool.insert(pool.end(), returned.sentences.begin(), returned.sentences.end());
    }
    data.corpora.push_back(std::move(corpus));
  }
  if (config.dedupe) {
    std::vector<NamedCorpus> registry;
    for (size_t k = 0; k < config.tasks.size(); ++k) {
      registry.push_back({config.tasks[k].name, &data.corpora[k]});
    }
    data.deduplicated = dedupe_splits(registry);
  }
  if (!config.unlabeled.empty()) {
    UnlabeledPool file = load_unlabeled(config.unlabeled);
    size_t n = file.sentences.size();
    if (config.unlabeled_limit > 0) n = std::min(n, static_cast<size_t>(config.unlabeled_limit));
    pool.insert(pool.end(), file.sentences.begin(), file.sentences.begin() + static_cast<long>(n));
  }
  std::set<Tokens> seen;
  data.pool.source = config.unlabeled.empty() ? "synthetic" : config.unlabeled.string();
  for (Tokens& s : pool) {
    if (seen.insert(s).second) data.pool.sentences.push_back(std::move(s));
  }
  return data;
}

std::unique_ptr<Model> build_model(const ExperimentConfig& config, const ExperimentData& data,
                                   uint64_t seed) {
  auto model = std::make_unique<Model>();
  std::vector<std::vector<Tokens>> corpora;
  for (const LabeledCorpus& c : data.corpora) corpora.push_back(words_of(c.train));
  corpora.push_back(data.pool.sentences);
  model->vocab = build_vocab(corpora, config.min_count);
  Rng rng(mix_seed(seed, 0x6d6f64));
  model->encoder = std::make_unique<Encoder>(config.encoder, model->vocab.size(),
                                             model->vocab.char_size(), model->store, rng);
  if (!config.embeddings.empty()) {
    std::ifstream in(config.embeddings);
    if (!in) throw std::runtime_error("cannot open " + config.embeddings.string());
    model->encoder->load_embeddings(in, model->vocab);
  }
  for (size_t k = 0; k < config.tasks.size(); ++k) {
    const TaskConfig& t = config.tasks[k];
    const LabeledCorpus& corpus = data.corpora[k];
    std::unique_ptr<Task> task;
    switch (t.kind) {
      case TaskKind::kTagging:
        task = std::make_unique<TaggingTask>(t.name, corpus, t.scheme, model->vocab,
                                             config.encoder, config.heads, model->store, rng);
        break;
      case TaskKind::kParsing:
        task = std::make_unique<ParsingTask>(t.name, corpus, model->vocab, config.encoder,
                                             config.heads, model->store, rng);
        break;
      case TaskKind::kSeq2Seq:
        task = std::make_unique<Seq2SeqTask>(t.name, corpus, model->vocab, config.encoder,
                                             config.heads, model->store, rng);
        break;
    }
    if (t.vat_epsilon) task->vat_epsilon = *t.vat_epsilon;
    if (!t.ablate_views.empty()) task->ablate(t.ablate_views);
    model->tasks.push_back(std::move(task));
  }
  return model;
}

SeedResult run_seed(const ExperimentConfig& config, uint64_t seed) {
  SeedResult result;
  result.seed = seed;
  const ExperimentData data = load_data(config, seed);
  std::unique_ptr<Model> model = build_model(config, data, seed);
  TrainerConfig tc = config.trainer;
  tc.seed = seed;
  tc.task_weights.clear();
  for (const TaskConfig& t : config.tasks) tc.task_weights.push_back(t.weight);

  const std::filesystem::path metrics = seed_path(config.metrics_out, seed, config.seeds.size());
  if (config.freeze_encoder) {
    if (!config.pretrained.empty()) load_pretrained_encoder(*model, config.pretrained);
    for (auto& task : model->tasks) {
      FrozenHeadResult r = train_frozen_head(*model, *task, tc, config.steps);
      if (!r.losses.empty()) {
        result.log.add({config.steps, task->name(), "train", "supervised_loss", r.losses.back()});
      }
      for (const Metric& m : r.dev) {
        result.log.add({config.steps, task->name(), "dev", m.name, m.value});
      }
      result.dev[task->name()] = r.dev;
    }
  } else {
    Trainer trainer(*model, tc, data.pool);
    std::filesystem::path checkpoint;
    if (!config.checkpoint_dir.empty()) {
      checkpoint = config.checkpoint_dir / ("seed" + std::to_string(seed)) / "latest.ckpt";
    }
    if (config.resume && !checkpoint.empty() && std::filesystem::exists(checkpoint)) {
      trainer.load(checkpoint);
      if (!metrics.empty() && std::filesystem::exists(metrics)) {
        std::ifstream in(metrics);
        for (MetricRecord& r : MetricLog::read(in)) {
          if (r.step <= trainer.t()) result.log.add(std::move(r));
        }
      }
    }
    while (trainer.t() < config.steps) {
      const int64_t next =
          std::min(config.steps, (trainer.t() / config.eval_every + 1) * config.eval_every);
      trainer.train(next, config.eval_every, &result.log, config.eval_train);
      if (!checkpoint.empty()) trainer.save(checkpoint);
    }
    for (const auto& task : model->tasks) {
      std::vector<Metric> dev;
      for (const MetricRecord& r : result.log.records()) {
        if (r.step == trainer.t() && r.task == task->name() && r.split == "dev") {
          dev.push_back({r.metric, r.value});
        }
      }
      result.dev[task->name()] = dev;
    }
  }
  if (!metrics.empty()) {
    if (metrics.has_parent_path()) std::filesystem::create_directories(metrics.parent_path());
    std::ofstream out(metrics);
    if (!out) throw std::runtime_error("cannot write " + metrics.string());
    result.log.write(out);
  }
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  ExperimentResult result;
  for (uint64_t seed : config.seeds) result.runs.push_back(run_seed(config, seed));
  result.summary = summarize(result.runs);
  return result;
}

double mean(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double sample_sd(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  const double m = mean(values);
  double s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(values.size() - 1));
}

std::vector<SummaryRow> summarize(const std::vector<SeedResult>& runs) {
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<double>> values;
  for (const SeedResult& run : runs) {
    for (const auto& [task, metrics] : run.dev) {
      for (const Metric& m : metrics) {
        auto key = std::make_pair(task, m.name);
        if (!values.count(key)) order.push_back(key);
        values[key].push_back(m.value);
      }
    }
  }
  std::vector<SummaryRow> rows;
  for (const auto& key : order) {
    const std::vector<double>& v = values[key];
    rows.push_back({key.first, key.second, mean(v), sample_sd(v), static_cast<int>(v.size())});
  }
  return rows;
}

void print_summary(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << std::left << std::setw(16) << "task" << std::setw(20) << "metric" << std::right
      << std::setw(10) << "mean" << std::setw(10) << "sd" << std::setw(6) << "runs" << '\n';
  out << std::fixed << std::setprecision(2);
  for (const SummaryRow& r : rows) {
    out << std::left << std::setw(16) << r.task << std::setw(20) << r.metric << std::right
        << std::setw(10) << r.mean << std::setw(10) << r.sd << std::setw(6) << r.runs << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

}  // namespace cvt
