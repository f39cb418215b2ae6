#include <gtest/gtest.h>

#include <cmath>

#include "cvt/seq2seq.h"
#include "support/fixtures.h"

namespace cvt {
namespace {

using testing::bitwise_equal;
using testing::random_encoder_output;
using testing::random_matrix;
using testing::randomize;
using testing::tiny_encoder_config;

Seq2SeqConfig small_config() {
  Seq2SeqConfig c;
  c.target_vocab = 7;
  c.embedding_dim = 4;
  c.hidden = 5;
  c.attention_dim = 4;
  c.max_length = 6;
  return c;
}

class DecoderTest : public ::testing::Test {
 protected:
  DecoderTest() : head("mt", encoder, small_config(), store, rng) {}
  EncoderConfig encoder = tiny_encoder_config();
  ParameterStore store;
  Rng rng{1};
  Seq2SeqHead head;
  static constexpr int kSourceDim = 6;  // both second-layer directions
};

TEST(Seq2SeqConfig, Validation) {
  Seq2SeqConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.eos = 7;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.attention_dropout = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(parse_decoder_kind(decoder_kind_name(DecoderKind::kFuture)), DecoderKind::kFuture);
  EXPECT_THROW(parse_decoder_kind("sideways"), std::invalid_argument);
}

TEST(Seq2SeqTargets, SmoothedExample) {
  const std::vector<int> gold = {2};
  const Matrix t = smoothed_targets(gold, 5, 0.1);
  const double expected[] = {0.02, 0.02, 0.92, 0.02, 0.02};
  for (int k = 0; k < 5; ++k) EXPECT_NEAR(t(0, k), expected[k], 1e-15);
}

TEST_F(DecoderTest, SingleSourceStateGetsAllAttention) {
  Graph g;
  Expr source = g.constant(random_matrix(rng, 1, kSourceDim));
  Expr hbar = g.constant(random_matrix(rng, 3, 5));
  const Attention a = head.attend(g, source, hbar, DecoderKind::kPrimary);
  EXPECT_TRUE(bitwise_equal(a.weights.value(), Matrix::Ones(3, 1)));
}

TEST_F(DecoderTest, ZeroBilinearGivesUniformAttention) {
  head.parameters(DecoderKind::kPrimary)[0]->value.setZero();
  Graph g;
  Expr source = g.constant(random_matrix(rng, 4, kSourceDim));
  Expr hbar = g.constant(random_matrix(rng, 2, 5));
  const Attention a = head.attend(g, source, hbar, DecoderKind::kPrimary);
  EXPECT_LT((a.weights.value().array() - 0.25).abs().maxCoeff(), 1e-15);
}

TEST_F(DecoderTest, AttentionDropoutNormalizesAndZeroRateIsIdentity) {
  Graph g;
  Expr source = g.constant(random_matrix(rng, 6, kSourceDim));
  Expr hbar = g.constant(random_matrix(rng, 40, 5));
  const Attention plain = head.attend(g, source, hbar, DecoderKind::kAttentionDropout);
  Rng drop(2);
  const Attention zero = head.attend(g, source, hbar, DecoderKind::kAttentionDropout, 0.0, &drop);
  EXPECT_TRUE(bitwise_equal(plain.weights.value(), zero.weights.value()));
  for (double rate : {0.3, 0.5, 0.9}) {
    const Attention d = head.attend(g, source, hbar, DecoderKind::kAttentionDropout, rate, &drop);
    const Matrix w = d.weights.value();
    EXPECT_LT((w.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
    EXPECT_GT((w.array() == 0.0).count(), 0);
  }
  EXPECT_THROW(head.attend(g, source, hbar, DecoderKind::kPrimary, 0.5, nullptr),
               std::invalid_argument);
}

TEST_F(DecoderTest, StepDistributionsNormalized) {
  Graph g;
  Expr source = g.constant(random_matrix(rng, 3, kSourceDim));
  for (DecoderKind kind :
       {DecoderKind::kPrimary, DecoderKind::kAttentionDropout, DecoderKind::kFuture}) {
    DecoderState state = head.start(g);
    for (int y : {3, 1, 5}) {
      const Matrix p = softmax(head.decode_step(g, source, state, y, kind).value());
      EXPECT_NEAR(p.sum(), 1.0, 1e-6);
    }
    EXPECT_EQ(state.prefix, (std::vector<int>{3, 1, 5}));
  }
  DecoderState state = head.start(g);
  head.decode_step(g, source, state, 4, DecoderKind::kPrimary);
  EXPECT_TRUE(state.finished);
  EXPECT_THROW(head.decode_step(g, source, state, 1, DecoderKind::kPrimary), std::logic_error);
}

TEST_F(DecoderTest, FutureDecoderLagsOneStep) {
  Graph g;
  Expr source = g.constant(random_matrix(rng, 3, kSourceDim));
  const std::vector<int> a = {1, 2, 5, 6};
  for (size_t k = 0; k < a.size(); ++k) {
    std::vector<int> b = a;
    b[k] = b[k] == 0 ? 1 : 0;
    const Matrix fa = head.teacher_forced_logits(g, source, a, DecoderKind::kFuture).value();
    const Matrix fb = head.teacher_forced_logits(g, source, b, DecoderKind::kFuture).value();
    const Matrix pa = head.teacher_forced_logits(g, source, a, DecoderKind::kPrimary).value();
    const Matrix pb = head.teacher_forced_logits(g, source, b, DecoderKind::kPrimary).value();
    ASSERT_EQ(fa.rows(), 4);
    ASSERT_EQ(pa.rows(), 5);
    const int same = static_cast<int>(k) + 1;
    // Row s of the future decoder predicts y[s + 1] without having read y[s].
    EXPECT_TRUE(bitwise_equal(fa.topRows(same), fb.topRows(same)));
    EXPECT_TRUE(bitwise_equal(pa.topRows(same), pb.topRows(same)));
    EXPECT_FALSE(bitwise_equal(pa.row(same), pb.row(same)));
  }
}

TEST_F(DecoderTest, GradCheckThroughDecodeSteps) {
  randomize(store, rng, 0.5);
  const Matrix source = random_matrix(rng, 3, kSourceDim);
  const Matrix w = random_matrix(rng, 1, 7);
  for (DecoderKind kind :
       {DecoderKind::kPrimary, DecoderKind::kAttentionDropout, DecoderKind::kFuture}) {
    const auto loss = [&](Graph& g) {
      DecoderState state = head.start(g);
      Expr src = g.constant(source);
      head.decode_step(g, src, state, 3, kind);
      Expr logits = head.decode_step(g, src, state, 2, kind);
      return sum(cwise_mul(log_softmax(logits), g.constant(w)));
    };
    std::vector<Parameter*> params = head.shared_parameters();
    for (Parameter* p : head.parameters(kind)) params.push_back(p);
    const GradCheckResult r = grad_check(loss, params);
    EXPECT_LT(r.max_relative_error, 1e-4) << decoder_kind_name(kind) << " " << r.worst_parameter;
  }
}

TEST_F(DecoderTest, ParameterSharing) {
  Graph g;
  const Matrix source = random_matrix(rng, 3, kSourceDim);
  const std::vector<int> target = {1, 2, 5};
  const auto outputs = [&] {
    std::vector<Matrix> out;
    for (DecoderKind kind :
         {DecoderKind::kPrimary, DecoderKind::kAttentionDropout, DecoderKind::kFuture}) {
      out.push_back(
          head.teacher_forced_logits(g, g.constant(source), target, kind).value());
    }
    return out;
  };
  const std::vector<Matrix> before = outputs();
  head.lstm().weights().value(0, 0) += 0.5;
  const std::vector<Matrix> shared = outputs();
  for (int k = 0; k < 3; ++k) EXPECT_FALSE(bitwise_equal(before[k], shared[k])) << k;
  head.parameters(DecoderKind::kPrimary)[2]->value(0, 0) += 0.5;
  const std::vector<Matrix> own = outputs();
  EXPECT_FALSE(bitwise_equal(shared[0], own[0]));
  EXPECT_TRUE(bitwise_equal(shared[1], own[1]));
  EXPECT_TRUE(bitwise_equal(shared[2], own[2]));
}

TEST_F(DecoderTest, WidthOneIsGreedy) {
  for (int trial = 0; trial < 20; ++trial) {
    randomize(store, rng, 1.0);
    const Matrix source = random_matrix(rng, 1 + rng.uniform_int(4), kSourceDim);
    const BeamResult beam = head.beam_search(source, 1, 6);
    const BeamResult greedy = head.greedy(source, 6);
    EXPECT_EQ(beam.tokens, greedy.tokens);
    EXPECT_EQ(beam.terminated, greedy.terminated);
    EXPECT_DOUBLE_EQ(beam.score, greedy.score);
  }
  EXPECT_THROW(head.beam_search(random_matrix(rng, 2, kSourceDim), 0, 6), std::invalid_argument);
}

TEST_F(DecoderTest, DominantSequenceWinsAtEveryWidth) {
  // A hand-wired decoder: the previous token lights one LSTM unit, which
  // saturates one attention unit, which votes for the next token of the
  // chain BOS -> 1 -> 2 -> EOS.
  for (Parameter* p : store.parameters()) p->value.setZero();
  const int h = 5;
  Parameter& embedding = store.get("mt/embedding");
  embedding.value(3, 0) = 1.0;
  embedding.value(1, 1) = 1.0;
  embedding.value(2, 2) = 1.0;
  Matrix& w = head.lstm().weights().value;
  Matrix& b = head.lstm().bias().value;
  b.leftCols(h).setConstant(20.0);          // input gate open
  b.middleCols(h, h).setConstant(-20.0);    // forget gate closed
  b.middleCols(2 * h, h).setConstant(20.0); // output gate open
  for (int j = 0; j < 3; ++j) w(j, 3 * h + j) = 20.0;
  Parameter* w_a = head.parameters(DecoderKind::kPrimary)[1];
  Parameter* w_s = head.parameters(DecoderKind::kPrimary)[2];
  for (int j = 0; j < 3; ++j) w_a->value(kSourceDim + j, j) = 10.0;
  w_s->value(0, 1) = 10.0;
  w_s->value(1, 2) = 10.0;
  w_s->value(2, 4) = 10.0;
  const Matrix source = random_matrix(rng, 3, kSourceDim);
  for (int width : {1, 2, 3, 5, 10, 50}) {
    const BeamResult r = head.beam_search(source, width, 6);
    EXPECT_EQ(r.tokens, (std::vector<int>{1, 2})) << width;
    EXPECT_TRUE(r.terminated);
  }
  const BeamResult a = head.beam_search(source, 4, 6);
  const BeamResult c = head.beam_search(source, 4, 6);
  EXPECT_EQ(a.tokens, c.tokens);
  EXPECT_EQ(a.score, c.score);
}

TEST_F(DecoderTest, WiderBeamNeverScoresLower) {
  int compared = 0;
  for (int trial = 0; trial < 40; ++trial) {
    randomize(store, rng, 1.0);
    const Matrix source = random_matrix(rng, 2, kSourceDim);
    double previous = -1e300;
    for (int width = 1; width <= 8; ++width) {
      const BeamResult r = head.beam_search(source, width, 4);
      if (!r.terminated) continue;
      EXPECT_GE(r.score, previous - 1e-12) << "trial " << trial << " width " << width;
      previous = r.score;
      ++compared;
    }
  }
  EXPECT_GT(compared, 0);
}

TEST_F(DecoderTest, CvtLossTrainsOnlyAuxiliaryDecoders) {
  randomize(store, rng, 0.5);
  Graph g;
  const EncoderOutput enc = random_encoder_output(g, rng, encoder, {3, 2});
  const std::vector<std::vector<int>> beams = {{1, 2}, {}};
  Rng drop(3);
  store.zero_grad();
  Expr loss = head.cvt_loss(g, beams, enc, kDecoderAuxKinds, drop);
  EXPECT_GT(loss.scalar(), 0.0);
  g.backward(loss);
  for (Parameter* p : head.parameters(DecoderKind::kPrimary)) {
    EXPECT_EQ(p->grad.cwiseAbs().maxCoeff(), 0.0) << p->name;
  }
  for (DecoderKind kind : kDecoderAuxKinds) {
    double norm = 0.0;
    for (Parameter* p : head.parameters(kind)) norm += p->grad.norm();
    EXPECT_GT(norm, 0.0);
  }
  const std::vector<std::vector<int>> none = {{}, {}};
  EXPECT_EQ(head.cvt_loss(g, none, enc, kDecoderAuxKinds, drop).scalar(), 0.0);
  const std::array<DecoderKind, 1> primary = {DecoderKind::kPrimary};
  EXPECT_THROW(head.cvt_loss(g, beams, enc, primary, drop), std::invalid_argument);
}

TEST_F(DecoderTest, StudentLossBoundedBySmoothedEntropy) {
  // Cross-entropy against the smoothed target is minimized, at its entropy,
  // by a student that predicts the target exactly.
  const double eps = 0.1;
  const int k = 7;
  const double high = 1.0 - eps + eps / k, low = eps / k;
  const double entropy = -(high * std::log(high) + (k - 1) * low * std::log(low));
  Graph g;
  const EncoderOutput enc = random_encoder_output(g, rng, encoder, {2});
  const std::vector<std::vector<int>> beams = {{5, 1}};
  const std::array<DecoderKind, 1> future = {DecoderKind::kFuture};
  Rng drop(4);
  head.parameters(DecoderKind::kFuture)[2]->value.setZero();
  EXPECT_NEAR(head.cvt_loss(g, beams, enc, future, drop).scalar(), std::log(7.0), 1e-12);
  for (int trial = 0; trial < 20; ++trial) {
    randomize(store, rng, 2.0);
    EXPECT_GT(head.cvt_loss(g, beams, enc, kDecoderAuxKinds, drop).scalar(), 2 * entropy);
  }
}

TEST(Bleu, Examples) {
  const std::vector<std::vector<int>> ref = {{1, 2, 3, 4, 5, 6}};
  EXPECT_NEAR(bleu(ref, ref), 100.0, 1e-9);
  const std::vector<std::vector<int>> none = {{7, 8, 9, 10}};
  EXPECT_EQ(bleu(none, ref), 0.0);
  // Same 4-gram precisions but half the length: brevity penalty exp(1 - 2).
  const std::vector<std::vector<int>> refs2 = {{1, 2, 3, 4, 5, 6, 7, 8}};
  const std::vector<std::vector<int>> hyp2 = {{1, 2, 3, 4}};
  EXPECT_NEAR(bleu(hyp2, refs2), 100.0 * std::exp(1.0 - 2.0), 1e-9);
  EXPECT_EQ(exact_match(ref, ref), 100.0);
  const std::vector<std::vector<int>> two = {{1}, {2}};
  const std::vector<std::vector<int>> two_ref = {{1}, {3}};
  EXPECT_EQ(exact_match(two, two_ref), 50.0);
  EXPECT_THROW(bleu(two, ref), std::invalid_argument);
}

}  // namespace
}  // namespace cvt
