#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "nanonet/checkpoint.hpp"
#include "nanonet/error.hpp"
#include "support/test_support.hpp"

namespace nanonet {
namespace {

using testing::brute_force_allowed;
using testing::random_sequences;
using testing::tiny_config;

TEST(Tokenize, PrependsClsAndTruncates) {
  EXPECT_EQ(tokenize("ab", 10), (std::vector<int>{kClsToken, 'a', 'b'}));
  EXPECT_EQ(tokenize("abcdef", 3), (std::vector<int>{kClsToken, 'a', 'b'}));
  EXPECT_EQ(tokenize("", 4), (std::vector<int>{kClsToken}));
  EXPECT_EQ(tokenize("\xC3\xA9", 8)[1], 0xC3);
}

TEST(Schedule, GlobalEveryThirdLayerStartingAtZero) {
  const auto s = make_schedule(7, 3);
  const AttentionType G = AttentionType::global, L = AttentionType::local;
  const std::vector<AttentionType> expected{G, L, L, G, L, L, G};
  for (std::size_t l = 0; l < 7; ++l) EXPECT_EQ(s[l].type, expected[l]) << l;
  EXPECT_EQ(s[0].rope_theta, 160000.0);
  EXPECT_EQ(s[1].rope_theta, 10000.0);
  EXPECT_EQ(s[1].window, 128u);
  EXPECT_THROW(make_schedule(3, 0), ConfigError);
}

TEST(Pack, OffsetsPositionsAndRoundTrip) {
  const std::vector<std::vector<int>> seqs{{1, 2, 3}, {4}, {5, 6}};
  const auto b = pack_sequences(seqs, std::vector<int>{0, 1, 0});
  EXPECT_EQ(b.cu_seqlens, (std::vector<std::size_t>{0, 3, 4, 6}));
  EXPECT_EQ(b.positions, (std::vector<std::size_t>{0, 1, 2, 0, 0, 1}));
  EXPECT_EQ(b.block_offsets(), (std::vector<std::size_t>{0, 9, 10, 14}));
  EXPECT_EQ(b.unpack(), seqs);
  EXPECT_THROW(pack_sequences({{1}, {}}), ValidationError);
  EXPECT_THROW(pack_sequences({{1}}, std::vector<int>{0, 1}), ValidationError);
}

TEST(Pack, RandomRoundTrip) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const auto seqs = random_sequences(rng, 1, 8, 1, 64, kByteVocabSize);
    EXPECT_EQ(pack_sequences(seqs).unpack(), seqs);
  }
}

TEST(Mask, AgreesWithBruteForcePredicate) {
  std::mt19937_64 rng(21);
  const std::size_t windows[] = {1, 2, 5, 17, 128};
  for (int trial = 0; trial < 150; ++trial) {
    const auto seqs = random_sequences(rng, 1, 6, 1, trial % 3 == 0 ? 150 : 20, 10);
    const auto batch = pack_sequences(seqs);
    const AttentionKind kind =
        trial % 2 ? AttentionKind::global() : AttentionKind::local(windows[static_cast<std::size_t>(trial / 2) % 5]);
    const auto mask = build_mask(batch, kind);
    const std::size_t t = batch.total_tokens();
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) {
        const bool allowed = mask.at(i, j) == 0.0;
        ASSERT_EQ(allowed, brute_force_allowed(batch, kind, i, j)) << "trial " << trial << " (" << i << "," << j << ")";
        if (!allowed) ASSERT_TRUE(std::isinf(mask.at(i, j)) && mask.at(i, j) < 0);
      }
  }
}

TEST(Mask, Window128WithShortSequencesEqualsGlobal) {
  const auto batch = pack_sequences({std::vector<int>(40, 1), std::vector<int>(7, 2)});
  const auto g = build_mask(batch, AttentionKind::global());
  const auto l = build_mask(batch, AttentionKind::local(128));
  for (std::size_t i = 0; i < g.numel(); ++i) EXPECT_EQ(g.data()[i], l.data()[i]);
}

TEST(Mask, LocalWindowIsSymmetricAndStrict) {
  const auto kind = AttentionKind::local(3);
  EXPECT_TRUE(kind.allows(5, 3));
  EXPECT_TRUE(kind.allows(3, 5));
  EXPECT_FALSE(kind.allows(6, 3));
  EXPECT_TRUE(kind.allows(4, 4));
}

TEST(Rope, PreservesRowNorms) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 1 + rng() % 10;
    const auto x = testing::random_matrix(t, 8, rng);
    std::vector<std::size_t> pos(t);
    for (auto& p : pos) p = rng() % 5000;
    const auto y = rope_apply(x, pos, trial % 2 ? 10000.0 : 160000.0, 4);
    for (std::size_t r = 0; r < t; ++r) {
      double nx = 0, ny = 0;
      for (std::size_t c = 0; c < 8; ++c) {
        nx += x.at(r, c) * x.at(r, c);
        ny += y.at(r, c) * y.at(r, c);
      }
      EXPECT_NEAR(std::sqrt(nx), std::sqrt(ny), 1e-12);
    }
  }
}

TEST(Rope, ScoresDependOnlyOnRelativeOffset) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto q = testing::random_matrix(1, 8, rng), k = testing::random_matrix(1, 8, rng);
    const std::size_t i = rng() % 200, j = rng() % 200, shift = rng() % 1000;
    auto score = [&](std::size_t pi, std::size_t pj) {
      const std::vector<std::size_t> a{pi}, b{pj};
      const auto rq = rope_apply(q, a, 10000.0, 4), rk = rope_apply(k, b, 10000.0, 4);
      double s = 0;
      for (std::size_t c = 0; c < 8; ++c) s += rq.at(0, c) * rk.at(0, c);
      return s;
    };
    EXPECT_NEAR(score(i, j), score(i + shift, j + shift), 1e-9);
  }
}

TEST(Rope, PositionZeroIsIdentityAndOddHeadDimRejected) {
  const auto x = Tensor::matrix({{1.0, 2.0, 3.0, 4.0}});
  const std::vector<std::size_t> zero{0};
  const auto y = rope_apply(x, zero, 10000.0);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(0, c), x.at(0, c));
  EXPECT_THROW(rope_apply(Tensor::zeros({1, 6}), zero, 10000.0, 3), ConfigError);
}

TEST(Attention, ExpandedProbsAreRowStochasticOverAllowedKeys) {
  std::mt19937_64 rng(8);
  const auto batch = pack_sequences(random_sequences(rng, 2, 4, 1, 12, 10));
  const std::size_t t = batch.total_tokens();
  const auto q = testing::random_matrix(t, 8, rng), k = testing::random_matrix(t, 8, rng);
  const auto kind = AttentionKind::local(3);
  const auto probs = attention_probs(q, k, batch, kind, 2);
  const auto mask = build_mask(batch, kind);
  for (std::size_t h = 0; h < 2; ++h) {
    const auto dense = expand_attention(probs, batch, h);
    for (std::size_t i = 0; i < t; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < t; ++j) {
        if (mask.at(i, j) != 0.0) EXPECT_EQ(dense.at(i, j), 0.0);
        row += dense.at(i, j);
      }
      EXPECT_NEAR(row, 1.0, 1e-12);
    }
  }
}

TEST(Attention, PackedProbsMatchDenseMaskedSoftmax) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto batch = pack_sequences(random_sequences(rng, 1, 4, 1, 10, 10));
    const std::size_t t = batch.total_tokens();
    const auto q = testing::random_matrix(t, 4, rng), k = testing::random_matrix(t, 4, rng);
    const auto kind = trial % 2 ? AttentionKind::global() : AttentionKind::local(2);
    const auto dense = softmax_rows(add(scale(matmul(q, transpose(k)), 0.5), build_mask(batch, kind)));
    const auto packed = expand_attention(attention_probs(q, k, batch, kind, 1), batch, 0);
    for (std::size_t i = 0; i < t * t; ++i) EXPECT_NEAR(packed.data()[i], dense.data()[i], 1e-14);
  }
}

TEST(Encoder, ForwardShapesAndTraceLayout) {
  Encoder model(tiny_config(3), 1);
  const auto batch = pack_sequences({tokenize("hello", 64), tokenize("hi", 64)});
  const auto trace = forward(model, batch);
  ASSERT_EQ(trace.hidden_states.size(), 3u);
  ASSERT_EQ(trace.attention_probs.size(), 2u);
  EXPECT_EQ(trace.logits.shape(), (Shape{2, 3}));
  EXPECT_EQ(trace.hidden_states[2].shape(), (Shape{9, 8}));
  EXPECT_EQ(trace.attention_probs[0].shape(), (Shape{2, 36 + 9}));
  EXPECT_EQ(trace.kinds[0].type, AttentionType::global);
  EXPECT_EQ(trace.kinds[1].type, AttentionType::local);
  EXPECT_EQ(trace.cls_hidden(1).shape(), (Shape{2, 8}));
}

TEST(Encoder, RejectsOutOfVocabularyTokens) {
  Encoder model(tiny_config(), 1);
  EXPECT_THROW(forward(model, pack_sequences({{1, 258}})), IndexError);
  EXPECT_THROW(forward(model, pack_sequences({{-1}})), IndexError);
}

TEST(Encoder, ConfigValidation) {
  EncoderConfig c = tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(Encoder(c, 0), ConfigError);
  c = tiny_config();
  c.d_model = 6;  // head dim 3 is odd
  EXPECT_THROW(Encoder(c, 0), ConfigError);
  c = tiny_config();
  c.token_dropout = 1.0;
  EXPECT_THROW(Encoder(c, 0), ConfigError);
}

TEST(Encoder, SameSeedSameWeights) {
  Encoder a(tiny_config(), 5), b(tiny_config(), 5), c(tiny_config(), 6);
  EXPECT_EQ(testing::checksum(a.layers()[1].w_f.value), testing::checksum(b.layers()[1].w_f.value));
  EXPECT_NE(testing::checksum(a.layers()[1].w_f.value), testing::checksum(c.layers()[1].w_f.value));
}

TEST(Encoder, EvalModeIgnoresDropoutAndTrainModeIsSeeded) {
  EncoderConfig cfg = tiny_config();
  cfg.token_dropout = 0.3;
  cfg.hidden_dropout = 0.3;
  Encoder model(cfg, 2);
  const auto batch = pack_sequences({tokenize("dropout check", 64)});
  const auto e1 = forward(model, batch, {false, 1}), e2 = forward(model, batch, {false, 2});
  const auto t1 = forward(model, batch, {true, 7}), t2 = forward(model, batch, {true, 7}), t3 = forward(model, batch, {true, 8});
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(e1.logits.at(0, c), e2.logits.at(0, c));
    EXPECT_EQ(t1.logits.at(0, c), t2.logits.at(0, c));
  }
  bool differs = false;
  for (std::size_t c = 0; c < 4; ++c) differs |= t1.logits.at(0, c) != t3.logits.at(0, c);
  EXPECT_TRUE(differs);
}

TEST(Encoder, PackedForwardMatchesPaddedReference) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const auto cfg = tiny_config(4, trial % 2 == 1, trial % 3 == 0 ? 1 : 2, trial % 2 ? 128 : 1 + rng() % 9);
    Encoder model(cfg, rng());
    const auto seqs = random_sequences(rng, 1, 8, 1, 64, kByteVocabSize);
    const auto trace = forward(model, pack_sequences(seqs));
    const auto ref = testing::padded_forward(model, seqs);
    const auto batch = trace.batch;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      for (std::size_t l = 0; l <= cfg.n_layers; ++l)
        for (std::size_t p = 0; p < seqs[s].size(); ++p)
          for (std::size_t c = 0; c < 8; ++c)
            ASSERT_NEAR(trace.hidden_states[l].at(batch.seq_begin(s) + p, c), ref.hidden[s][l][p * 8 + c], 1e-9);
      for (std::size_t c = 0; c < 4; ++c) ASSERT_NEAR(trace.logits.at(s, c), ref.logits[s][c], 1e-9);
    }
  }
}

TEST(Encoder, BatchCompositionDoesNotChangeASequence) {
  Encoder model(tiny_config(), 3);
  const auto a = tokenize("the same sentence", 64);
  const auto alone = forward(model, pack_sequences({a}));
  const auto mixed = forward(model, pack_sequences({tokenize("other", 64), a, tokenize("x", 64)}));
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(alone.logits.at(0, c), mixed.logits.at(1, c), 1e-12);
}

TEST(Encoder, FullModelGradCheck) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Encoder model(tiny_config(4, seed % 2 == 1), seed);
    std::mt19937_64 rng(seed + 100);
    const auto batch = pack_sequences(random_sequences(rng, 2, 3, 1, 6, kByteVocabSize));
    std::vector<int> labels(batch.n_sequences());
    for (auto& y : labels) y = static_cast<int>(rng() % 4);
    auto loss = [&](const Tensor&) { return cross_entropy(forward(model, batch).logits, labels); };
    for (Param* p : model.params()) {
      const auto report = grad_check(loss, p->value, 1e-5, 1e-4);
      EXPECT_TRUE(report.passed) << p->name << " seed " << seed << " err " << report.max_relative_error;
    }
  }
}

TEST(Encoder, SelectLayersRenamesAndKeepsKinds) {
  EncoderConfig cfg = tiny_config();
  cfg.n_layers = 4;
  cfg.fill_schedule();
  Encoder t(cfg, 1);
  const std::vector<std::size_t> idx{1, 3};
  Encoder s = t.select_layers(idx);
  EXPECT_EQ(s.config().n_layers, 2u);
  EXPECT_EQ(s.layers()[1].kind, t.layers()[3].kind);
  EXPECT_EQ(s.layers()[1].w_q.name, "layers.1.attn.w_q");
  EXPECT_EQ(testing::checksum(s.layers()[1].w_q.value), testing::checksum(t.layers()[3].w_q.value));
  EXPECT_NE(s.layers()[1].w_q.value.node(), t.layers()[3].w_q.value.node());
  const std::vector<std::size_t> bad{4};
  EXPECT_THROW(t.select_layers(bad), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  EncoderConfig cfg = tiny_config(3, true, 2, 17);
  Encoder model(cfg, 11);
  model.head_bias().value.mutable_data()[0] = 0.1 + 0.2;
  model.layers()[0].b_q.value.set_requires_grad(false);
  const auto path = std::filesystem::temp_directory_path() / "nanonet_roundtrip.ckpt";
  save_checkpoint(model, path);
  const Encoder back = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(config_to_json(back.config()), config_to_json(model.config()));
  const auto a = model.params();
  const auto b = back.params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    EXPECT_EQ(a[i]->role, b[i]->role);
    EXPECT_EQ(a[i]->trainable(), b[i]->trainable());
    EXPECT_EQ(a[i]->value.shape(), b[i]->value.shape());
    EXPECT_EQ(testing::checksum(a[i]->value), testing::checksum(b[i]->value)) << a[i]->name;
  }
  const auto batch = pack_sequences({tokenize("round trip", 64)});
  const auto la = forward(model, batch).logits, lb = forward(back, batch).logits;
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(la.at(0, c), lb.at(0, c));
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "nanonet_garbage.ckpt";
  {
    std::ofstream(path) << "not a checkpoint\n";
  }
  EXPECT_THROW(load_checkpoint(path), Error);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

}  // namespace
}  // namespace nanonet
