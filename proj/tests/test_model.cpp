#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "plate/errors.hpp"
#include "plate/kernels.hpp"
#include "plate/model.hpp"
#include "support/finite_difference.hpp"
#include "support/tiny_model.hpp"

using namespace plate;
using plate::testing::random_tokens;
using plate::testing::tiny_config;

namespace {

std::vector<TokenId> with_bos(std::span<const TokenId> y) {
  std::vector<TokenId> out{kBosId};
  out.insert(out.end(), y.begin(), y.end());
  return out;
}

Tensor teacher_forced_logits(const Transformer& model, std::span<const TokenId> doc, std::span<const TokenId> sum,
                             const AttentionTemperatures& temps,
                             std::vector<std::vector<Tensor>>* cross = nullptr) {
  const SequencePair pair{doc, sum};
  const auto batch = pack_batch(std::span<const SequencePair>(&pair, 1), model.config);
  Tape tape;
  ForwardOptions opt;
  opt.temps = temps;
  opt.cross_attention = cross;
  return forward_logits(tape, model, batch, opt).value();
}

std::size_t row_argmax(std::span<const double> r) {
  return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

}  // namespace

TEST(ModelConfig, ValidationAndJsonRoundTrip) {
  ModelConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.ffn_dim = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(AttentionTemperatures, RejectsNonPositive) {
  EXPECT_THROW((AttentionTemperatures{1.0, 0.0, 1.0}.validate()), std::invalid_argument);
  EXPECT_THROW((AttentionTemperatures{-1.0, 1.0, 1.0}.validate()), std::invalid_argument);
  EXPECT_NO_THROW(AttentionTemperatures::uniform(2.0).validate());
}

TEST(Encode, ShapeDeterminismAndTemperatureEffect) {
  ModelConfig c = tiny_config();
  c.d_model = 4;
  c.n_heads = 1;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  const auto model = Transformer::create(c, 1);
  const std::vector<TokenId> doc{7, 9};  // EOS appended -> length 3
  const Tensor a = encode(doc, model, {});
  EXPECT_EQ(a.shape(), (Shape{3, 4}));
  EXPECT_EQ(encode(doc, model, {}), a);
  const Tensor hot = encode(doc, model, {2.0, 1.0, 1.0});
  EXPECT_EQ(hot.shape(), a.shape());
  EXPECT_NE(hot, a);
  EXPECT_THROW(encode(std::vector<TokenId>{}, model, {}), std::invalid_argument);
}

TEST(Encode, TruncatesOverlongDocuments) {
  const auto model = Transformer::create(tiny_config(), 2);
  std::mt19937_64 rng(3);
  const auto doc = random_tokens(rng, 100, 24);
  EXPECT_EQ(encode(doc, model, {}).rows(), model.config.max_seq_len);
  EXPECT_EQ(prepare_source(doc, model.config).back(), kEosId);
}

TEST(DecodeStep, ShapesAndErrors) {
  const auto model = Transformer::create(tiny_config(), 3);
  std::mt19937_64 rng(1);
  const auto src = encode_source(random_tokens(rng, 6, 24), model, {});
  const std::vector<TokenId> prefix{kBosId, 8, 9};
  const auto r = decode_step(prefix, *src, model, {});
  EXPECT_EQ(r.logits.size(), 24u);
  EXPECT_EQ(r.cross_attention.shape(), (Shape{2, 4, 3, 7}));
  EXPECT_THROW(decode_step(std::vector<TokenId>{8}, *src, model, {}), std::invalid_argument);
  EXPECT_THROW(decode_step(std::vector<TokenId>{}, *src, model, {}), std::invalid_argument);
  std::vector<TokenId> longp(33, 8);
  longp[0] = kBosId;
  EXPECT_THROW(decode_step(longp, *src, model, {}), std::invalid_argument);
}

TEST(DecodeStep, HugeCrossTemperatureGivesUniformAttention) {
  const auto model = Transformer::create(tiny_config(), 4);
  std::mt19937_64 rng(2);
  const auto src = encode_source(random_tokens(rng, 9, 24), model, {1.0, 1e12, 1.0});
  const std::vector<TokenId> prefix{kBosId, 11, 12, 13};
  const auto r = decode_step(prefix, *src, model, {1.0, 1e12, 1.0});
  for (double w : r.cross_attention.values()) EXPECT_NEAR(w, 0.1, 1e-6);
}

// Two independent routes: the cached incremental decoder and the full
// teacher-forced tape forward must give the same next-token logits.
TEST(DecodeStep, StepwiseLogitsEqualTeacherForcedRows) {
  std::mt19937_64 rng(5);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto model = Transformer::create(tiny_config(), seed);
    const auto doc = random_tokens(rng, 8, 24);
    const auto sum = random_tokens(rng, 5, 24);
    for (const AttentionTemperatures temps : {AttentionTemperatures{}, AttentionTemperatures{1.5, 2.0, 3.0}}) {
      std::vector<std::vector<Tensor>> cross;
      const Tensor full = teacher_forced_logits(model, doc, sum, temps, &cross);
      const auto src = encode_source(doc, model, temps);
      const auto prefix_all = with_bos(sum);
      for (std::size_t t = 1; t <= prefix_all.size(); ++t) {
        const auto r = decode_step(std::span<const TokenId>(prefix_all).first(t), *src, model, temps);
        const auto row = full.row(t - 1);
        for (std::size_t i = 0; i < row.size(); ++i) ASSERT_NEAR(r.logits[i], row[i], 1e-10);
        if (t == prefix_all.size()) {
          for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t h = 0; h < 4; ++h)
              for (std::size_t q = 0; q < t; ++q)
                for (std::size_t j = 0; j < src->length(); ++j)
                  ASSERT_NEAR(r.cross_attention[((l * 4 + h) * t + q) * src->length() + j],
                              cross[l][h].at(q, j), 1e-10);
        }
      }
    }
  }
}

TEST(ForwardLoss, EqualsMeanOfStepLosses) {
  const auto model = Transformer::create(tiny_config(), 9);
  std::mt19937_64 rng(6);
  const auto doc = random_tokens(rng, 7, 24);
  const auto sum = random_tokens(rng, 4, 24);
  const double eps = 0.1;
  const auto src = encode_source(doc, model, {});
  auto prefix = with_bos(sum);
  std::vector<TokenId> labels(sum.begin(), sum.end());
  labels.push_back(kEosId);
  double total = 0.0;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    const auto r = decode_step(std::span<const TokenId>(prefix).first(t + 1), *src, model, {});
    const auto lp = log_softmax_with_temperature(r.logits, 1.0);
    const double smooth = -std::accumulate(lp.begin(), lp.end(), 0.0) / static_cast<double>(lp.size());
    total += (1.0 - eps) * -lp[static_cast<std::size_t>(labels[t])] + eps * smooth;
  }
  EXPECT_NEAR(forward_loss(doc, sum, model, eps), total / static_cast<double>(labels.size()), 1e-12);
  EXPECT_THROW(forward_loss(doc, std::vector<TokenId>{}, model, eps), std::invalid_argument);
}

TEST(ForwardLoss, UniformOutputGivesLogVocab) {
  auto model = Transformer::create(tiny_config(), 10);
  model.params.at("output.weight").value.fill(0.0);
  model.params.at("output.bias").value.fill(0.0);
  const std::vector<TokenId> doc{6, 7, 8}, sum{9, 10};
  EXPECT_NEAR(forward_loss(doc, sum, model, 0.0), std::log(24.0), 1e-12);
}

TEST(BatchLoss, DuplicatingAPairLeavesLossUnchanged) {
  auto model = Transformer::create(tiny_config(), 11);
  std::mt19937_64 rng(7);
  const auto d1 = random_tokens(rng, 6, 24), s1 = random_tokens(rng, 3, 24);
  const auto d2 = random_tokens(rng, 9, 24), s2 = random_tokens(rng, 6, 24);
  auto loss_of = [&](std::vector<SequencePair> pairs) {
    Tape tape;
    return batch_loss(tape, model, pack_batch(pairs, model.config), 0.1, {}).value().item();
  };
  EXPECT_NEAR(loss_of({{d1, s1}}), loss_of({{d1, s1}, {d1, s1}}), 1e-12);
  const double l1 = loss_of({{d1, s1}}), l2 = loss_of({{d2, s2}});
  EXPECT_NEAR(loss_of({{d1, s1}, {d2, s2}}), 0.5 * (l1 + l2), 1e-12);
  EXPECT_NEAR(l1, forward_loss(d1, s1, model, 0.1), 1e-12);
}

TEST(PackBatch, RejectsEmptyTargetAndOutOfVocabulary) {
  const auto config = tiny_config();
  const std::vector<TokenId> doc{6}, empty{}, bad{99};
  std::vector<SequencePair> p1{{doc, empty}};
  EXPECT_THROW(pack_batch(p1, config), std::invalid_argument);
  std::vector<SequencePair> p2{{doc, bad}};
  EXPECT_THROW(pack_batch(p2, config), std::invalid_argument);
}

TEST(ModelProperty, Causality) {
  const auto model = Transformer::create(tiny_config(), 12);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto doc = random_tokens(rng, 7, 24);
    auto sum = random_tokens(rng, 6, 24);
    const Tensor base = teacher_forced_logits(model, doc, sum, {1.5, 1.5, 1.5});
    const std::size_t t = static_cast<std::size_t>(trial % 6);
    sum[t] = sum[t] == 5 ? 6 : 5;
    const Tensor changed = teacher_forced_logits(model, doc, sum, {1.5, 1.5, 1.5});
    // Decoder input row r holds BOS (r=0) or sum[r-1]; rows 0..t never see sum[t].
    for (std::size_t r = 0; r <= t; ++r) {
      const auto a = base.row(r), b = changed.row(r);
      ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << "row " << r << " t " << t;
    }
    const auto after = base.row(t + 1), after2 = changed.row(t + 1);
    ASSERT_FALSE(std::equal(after.begin(), after.end(), after2.begin()));
  }
}

TEST(ModelProperty, UnitTemperaturesReproduceStandardScaling) {
  for (std::size_t d : {1u, 4u, 16u, 64u}) {
    EXPECT_EQ(attention_scale(1.0, d), 1.0 / std::sqrt(static_cast<double>(d)));
  }
  const auto model = Transformer::create(tiny_config(), 13);
  const std::vector<TokenId> doc{6, 7, 8, 9}, sum{10, 11};
  EXPECT_EQ(teacher_forced_logits(model, doc, sum, AttentionTemperatures::uniform(1.0)),
            teacher_forced_logits(model, doc, sum, AttentionTemperatures{}));
}

TEST(ModelProperty, AttentionRowsAreDistributions) {
  const auto model = Transformer::create(tiny_config(), 14);
  std::mt19937_64 rng(9);
  for (double lambda : {0.75, 1.0, 2.0, 4.0}) {
    const auto src = encode_source(random_tokens(rng, 11, 24), model, AttentionTemperatures::uniform(lambda));
    const auto prefix = with_bos(random_tokens(rng, 5, 24));
    const auto r = decode_step(prefix, *src, model, AttentionTemperatures::uniform(lambda));
    const std::size_t m = src->length();
    for (std::size_t row = 0; row < r.cross_attention.size() / m; ++row) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        ASSERT_GE(r.cross_attention[row * m + j], 0.0);
        s += r.cross_attention[row * m + j];
      }
      ASSERT_NEAR(s, 1.0, 1e-9);
    }
  }
}

// A map's argmax is invariant when only its own temperature changes: the
// first decoder layer sees identical queries and keys if only λ_cross moves.
TEST(ModelProperty, CrossAttentionArgmaxIsTemperatureInvariant) {
  const auto model = Transformer::create(tiny_config(), 15);
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto doc = random_tokens(rng, 10, 24);
    const auto sum = random_tokens(rng, 4, 24);
    std::vector<std::vector<Tensor>> base, hot;
    teacher_forced_logits(model, doc, sum, {}, &base);
    teacher_forced_logits(model, doc, sum, {1.0, 2.0, 1.0}, &hot);
    for (std::size_t h = 0; h < 4; ++h) {
      for (std::size_t q = 0; q < base[0][h].rows(); ++q) {
        ASSERT_EQ(row_argmax(base[0][h].row(q)), row_argmax(hot[0][h].row(q)));
      }
    }
  }
}

TEST(ModelSerialization, RoundTripIsBitIdentical) {
  ModelConfig c = tiny_config();
  for (auto pos : {PositionEncoding::learned, PositionEncoding::sinusoidal}) {
    c.positions = pos;
    auto model = Transformer::create(c, 16);
    model.vocabulary = {"<pad>", "<unk>", "<s>", "</s>", "<sep>"};
    for (std::size_t i = 5; i < 24; ++i) model.vocabulary.push_back("w" + std::to_string(i));
    const auto path = std::filesystem::temp_directory_path() / "plate_model_roundtrip.bin";
    save_model(path.string(), model);
    const auto loaded = load_model(path.string());
    std::filesystem::remove(path);
    EXPECT_EQ(loaded.config, model.config);
    EXPECT_EQ(loaded.vocabulary, model.vocabulary);
    EXPECT_TRUE(loaded.params == model.params);
    EXPECT_EQ(model_digest(loaded), model_digest(model));
    const std::vector<TokenId> doc{6, 7, 8}, sum{9, 10};
    EXPECT_EQ(teacher_forced_logits(loaded, doc, sum, {2.0, 2.0, 2.0}),
              teacher_forced_logits(model, doc, sum, {2.0, 2.0, 2.0}));
  }
}

TEST(ModelSerialization, RejectsCorruptBytes) {
  const auto model = Transformer::create(tiny_config(), 17);
  auto bytes = serialize_model(model);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_model(bad_magic), std::exception);
  bytes.resize(bytes.size() - 8);
  EXPECT_THROW(deserialize_model(bytes), std::exception);
}

TEST(ModelGradient, MatchesFiniteDifferencesOnSampledEntries) {
  auto model = Transformer::create(tiny_config(12), 18);
  std::mt19937_64 rng(11);
  const auto d1 = random_tokens(rng, 5, 12), s1 = random_tokens(rng, 3, 12);
  const auto d2 = random_tokens(rng, 4, 12), s2 = random_tokens(rng, 2, 12);
  const std::vector<SequencePair> pairs{{d1, s1}, {d2, s2}};
  const auto batch = pack_batch(pairs, model.config);
  const AttentionTemperatures temps{1.3, 1.7, 2.1};
  ForwardOptions opt;
  opt.temps = temps;
  Tape tape;
  model.params.zero_grad();
  tape.backward(batch_loss(tape, model, batch, 0.1, opt));
  auto f = [&] {
    Tape t;
    Var logits = forward_logits(t, std::as_const(model), batch, opt);
    return label_smoothed_nll(logits, batch.labels, 0.1, batch.row_weights).value().item();
  };
  for (auto& p : model.params.all()) {
    std::uniform_int_distribution<std::size_t> pick(0, p.value.size() - 1);
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = pick(rng);
      const double numeric = plate::testing::central_difference(f, p.value[i]);
      ASSERT_LT(plate::testing::relative_error(p.grad[i], numeric), 1e-4) << p.name << "[" << i << "]";
    }
  }
}

TEST(StudentShapes, ParameterNamesFollowLayerCounts) {
  ModelConfig c = tiny_config();
  c.decoder_layers = 3;
  const auto params = init_parameters(c, 1);
  EXPECT_TRUE(params.contains("decoder.2.cross_attn.q.weight"));
  EXPECT_FALSE(params.contains("decoder.3.cross_attn.q.weight"));
  EXPECT_EQ(params.at("output.weight").value.shape(), (Shape{16, 24}));
  EXPECT_TRUE(init_parameters(c, 1) == params);
  EXPECT_FALSE(init_parameters(c, 2) == params);
}
