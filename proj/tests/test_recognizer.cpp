#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cpcser/recognizer.hpp"
#include "support.hpp"

using namespace cpcser;
using cpcser::testing::random_tensor;

namespace {

RecognizerConfig small_config() {
  RecognizerConfig rc;
  rc.input_dim = 6;
  rc.heads = 2;
  rc.attn_dim = 4;
  rc.model_dim = 8;
  rc.dense_hidden = 5;
  return rc;
}

// Naive row-softmax attention: returns [L x L] weights and [L x D] head output.
std::pair<std::vector<double>, std::vector<double>> attention_oracle(const Tensor& c, const Tensor& wq,
                                                                     const Tensor& wk, const Tensor& wv) {
  const std::size_t len = c.size(0), din = c.size(1), d = wq.size(1);
  auto project = [&](const Tensor& w) {
    std::vector<double> out(len * d, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t i = 0; i < din; ++i) out[t * d + j] += c.at(t, i) * w.at(i, j);
      }
    }
    return out;
  };
  const auto q = project(wq), k = project(wk), v = project(wv);
  std::vector<double> a(len * len), h(len * d, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<double> logits(len);
    for (std::size_t s = 0; s < len; ++s) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += q[t * d + j] * k[s * d + j];
      logits[s] = dot / std::sqrt(static_cast<double>(d));
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    for (std::size_t s = 0; s < len; ++s) a[t * len + s] = std::exp(logits[s] - mx) / z;
    for (std::size_t s = 0; s < len; ++s) {
      for (std::size_t j = 0; j < d; ++j) h[t * d + j] += a[t * len + s] * v[s * d + j];
    }
  }
  return {a, h};
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  std::vector<double> v(x.numel());
  const std::size_t w = x.size(1);
  for (std::size_t r = 0; r < perm.size(); ++r) {
    for (std::size_t j = 0; j < w; ++j) v[r * w + j] = x.at(perm[r], j);
  }
  return Tensor::from_data(x.shape(), std::move(v));
}

}  // namespace

TEST(Attention, SingleStepAttendsToItself) {
  std::mt19937_64 rng(1);
  const Tensor c = random_tensor({1, 4}, rng, -1, 1, false);
  const Tensor wq = random_tensor({4, 3}, rng, -1, 1, false), wk = random_tensor({4, 3}, rng, -1, 1, false);
  const Tensor wv = random_tensor({4, 3}, rng, -1, 1, false);
  EXPECT_EQ(attention_weights(c, wq, wk).at(0, 0), 1.0);
  const Tensor h = attention_head(c, wq, wk, wv);
  const Tensor cv = matmul(c, wv);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(h.at(0, j), cv.at(0, j), 1e-15);
}

TEST(Attention, ZeroQueryGivesUniformWeights) {
  std::mt19937_64 rng(2);
  const Tensor c = random_tensor({5, 4}, rng, -1, 1, false);
  const Tensor wq = Tensor::zeros({4, 3});
  const Tensor wk = random_tensor({4, 3}, rng, -1, 1, false), wv = random_tensor({4, 3}, rng, -1, 1, false);
  const Tensor a = attention_weights(c, wq, wk);
  for (double v : a.data()) EXPECT_NEAR(v, 0.2, 1e-15);
  const Tensor h = attention_head(c, wq, wk, wv);
  const Tensor cv = matmul(c, wv);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0.0;
    for (std::size_t t = 0; t < 5; ++t) m += cv.at(t, j) / 5.0;
    for (std::size_t t = 0; t < 5; ++t) EXPECT_NEAR(h.at(t, j), m, 1e-14);
  }
}

TEST(Attention, MatchesNaiveOracle) {
  std::mt19937_64 rng(3);
  const Tensor c = random_tensor({3, 4}, rng, -1, 1, false);
  const Tensor wq = random_tensor({4, 2}, rng, -1, 1, false), wk = random_tensor({4, 2}, rng, -1, 1, false);
  const Tensor wv = random_tensor({4, 2}, rng, -1, 1, false);
  const auto [a_ref, h_ref] = attention_oracle(c, wq, wk, wv);
  const Tensor a = attention_weights(c, wq, wk);
  const Tensor h = attention_head(c, wq, wk, wv);
  for (std::size_t i = 0; i < a_ref.size(); ++i) EXPECT_NEAR(a.data()[i], a_ref[i], 1e-12);
  for (std::size_t i = 0; i < h_ref.size(); ++i) EXPECT_NEAR(h.data()[i], h_ref[i], 1e-12);
}

TEST(Attention, ShapeMismatchThrows) {
  EXPECT_THROW(attention_head(Tensor::zeros({3, 4}), Tensor::zeros({4, 2}), Tensor::zeros({4, 3}), Tensor::zeros({4, 2})),
               ShapeError);
  EXPECT_THROW(attention_head(Tensor::zeros({3, 5}), Tensor::zeros({4, 2}), Tensor::zeros({4, 2}), Tensor::zeros({4, 2})),
               ShapeError);
}

TEST(Attention, RowsSumToOneOnRandomInputs) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t len = 1 + rng() % 30, din = 1 + rng() % 8, d = 1 + rng() % 6;
    const double spread = 0.1 + (rng() % 100) / 10.0;
    const Tensor c = random_tensor({len, din}, rng, -spread, spread, false);
    const Tensor a = attention_weights(c, random_tensor({din, d}, rng, -1, 1, false),
                                       random_tensor({din, d}, rng, -1, 1, false));
    for (std::size_t t = 0; t < len; ++t) {
      double s = 0.0;
      for (std::size_t u = 0; u < len; ++u) {
        EXPECT_GE(a.at(t, u), 0.0);
        EXPECT_LE(a.at(t, u), 1.0);
        s += a.at(t, u);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(MultiHead, SingleHeadWithIdentityOutput) {
  std::mt19937_64 rng(5);
  const Tensor c = random_tensor({4, 3}, rng, -1, 1, false);
  const AttentionHeadWeights h{random_tensor({3, 2}, rng, -1, 1, false), random_tensor({3, 2}, rng, -1, 1, false),
                               random_tensor({3, 2}, rng, -1, 1, false)};
  const Tensor u = multi_head(c, std::span(&h, 1), Tensor::from_data({2, 2}, {1, 0, 0, 1}));
  const Tensor ref = attention_head(c, h.wq, h.wk, h.wv);
  for (std::size_t i = 0; i < u.numel(); ++i) EXPECT_EQ(u.data()[i], ref.data()[i]);
}

TEST(MultiHead, MatchesCompositionOracle) {
  std::mt19937_64 rng(6);
  const Tensor c = random_tensor({5, 8}, rng, -1, 1, false);
  std::vector<AttentionHeadWeights> heads;
  for (int j = 0; j < 2; ++j) {
    heads.push_back({random_tensor({8, 3}, rng, -1, 1, false), random_tensor({8, 3}, rng, -1, 1, false),
                     random_tensor({8, 3}, rng, -1, 1, false)});
  }
  const Tensor wo = random_tensor({6, 4}, rng, -1, 1, false);
  const Tensor u = multi_head(c, heads, wo);
  std::vector<std::vector<double>> hs;
  for (const auto& h : heads) hs.push_back(attention_oracle(c, h.wq, h.wk, h.wv).second);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t o = 0; o < 4; ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < 2; ++j) {
        for (std::size_t i = 0; i < 3; ++i) s += hs[j][t * 3 + i] * wo.at(j * 3 + i, o);
      }
      EXPECT_NEAR(u.at(t, o), s, 1e-12);
    }
  }
}

TEST(MultiHead, HeadOrderWithPermutedOutputRows) {
  std::mt19937_64 rng(7);
  const Tensor c = random_tensor({6, 4}, rng, -1, 1, false);
  std::vector<AttentionHeadWeights> heads;
  for (int j = 0; j < 3; ++j) {
    heads.push_back({random_tensor({4, 2}, rng, -1, 1, false), random_tensor({4, 2}, rng, -1, 1, false),
                     random_tensor({4, 2}, rng, -1, 1, false)});
  }
  const Tensor wo = random_tensor({6, 5}, rng, -1, 1, false);
  const std::vector<std::size_t> order{2, 0, 1};
  std::vector<AttentionHeadWeights> swapped;
  std::vector<std::size_t> rows;
  for (std::size_t j : order) {
    swapped.push_back(heads[j]);
    rows.push_back(2 * j);
    rows.push_back(2 * j + 1);
  }
  const Tensor a = multi_head(c, heads, wo);
  const Tensor b = multi_head(c, swapped, permute_rows(wo, rows));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-14);
}

TEST(Pooling, Examples) {
  const Tensor same = Tensor::from_data({3, 2}, {1.5, -2, 1.5, -2, 1.5, -2});
  const Tensor p = pool_mean_std(same);
  ASSERT_EQ(p.shape(), (Shape{1, 4}));
  EXPECT_EQ(p.at(0, 0), 1.5);
  EXPECT_EQ(p.at(0, 1), -2.0);
  EXPECT_EQ(p.at(0, 2), 0.0);
  EXPECT_EQ(p.at(0, 3), 0.0);
  const Tensor two = pool_mean_std(Tensor::from_data({2, 1}, {0, 2}));
  EXPECT_DOUBLE_EQ(two.at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(two.at(0, 1), 1.0);
  const Tensor one = pool_mean_std(Tensor::from_data({1, 2}, {3, 4}));
  EXPECT_EQ(one.at(0, 2), 0.0);
}

TEST(Pooling, MatchesTwoPassOracle) {
  std::mt19937_64 rng(8);
  const Tensor u = random_tensor({7, 4}, rng, -3, 3, false);
  const Tensor p = pool_mean_std(u);
  for (std::size_t j = 0; j < 4; ++j) {
    double m = 0.0;
    for (std::size_t t = 0; t < 7; ++t) m += u.at(t, j);
    m /= 7.0;
    double v = 0.0;
    for (std::size_t t = 0; t < 7; ++t) v += (u.at(t, j) - m) * (u.at(t, j) - m);
    EXPECT_NEAR(p.at(0, j), m, 1e-12);
    EXPECT_NEAR(p.at(0, 4 + j), std::sqrt(v / 7.0), 1e-12);
  }
}

TEST(CccLoss, Examples) {
  const std::vector<double> w{1.0 / 3, 1.0 / 3, 1.0 / 3};
  const Tensor labels = Tensor::from_data({4, 3}, {-1, 0.5, 0.2, 0, -0.5, -0.4, 1, 1.5, 0.3, 2, -1.5, 0.9});
  EXPECT_NEAR(ccc_loss(labels, labels, w).item(), 0.0, 1e-15);

  // per column, preds orthogonal to the centered labels
  const Tensor y = Tensor::from_data({4, 3}, {1, 1, 1, -1, -1, -1, 1, 1, 1, -1, -1, -1});
  const Tensor x = Tensor::from_data({4, 3}, {1, 1, 1, 1, 1, 1, -1, -1, -1, -1, -1, -1});
  EXPECT_NEAR(ccc_loss(x, y, w).item(), 1.0, 1e-15);

  // valence column negated, labels zero-mean
  const Tensor z = Tensor::from_data({4, 3}, {1, 2, -1, -1, -2, 1, 3, 1, 0, -3, -1, 0});
  const Tensor zp = Tensor::from_data({4, 3}, {1, -2, -1, -1, 2, 1, 3, -1, 0, -3, 1, 0});
  EXPECT_NEAR(ccc_loss(zp, z, w).item(), 2.0 / 3.0, 1e-15);
}

TEST(CccLoss, ErrorsAndRange) {
  const std::vector<double> w{1.0 / 3, 1.0 / 3, 1.0 / 3};
  EXPECT_THROW(ccc_loss(Tensor::zeros({1, 3}), Tensor::zeros({1, 3}), w), std::invalid_argument);
  EXPECT_THROW(ccc_loss(Tensor::zeros({4, 3}), Tensor::zeros({4, 2}), w), ShapeError);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 2 + rng() % 10;
    const double l = ccc_loss(random_tensor({b, 3}, rng, -2, 2, false), random_tensor({b, 3}, rng, -1, 1, false), w)
                         .item();
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 2.0);
  }
  // constant and equal columns count as perfect agreement
  EXPECT_NEAR(ccc_loss(Tensor::full({3, 3}, 0.5), Tensor::full({3, 3}, 0.5), w).item(), 0.0, 1e-15);
}

TEST(Recognizer, EvalIsInvariantToTimePermutation) {
  const EmotionRecognizer rec(small_config(), 10);
  std::mt19937_64 rng(11);
  const Tensor f = random_tensor({17, 6}, rng, -1, 1, false);
  const Tensor base = rec.forward(f);
  std::vector<std::size_t> perm(17);
  std::iota(perm.begin(), perm.end(), 0);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor out = rec.forward(permute_rows(f, perm));
    for (std::size_t j = 0; j < 3; ++j) worst = std::max(worst, std::abs(out.at(0, j) - base.at(0, j)));
  }
  EXPECT_LT(worst, 1e-12);
  RecordProperty("max_deviation", std::to_string(worst));
}

TEST(Recognizer, DropoutIsSeededAndOffInEval) {
  RecognizerConfig rc = small_config();
  rc.dropout = 0.5;
  const EmotionRecognizer rec(rc, 12);
  std::mt19937_64 rng(13);
  const Tensor f = random_tensor({9, 6}, rng, -1, 1, false);
  const Tensor e1 = rec.forward(f), e2 = rec.forward(f, false, 99);
  const Tensor t1 = rec.forward(f, true, 5), t2 = rec.forward(f, true, 5);
  bool any_diff = false;
  for (int s = 0; s < 10 && !any_diff; ++s) {
    const Tensor t3 = rec.forward(f, true, 100 + s);
    for (std::size_t j = 0; j < 3; ++j) any_diff |= t3.at(0, j) != e1.at(0, j);
  }
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(e1.at(0, j), e2.at(0, j));
    EXPECT_EQ(t1.at(0, j), t2.at(0, j));
  }
  EXPECT_TRUE(any_diff);

  rc.dropout = 0.0;
  const EmotionRecognizer plain(rc, 12);
  const Tensor a = plain.forward(f, true, 7), b = plain.forward(f);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(a.at(0, j), b.at(0, j));
}

TEST(Recognizer, ZeroWeightsPredictOutputBias) {
  const EmotionRecognizer rec(small_config(), 14);
  for (auto& p : rec.parameters()) {
    auto v = p.tensor.mutable_data();
    const bool out_bias = p.name == "recognizer.output.bias";
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = out_bias ? 0.1 * static_cast<double>(i + 1) : 0.0;
  }
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 3; ++trial) {
    const EmotionPrediction p = rec.predict(random_tensor({4 + rng() % 10, 6}, rng, -5, 5, false));
    EXPECT_EQ(p.activation, 0.1);
    EXPECT_EQ(p.valence, 0.2);
    EXPECT_NEAR(p.dominance, 0.3, 1e-16);
  }
}

TEST(Recognizer, WidthMismatchThrows) {
  const EmotionRecognizer rec(small_config(), 0);
  EXPECT_THROW(rec.forward(Tensor::zeros({5, 7})), ShapeError);
}

TEST(Recognizer, BatchUsesPerUtteranceSeeds) {
  RecognizerConfig rc = small_config();
  rc.dropout = 0.3;
  const EmotionRecognizer rec(rc, 16);
  std::mt19937_64 rng(17);
  const std::vector<Tensor> fs{random_tensor({5, 6}, rng, -1, 1, false), random_tensor({8, 6}, rng, -1, 1, false)};
  const Tensor batch = rec.forward_batch(fs, true, 40);
  ASSERT_EQ(batch.shape(), (Shape{2, 3}));
  for (std::size_t i = 0; i < 2; ++i) {
    const Tensor one = rec.forward(fs[i], true, 40 + i);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(batch.at(i, j), one.at(0, j));
  }
}

TEST(RecognizerConfig, Validation) {
  RecognizerConfig rc;
  EXPECT_NO_THROW(rc.validate());
  rc.attn_dim = 63;
  EXPECT_THROW(rc.validate(), std::invalid_argument);
  rc = {};
  rc.dropout = 1.0;
  EXPECT_THROW(rc.validate(), std::invalid_argument);
  rc = {};
  rc.loss_weights = {0.5, 0.5, 0.5};
  EXPECT_THROW(rc.validate(), std::invalid_argument);
  rc = {};
  nlohmann::json j = rc;
  EXPECT_EQ(j.get<RecognizerConfig>().model_dim, 512u);
  j["extra"] = true;
  EXPECT_THROW(j.get<RecognizerConfig>(), std::invalid_argument);
}
