#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "emgssl/neural.hpp"
#include "support/gradcheck.hpp"

namespace emgssl {
namespace {

using M = Eigen::MatrixXd;

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

NetShape tiny_shape(int inputs, int units) {
  NetShape s;
  s.inputs = inputs;
  s.lstm_units = units;
  s.hidden_units = 4;
  s.hidden_layers = 1;
  s.embedding = 2;
  s.classes = 3;
  return s;
}

TEST(Lstm, ZeroWeightsGiveZeroState) {
  auto p = NetParams<double>::zeros(tiny_shape(3, 5));
  LstmCache<double> c;
  const M h = lstm_forward(p, M(M::Random(3, 4 * 2)), 4, c);
  EXPECT_TRUE(h.isZero(0));
}

TEST(Lstm, SingleStepMatchesHandEvaluation) {
  // One input, two units, gates ordered i, f, g, o; h0 = c0 = 0.
  auto p = NetParams<double>::zeros(tiny_shape(1, 2));
  p.lstm_wx << 0.5, -0.3, 0.8, 0.1, 0.2, -0.7, 0.4, 0.9;
  p.lstm_b << 0.1, 0.0, 1.0, 1.0, -0.2, 0.3, 0.0, -0.1;
  p.lstm_wh.setConstant(0.37);  // irrelevant at the first step
  const double x = 1.5;
  LstmCache<double> c;
  const M h = lstm_forward(p, M(M::Constant(1, 1, x)), 1, c);
  for (int u = 0; u < 2; ++u) {
    const double i = sig(p.lstm_wx(0 + u, 0) * x + p.lstm_b(0 + u, 0));
    const double g = std::tanh(p.lstm_wx(4 + u, 0) * x + p.lstm_b(4 + u, 0));
    const double o = sig(p.lstm_wx(6 + u, 0) * x + p.lstm_b(6 + u, 0));
    const double cell = i * g;
    EXPECT_NEAR(h(u, 0), o * std::tanh(cell), 1e-15);
  }
  // Unit 0 by pencil: i = sig(0.85), g = tanh(0.1), o = sig(0.6)
  EXPECT_NEAR(h(0, 0), sig(0.6) * std::tanh(sig(0.85) * std::tanh(0.1)), 1e-15);
}

TEST(Lstm, CellDecaysUnderZeroInputWithForgetBelowOne) {
  auto p = NetParams<double>::zeros(tiny_shape(2, 3));
  Rng rng(1);
  p.lstm_wx = gradcheck::random_matrix(rng, 12, 2);
  p.lstm_b.middleRows(3, 3).setConstant(0.5);  // forget = sig(0.5) < 1
  const int steps = 8;
  M x = M::Zero(2, steps);
  x.col(0) << 1.0, -2.0;
  LstmCache<double> c;
  lstm_forward(p, x, steps, c);
  for (int t = 2; t <= steps; ++t)
    for (int u = 0; u < 3; ++u) EXPECT_LT(std::abs(c.c(u, t)), std::abs(c.c(u, t - 1)));
}

TEST(Lstm, NonFiniteInputIsANumericError) {
  auto p = NetParams<double>::zeros(tiny_shape(2, 2));
  M x = M::Zero(2, 3);
  x(1, 2) = std::nan("");
  LstmCache<double> c;
  EXPECT_THROW(lstm_forward(p, x, 3, c), NumericError);
}

TEST(LayerNorm, ConstantColumnNormalisesToZero) {
  EXPECT_TRUE(layer_norm<double>(M::Constant(5, 2, 3.7)).isZero(0));
}

TEST(Backbone, NegativeReluInputsLeaveTheProjectionBias) {
  Rng rng(2);
  auto p = init_params<double>(tiny_shape(3, 4), rng);
  p.hidden[0].beta.setConstant(-100.0);
  p.proj_w = M::Identity(2, 4);
  p.proj_b << 0.25, -1.5;
  const M z = backbone_forward(p, gradcheck::random_matrix(rng, 3, 5 * 3), 5);
  for (int b = 0; b < 3; ++b) EXPECT_TRUE(z.col(b).isApprox(p.proj_b.col(0)));
}

TEST(Backbone, TinyTwoFourTwoNetworkMatchesHandComputation) {
  // Dense 2 -> 4 with layer norm and ReLU, then a linear 4 -> 2 projection.
  DenseNorm<double> l{M(4, 2), M::Zero(4, 1), M::Ones(4, 1), M::Zero(4, 1)};
  l.w << 1, 0, 0, 1, 1, 1, 1, -1;
  M x(2, 1);
  x << 1, 2;
  DenseNormCache<double> cache;
  const M a = dense_norm_forward(l, x, cache);
  // y = (1, 2, 3, -1), mean 1.25, variance 2.1875
  const double inv = 1.0 / std::sqrt(2.1875 + 1e-3);
  M expected(4, 1);
  expected << 0, 0.75 * inv, 1.75 * inv, 0;
  EXPECT_TRUE(a.isApprox(expected, 1e-14));
  M w2(2, 4);
  w2 << 1, 1, 1, 1, 1, -1, 0, 0;
  const M out = w2 * a + (M(2, 1) << 0.5, -0.5).finished();
  EXPECT_NEAR(out(0, 0), 2.5 * inv + 0.5, 1e-14);
  EXPECT_NEAR(out(1, 0), -0.75 * inv - 0.5, 1e-14);
}

TEST(Head, SoftmaxClosedForms) {
  EXPECT_TRUE(softmax<double>(M::Zero(7, 1)).isApprox(M::Constant(7, 1, 1.0 / 7)));
  M logits = M::Zero(7, 1);
  logits(0, 0) = 1;
  EXPECT_NEAR(softmax<double>(logits)(0, 0), std::exp(1.0) / (std::exp(1.0) + 6), 1e-15);
  Rng rng(3);
  const M r = gradcheck::random_matrix(rng, 7, 9, 3.0);
  const M shifted = r.array() + 12.5;
  EXPECT_LT((softmax<double>(r) - softmax<double>(shifted)).cwiseAbs().maxCoeff(), 1e-14);
  const M p = softmax<double>(r);
  for (int j = 0; j < 9; ++j) EXPECT_NEAR(p.col(j).sum(), 1.0, 1e-12);
  EXPECT_GT(p.minCoeff(), 0.0);
}

TEST(Head, CrossEntropyClosedForms) {
  const std::vector<int> y{2, 5};
  EXPECT_NEAR(xent_loss<double>(M::Constant(7, 2, 1.0 / 7), y), std::log(7.0), 1e-14);
  EXPECT_NEAR(std::log(7.0), 1.9459, 1e-4);
  M perfect = M::Zero(7, 2);
  perfect(2, 0) = perfect(5, 1) = 1;
  EXPECT_EQ(xent_loss<double>(perfect, y), 0.0);
  // log floor keeps the loss finite
  EXPECT_NEAR(xent_loss<double>(M::Zero(7, 2), y), -std::log(1e-12), 1e-9);
}

TEST(Head, LogitGradientIsSoftmaxMinusOneHot) {
  Rng rng(4);
  M logits = gradcheck::random_matrix(rng, 5, 3);
  const std::vector<int> y{0, 4, 2};
  const M analytic = xent_grad_logits<double>(softmax<double>(logits), y);
  M expected = softmax<double>(logits);
  for (int j = 0; j < 3; ++j) expected(y[static_cast<std::size_t>(j)], j) -= 1;
  EXPECT_TRUE(analytic.isApprox(expected / 3.0));
  auto loss = [&] { return xent_loss<double>(softmax<double>(logits), y); };
  EXPECT_LT(gradient_check({&logits}, {&analytic}, loss), 1e-6);
}

TEST(AdamWTest, OneStepHandComputation) {
  M theta = M::Constant(1, 1, 1.0), g = M::Constant(1, 1, 0.5);
  AdamW<double> opt({1e-3, 0.9, 0.999, 1e-8, 0.01});
  opt.step({&theta}, {&g});
  EXPECT_NEAR(theta(0, 0), 0.99899, 1e-8);
}

TEST(AdamWTest, ZeroGradientWithoutDecayIsANoOp) {
  M theta = M::Constant(2, 2, 0.3), g = M::Zero(2, 2);
  AdamW<double> opt({1e-3, 0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 5; ++i) opt.step({&theta}, {&g});
  EXPECT_TRUE(theta.isApprox(M::Constant(2, 2, 0.3), 0));
}

TEST(AdamWTest, ElementwiseIndependence) {
  M a = M::Constant(1, 1, 0.7), b = M::Constant(1, 1, 0.7), ga = M::Constant(1, 1, -0.2), gb = ga;
  AdamW<double> opt;
  for (int i = 0; i < 3; ++i) opt.step({&a, &b}, {&ga, &gb});
  EXPECT_EQ(a(0, 0), b(0, 0));
}

TEST(AdamWTest, FrozenTensorsAreUntouched) {
  M a = M::Constant(1, 1, 0.7), b = M::Constant(1, 1, 0.7), g = M::Constant(1, 1, 1.0);
  AdamW<double> opt;
  const std::vector<bool> trainable{false, true};
  opt.step({&a, &b}, {&g, &g}, &trainable);
  EXPECT_EQ(a(0, 0), 0.7);
  EXPECT_NE(b(0, 0), 0.7);
}

TEST(Trainer, EarlyStoppingTrace) {
  // Validation loss 3, 2, 1, then flat: patience 10 stops after epoch 13 and
  // restores the parameters seen at epoch 3.
  M theta = M::Zero(1, 1), g = M::Zero(1, 1);
  std::vector<double> after_epoch;
  int epoch = 0;
  TrainProblem<double> prob{{&theta}, {&g}, {true}, 8, 1, {}, {}};
  prob.batch_loss = [&](std::span<const std::size_t>) {
    g(0, 0) = 1.0;
    return 0.5;
  };
  prob.validation_loss = [&] {
    after_epoch.push_back(theta(0, 0));
    ++epoch;
    return epoch <= 3 ? 4.0 - epoch : 1.0;
  };
  TrainConfig cfg;
  cfg.batch_size = 4;
  Rng rng(5);
  const auto hist = train(prob, cfg, 1e-2, rng);
  EXPECT_EQ(hist.epochs.size(), 13u);
  EXPECT_EQ(hist.best_epoch, 3);
  EXPECT_TRUE(hist.early_stopped);
  EXPECT_EQ(theta(0, 0), after_epoch[2]);
  EXPECT_NE(after_epoch[2], after_epoch[12]);
}

TEST(Trainer, EmptyDataIsAnError) {
  M theta = M::Zero(1, 1), g = M::Zero(1, 1);
  TrainProblem<double> prob{{&theta}, {&g}, {true}, 0, 1, {}, {}};
  Rng rng(6);
  EXPECT_THROW(train(prob, TrainConfig{}, 1e-3, rng), DataError);
}

// Small supervised problem over random sequences for trainer contracts.
struct ToyTask {
  NetParams<float> p, g;
  Mat<float> x;
  std::vector<int> y;
  int steps = 3;

  ToyTask(NetShape s, int n, std::uint64_t seed) {
    Rng rng(seed);
    p = init_params<float>(s, rng);
    g = NetParams<float>::zeros(s);
    x = gradcheck::random_matrix(rng, s.inputs, static_cast<Eigen::Index>(steps) * n).cast<float>();
    for (int i = 0; i < n; ++i) y.push_back(static_cast<int>(rng.uniform_int(0, s.classes - 1)));
  }

  Mat<float> batch(std::span<const std::size_t> idx) const {
    const auto n = static_cast<Eigen::Index>(y.size());
    const auto b = static_cast<Eigen::Index>(idx.size());
    Mat<float> out(x.rows(), steps * b);
    for (int t = 0; t < steps; ++t)
      for (Eigen::Index j = 0; j < b; ++j) out.col(t * b + j) = x.col(t * n + static_cast<Eigen::Index>(idx[j]));
    return out;
  }

  TrainProblem<float> problem(bool freeze_backbone) {
    TrainProblem<float> prob;
    for (auto& [name, m] : p.tensors()) {
      prob.params.push_back(m);
      prob.trainable.push_back(!(freeze_backbone && is_backbone_tensor(name)));
    }
    for (auto& [name, m] : g.tensors()) prob.grads.push_back(m);
    prob.num_samples = y.size();
    prob.batch_loss = [this](std::span<const std::size_t> idx) {
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(y[i]);
      return static_cast<double>(supervised_loss_and_grad<float>(p, batch(idx), steps, labels, &g));
    };
    prob.validation_loss = [this] {
      std::vector<std::size_t> all(y.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      return static_cast<double>(supervised_loss_and_grad<float>(p, batch(all), steps, y, nullptr));
    };
    return prob;
  }
};

TEST(Trainer, FrozenBackboneIsBitIdentical) {
  ToyTask task(tiny_shape(4, 6), 40, 7);
  const auto before = task.p;
  auto prob = task.problem(true);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.max_epochs = 5;
  Rng rng(8);
  train(prob, cfg, 1e-2, rng);
  const auto a = before.tensors();
  const auto b = task.p.tensors();
  bool head_changed = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (is_backbone_tensor(a[k].first)) {
      EXPECT_TRUE(*a[k].second == *b[k].second) << a[k].first;
    } else {
      head_changed |= !(*a[k].second == *b[k].second);
    }
  }
  EXPECT_TRUE(head_changed);
}

TEST(Trainer, FixedSeedGivesIdenticalTrajectories) {
  auto run = [] {
    ToyTask task(tiny_shape(4, 6), 40, 9);
    auto prob = task.problem(false);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.max_epochs = 6;
    Rng rng(10);
    const auto hist = train(prob, cfg, 1e-2, rng);
    return std::make_pair(hist, task.p);
  };
  const auto [h1, p1] = run();
  const auto [h2, p2] = run();
  ASSERT_EQ(h1.epochs.size(), h2.epochs.size());
  for (std::size_t e = 0; e < h1.epochs.size(); ++e) {
    EXPECT_EQ(h1.epochs[e].train_loss, h2.epochs[e].train_loss);
    EXPECT_EQ(h1.epochs[e].val_loss, h2.epochs[e].val_loss);
  }
  const auto a = p1.tensors(), b = p2.tensors();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE(*a[k].second == *b[k].second);
}

TEST(Trainer, MemorisesSixtyFourSamples) {
  NetShape s;  // full-size network
  ToyTask task(s, 64, 11);
  auto prob = task.problem(false);
  TrainConfig cfg;
  cfg.early_stop_patience = 500;
  Rng rng(12);
  const auto hist = train(prob, cfg, 1e-3, rng);
  double best = 1e9;
  int reached = 0;
  for (const auto& e : hist.epochs)
    if (e.val_loss < best) {
      best = e.val_loss;
      if (best < 0.01 && reached == 0) reached = e.epoch;
    }
  EXPECT_LT(best, 0.01);
  EXPECT_GT(reached, 0);
  EXPECT_LE(reached, 500);
}

TEST(Init, ShapesAndConventions) {
  Rng rng(13);
  NetShape s;
  const auto p = init_params<double>(s, rng);
  EXPECT_EQ(p.lstm_wx.rows(), 512);
  EXPECT_EQ(p.lstm_wx.cols(), 24);
  EXPECT_EQ(p.head_w.rows(), 7);
  EXPECT_EQ(p.proj_w.rows(), 128);
  EXPECT_TRUE(p.lstm_b.middleRows(128, 128).isOnes());
  const M block = p.lstm_wh.middleRows(0, 128);
  EXPECT_TRUE((block.transpose() * block).isIdentity(1e-10));
  EXPECT_TRUE(p.all_finite());
  Rng again(13);
  const auto q = init_params<double>(s, again);
  EXPECT_TRUE(p.lstm_wh == q.lstm_wh);
}

TEST(GradientSuite, Dense) {
  Rng rng(100);
  for (int i = 0; i < 20; ++i) EXPECT_LT(gradcheck::dense(rng), 1e-4) << i;
}

TEST(GradientSuite, LayerNorm) {
  Rng rng(101);
  for (int i = 0; i < 20; ++i) EXPECT_LT(gradcheck::layer_norm(rng), 1e-4) << i;
}

TEST(GradientSuite, DenseLayerNormRelu) {
  Rng rng(102);
  for (int i = 0; i < 20; ++i) EXPECT_LT(gradcheck::layer_norm(rng, true), 1e-4) << i;
}

TEST(GradientSuite, LstmThroughTime) {
  Rng rng(103);
  for (int i = 0; i < 20; ++i) EXPECT_LT(gradcheck::lstm(rng), 1e-4) << i;
}

TEST(GradientSuite, CrossEntropyThroughBackbone) {
  Rng rng(104);
  for (int i = 0; i < 20; ++i) EXPECT_LT(gradcheck::xent(rng), 1e-4) << i;
}

TEST(GradientSuite, VicregThroughBackbone) {
  Rng rng(105);
  for (int i = 0; i < 20; ++i) EXPECT_LT(gradcheck::vicreg(rng), 1e-4) << i;
}

}  // namespace
}  // namespace emgssl
