#pragma once

// LSTM backbone + softmax head with hand-written backward passes, AdamW and
// an early-stopping trainer. Column-major batches: each column is one sample;
// a sequence batch of B samples over T steps is an F x (T*B) matrix whose
// step t occupies columns [t*B, (t+1)*B).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emgssl/error.hpp"
#include "emgssl/rng.hpp"

namespace emgssl {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr double kLayerNormEps = 1e-3;
inline constexpr double kLogFloor = 1e-12;

struct NetShape {
  int inputs = 24;
  int lstm_units = 128;
  int hidden_units = 128;
  int hidden_layers = 2;
  int embedding = 128;
  int classes = 7;
};

template <class S>
struct DenseNorm {
  Mat<S> w, b, gain, beta;
};

/// All trainable tensors of backbone and head.
template <class S>
struct NetParams {
  NetShape shape;
  Mat<S> lstm_wx, lstm_wh, lstm_b;  // gate blocks ordered i, f, g, o
  std::vector<DenseNorm<S>> hidden;
  Mat<S> proj_w, proj_b;
  Mat<S> head_w, head_b;

  /// Named tensors in a fixed order; backbone tensors carry the "backbone/"
  /// prefix.
  std::vector<std::pair<std::string, Mat<S>*>> tensors() {
    std::vector<std::pair<std::string, Mat<S>*>> t{
        {"backbone/lstm_wx", &lstm_wx}, {"backbone/lstm_wh", &lstm_wh}, {"backbone/lstm_b", &lstm_b}};
    for (std::size_t l = 0; l < hidden.size(); ++l) {
      const auto p = "backbone/dense" + std::to_string(l + 1);
      t.push_back({p + "_w", &hidden[l].w});
      t.push_back({p + "_b", &hidden[l].b});
      t.push_back({p + "_ln_gain", &hidden[l].gain});
      t.push_back({p + "_ln_beta", &hidden[l].beta});
    }
    t.push_back({"backbone/proj_w", &proj_w});
    t.push_back({"backbone/proj_b", &proj_b});
    t.push_back({"head/w", &head_w});
    t.push_back({"head/b", &head_b});
    return t;
  }
  std::vector<std::pair<std::string, const Mat<S>*>> tensors() const {
    auto t = const_cast<NetParams*>(this)->tensors();
    return {t.begin(), t.end()};
  }

  static NetParams zeros(const NetShape& s) {
    NetParams p;
    p.shape = s;
    const int g = 4 * s.lstm_units;
    p.lstm_wx = Mat<S>::Zero(g, s.inputs);
    p.lstm_wh = Mat<S>::Zero(g, s.lstm_units);
    p.lstm_b = Mat<S>::Zero(g, 1);
    int in = s.lstm_units;
    for (int l = 0; l < s.hidden_layers; ++l) {
      p.hidden.push_back({Mat<S>::Zero(s.hidden_units, in), Mat<S>::Zero(s.hidden_units, 1),
                          Mat<S>::Zero(s.hidden_units, 1), Mat<S>::Zero(s.hidden_units, 1)});
      in = s.hidden_units;
    }
    p.proj_w = Mat<S>::Zero(s.embedding, in);
    p.proj_b = Mat<S>::Zero(s.embedding, 1);
    p.head_w = Mat<S>::Zero(s.classes, s.embedding);
    p.head_b = Mat<S>::Zero(s.classes, 1);
    return p;
  }

  void set_zero() {
    for (auto& [n, m] : tensors()) m->setZero();
  }

  template <class T>
  NetParams<T> cast() const {
    NetParams<T> out = NetParams<T>::zeros(shape);
    auto dst = out.tensors();
    auto src = tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<T>();
    return out;
  }

  bool all_finite() const {
    for (const auto& [n, m] : tensors())
      if (!m->allFinite()) return false;
    return true;
  }
};

inline bool is_backbone_tensor(const std::string& name) { return name.rfind("backbone/", 0) == 0; }

namespace detail {

template <class S>
void uniform_fill(Mat<S>& m, double limit, Rng& rng) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<S>(rng.uniform(-limit, limit));
}

template <class S>
Mat<S> orthogonal(int n, Rng& rng) {
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  // Sign fix makes the draw uniform over the orthogonal group.
  const Eigen::VectorXd d = qr.matrixQR().diagonal();
  for (Eigen::Index j = 0; j < n; ++j)
    if (d[j] < 0) q.col(j) = -q.col(j);
  return q.cast<S>();
}

}  // namespace detail

/// Orthogonal recurrent blocks, uniform fan-in scaling elsewhere, forget-gate
/// bias 1, layer-norm gain 1.
template <class S>
NetParams<S> init_params(const NetShape& s, Rng& rng) {
  auto p = NetParams<S>::zeros(s);
  const int h = s.lstm_units;
  detail::uniform_fill(p.lstm_wx, std::sqrt(3.0 / s.inputs), rng);
  for (int gate = 0; gate < 4; ++gate) p.lstm_wh.middleRows(gate * h, h) = detail::orthogonal<S>(h, rng);
  p.lstm_b.middleRows(h, h).setConstant(S(1));
  for (auto& layer : p.hidden) {
    detail::uniform_fill(layer.w, std::sqrt(6.0 / static_cast<double>(layer.w.cols())), rng);
    layer.gain.setConstant(S(1));
  }
  detail::uniform_fill(p.proj_w, std::sqrt(3.0 / static_cast<double>(p.proj_w.cols())), rng);
  detail::uniform_fill(p.head_w, std::sqrt(3.0 / static_cast<double>(p.head_w.cols())), rng);
  return p;
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

template <class S>
struct LstmCache {
  int steps = 0, batch = 0;
  Mat<S> x;      // F x TB
  Mat<S> gates;  // 4H x TB, post-activation
  Mat<S> c;      // H x (T+1)B, c_0 = 0
  Mat<S> h;      // H x (T+1)B, h_0 = 0
};

namespace detail {
template <class Derived>
auto sigmoid(const Eigen::ArrayBase<Derived>& a) {
  using S = typename Derived::Scalar;
  return S(1) / (S(1) + (-a).exp());
}

template <class S>
void check_finite(const Mat<S>& m, const char* what, int step = -1) {
  if (!m.allFinite())
    throw NumericError(std::string("non-finite values in ") + what +
                       (step >= 0 ? " at step " + std::to_string(step) : std::string()));
}
}  // namespace detail

/// Runs the recurrence over all steps. Returns the final hidden state (H x B);
/// the full hidden sequence is kept in the cache.
template <class S>
Mat<S> lstm_forward(const NetParams<S>& p, const Mat<S>& x, int steps, LstmCache<S>& cache) {
  const int h = p.shape.lstm_units;
  const auto batch = static_cast<int>(x.cols() / steps);
  if (x.rows() != p.shape.inputs || static_cast<Eigen::Index>(batch) * steps != x.cols())
    throw UsageError("lstm_forward: input shape mismatch");
  detail::check_finite(x, "LSTM input");
  cache.steps = steps;
  cache.batch = batch;
  cache.x = x;
  cache.gates.noalias() = p.lstm_wx * x;
  cache.gates.colwise() += p.lstm_b.col(0);
  cache.c.setZero(h, static_cast<Eigen::Index>(steps + 1) * batch);
  cache.h.setZero(h, static_cast<Eigen::Index>(steps + 1) * batch);
  Mat<S> a(4 * h, batch);
  for (int t = 0; t < steps; ++t) {
    auto g = cache.gates.middleCols(static_cast<Eigen::Index>(t) * batch, batch);
    const auto h_prev = cache.h.middleCols(static_cast<Eigen::Index>(t) * batch, batch);
    a = g;
    a.noalias() += p.lstm_wh * h_prev;
    g.topRows(2 * h) = detail::sigmoid(a.topRows(2 * h).array()).matrix();
    g.middleRows(2 * h, h) = a.middleRows(2 * h, h).array().tanh().matrix();
    g.bottomRows(h) = detail::sigmoid(a.bottomRows(h).array()).matrix();
    const auto c_prev = cache.c.middleCols(static_cast<Eigen::Index>(t) * batch, batch);
    auto c_new = cache.c.middleCols(static_cast<Eigen::Index>(t + 1) * batch, batch);
    c_new = (g.middleRows(h, h).array() * c_prev.array() + g.topRows(h).array() * g.middleRows(2 * h, h).array())
                .matrix();
    cache.h.middleCols(static_cast<Eigen::Index>(t + 1) * batch, batch) =
        (g.bottomRows(h).array() * c_new.array().tanh()).matrix();
  }
  Mat<S> last = cache.h.rightCols(batch);
  detail::check_finite(last, "LSTM final state", steps - 1);
  return last;
}

/// Backpropagation through time from a gradient on the final hidden state.
template <class S>
void lstm_backward(const NetParams<S>& p, const LstmCache<S>& cache, const Mat<S>& d_last, NetParams<S>& grad) {
  const int h = p.shape.lstm_units;
  const int steps = cache.steps, batch = cache.batch;
  Mat<S> d_gates(4 * h, static_cast<Eigen::Index>(steps) * batch);
  Mat<S> dh = d_last;
  Mat<S> dc = Mat<S>::Zero(h, batch);
  for (int t = steps - 1; t >= 0; --t) {
    const auto cols = static_cast<Eigen::Index>(t) * batch;
    const auto g = cache.gates.middleCols(cols, batch);
    const auto i = g.topRows(h).array();
    const auto f = g.middleRows(h, h).array();
    const auto cand = g.middleRows(2 * h, h).array();
    const auto o = g.bottomRows(h).array();
    const auto c_prev = cache.c.middleCols(cols, batch).array();
    const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> tc = cache.c.middleCols(cols + batch, batch).array().tanh();

    dc.array() += dh.array() * o * (S(1) - tc.square());
    auto dg = d_gates.middleCols(cols, batch);
    dg.topRows(h) = (dc.array() * cand * i * (S(1) - i)).matrix();
    dg.middleRows(h, h) = (dc.array() * c_prev * f * (S(1) - f)).matrix();
    dg.middleRows(2 * h, h) = (dc.array() * i * (S(1) - cand.square())).matrix();
    dg.bottomRows(h) = (dh.array() * tc * o * (S(1) - o)).matrix();
    dc.array() *= f;
    if (t > 0) dh.noalias() = p.lstm_wh.transpose() * dg;
  }
  grad.lstm_wx.noalias() += d_gates * cache.x.transpose();
  grad.lstm_wh.noalias() += d_gates * cache.h.leftCols(static_cast<Eigen::Index>(steps) * batch).transpose();
  grad.lstm_b += d_gates.rowwise().sum();
}

// ---------------------------------------------------------------------------
// Dense -> layer norm -> ReLU
// ---------------------------------------------------------------------------

template <class S>
struct DenseNormCache {
  Mat<S> input, xhat, pre_relu;
  Eigen::Array<S, 1, Eigen::Dynamic> inv_std;
};

/// Layer normalisation of each column, without gain/bias.
template <class S>
Mat<S> layer_norm(const Mat<S>& y, Eigen::Array<S, 1, Eigen::Dynamic>* inv_std_out = nullptr) {
  const auto n = static_cast<S>(y.rows());
  const Eigen::Array<S, 1, Eigen::Dynamic> mean = y.colwise().sum().array() / n;
  Mat<S> centred = y.rowwise() - mean.matrix();
  const Eigen::Array<S, 1, Eigen::Dynamic> var = centred.colwise().squaredNorm().array() / n;
  const Eigen::Array<S, 1, Eigen::Dynamic> inv = (var + S(kLayerNormEps)).rsqrt();
  centred.array().rowwise() *= inv;
  if (inv_std_out) *inv_std_out = inv;
  return centred;
}

template <class S>
Mat<S> dense_norm_forward(const DenseNorm<S>& l, const Mat<S>& x, DenseNormCache<S>& cache) {
  cache.input = x;
  Mat<S> y = l.w * x;
  y.colwise() += l.b.col(0);
  cache.xhat = layer_norm<S>(y, &cache.inv_std);
  cache.pre_relu = (cache.xhat.array().colwise() * l.gain.col(0).array()).matrix();
  cache.pre_relu.colwise() += l.beta.col(0);
  return cache.pre_relu.cwiseMax(S(0));
}

template <class S>
Mat<S> dense_norm_backward(const DenseNorm<S>& l, const DenseNormCache<S>& cache, const Mat<S>& d_out,
                           DenseNorm<S>& grad) {
  const Mat<S> du = (cache.pre_relu.array() > S(0)).select(d_out, Mat<S>::Zero(d_out.rows(), d_out.cols()));
  grad.gain += (du.array() * cache.xhat.array()).rowwise().sum().matrix();
  grad.beta += du.rowwise().sum();
  const Mat<S> dxhat = (du.array().colwise() * l.gain.col(0).array()).matrix();
  const auto n = static_cast<S>(dxhat.rows());
  const Eigen::Array<S, 1, Eigen::Dynamic> m1 = dxhat.colwise().sum().array() / n;
  const Eigen::Array<S, 1, Eigen::Dynamic> m2 = (dxhat.array() * cache.xhat.array()).colwise().sum() / n;
  Mat<S> dy = dxhat;
  dy.array().rowwise() -= m1;
  dy.array() -= cache.xhat.array().rowwise() * m2;
  dy.array().rowwise() *= cache.inv_std;
  grad.w.noalias() += dy * cache.input.transpose();
  grad.b += dy.rowwise().sum();
  return l.w.transpose() * dy;
}

// ---------------------------------------------------------------------------
// Backbone and head
// ---------------------------------------------------------------------------

template <class S>
struct BackboneCache {
  LstmCache<S> lstm;
  std::vector<DenseNormCache<S>> hidden;
  Mat<S> proj_input;
};

/// LSTM final state -> (dense, layer norm, ReLU) x L -> linear projection.
template <class S>
Mat<S> backbone_forward(const NetParams<S>& p, const Mat<S>& x, int steps, BackboneCache<S>& cache) {
  Mat<S> a = lstm_forward(p, x, steps, cache.lstm);
  cache.hidden.resize(p.hidden.size());
  for (std::size_t l = 0; l < p.hidden.size(); ++l) a = dense_norm_forward(p.hidden[l], a, cache.hidden[l]);
  cache.proj_input = a;
  Mat<S> z = p.proj_w * a;
  z.colwise() += p.proj_b.col(0);
  detail::check_finite(z, "backbone embedding");
  return z;
}

template <class S>
Mat<S> backbone_forward(const NetParams<S>& p, const Mat<S>& x, int steps) {
  BackboneCache<S> cache;
  return backbone_forward(p, x, steps, cache);
}

template <class S>
void backbone_backward(const NetParams<S>& p, const BackboneCache<S>& cache, const Mat<S>& dz, NetParams<S>& grad) {
  grad.proj_w.noalias() += dz * cache.proj_input.transpose();
  grad.proj_b += dz.rowwise().sum();
  Mat<S> da = p.proj_w.transpose() * dz;
  for (std::size_t l = p.hidden.size(); l-- > 0;) da = dense_norm_backward(p.hidden[l], cache.hidden[l], da, grad.hidden[l]);
  lstm_backward(p, cache.lstm, da, grad);
}

template <class S>
Mat<S> head_logits(const NetParams<S>& p, const Mat<S>& z) {
  Mat<S> logits = p.head_w * z;
  logits.colwise() += p.head_b.col(0);
  return logits;
}

/// Column-wise softmax.
template <class S>
Mat<S> softmax(const Mat<S>& logits) {
  Mat<S> e = logits.rowwise() - logits.colwise().maxCoeff();
  e = e.array().exp().matrix();
  e.array().rowwise() /= e.colwise().sum().array();
  return e;
}

template <class S>
Mat<S> head_forward(const NetParams<S>& p, const Mat<S>& z) {
  return softmax<S>(head_logits(p, z));
}

/// Mean negative log posterior of the labels (log floored at 1e-12).
template <class S>
S xent_loss(const Mat<S>& posteriors, std::span<const int> labels) {
  S loss = 0;
  for (Eigen::Index j = 0; j < posteriors.cols(); ++j)
    loss -= std::log(std::max(posteriors(labels[j], j), S(kLogFloor)));
  return loss / static_cast<S>(posteriors.cols());
}

/// d(xent)/d(logits) = (softmax - one_hot) / B.
template <class S>
Mat<S> xent_grad_logits(const Mat<S>& posteriors, std::span<const int> labels) {
  Mat<S> d = posteriors;
  for (Eigen::Index j = 0; j < d.cols(); ++j) d(labels[j], j) -= S(1);
  return d / static_cast<S>(d.cols());
}

/// Head loss and gradients on fixed embeddings. Returns dL/dz.
template <class S>
Mat<S> head_backward(const NetParams<S>& p, const Mat<S>& z, const Mat<S>& d_logits, NetParams<S>& grad) {
  grad.head_w.noalias() += d_logits * z.transpose();
  grad.head_b += d_logits.rowwise().sum();
  return p.head_w.transpose() * d_logits;
}

/// End-to-end cross-entropy loss and gradients for a sequence batch.
template <class S>
S supervised_loss_and_grad(const NetParams<S>& p, const Mat<S>& x, int steps, std::span<const int> labels,
                           NetParams<S>* grad) {
  BackboneCache<S> cache;
  const Mat<S> z = backbone_forward(p, x, steps, cache);
  const Mat<S> post = head_forward(p, z);
  const S loss = xent_loss<S>(post, labels);
  if (grad) {
    const Mat<S> dz = head_backward(p, z, xent_grad_logits<S>(post, labels), *grad);
    backbone_backward(p, cache, dz, *grad);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight decay followed by the bias-corrected Adam update.
template <class S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

  void step(const std::vector<Mat<S>*>& params, const std::vector<Mat<S>*>& grads,
            const std::vector<bool>* trainable = nullptr) {
    if (params.size() != grads.size()) throw UsageError("AdamW: parameter / gradient count mismatch");
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.push_back(Mat<S>::Zero(p->rows(), p->cols()));
        v_.push_back(Mat<S>::Zero(p->rows(), p->cols()));
      }
    }
    ++t_;
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S lr = static_cast<S>(cfg_.lr);
    const S c1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const S c2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    const S decay = static_cast<S>(1.0 - cfg_.lr * cfg_.weight_decay);
    const S eps = static_cast<S>(cfg_.eps);
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (trainable && !(*trainable)[k]) continue;
      auto& p = *params[k];
      const auto& g = *grads[k];
      if (p.rows() != g.rows() || p.cols() != g.cols()) throw UsageError("AdamW: gradient shape mismatch");
      m_[k] = b1 * m_[k] + (S(1) - b1) * g;
      v_[k] = b2 * v_[k] + (S(1) - b2) * g.cwiseAbs2();
      p *= decay;
      p.array() -= lr * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + eps);
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<Mat<S>> m_, v_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop with early stopping
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 256;
  double lr_backbone = 1e-3;     // VICReg pre-training
  double lr_end_to_end = 1e-4;   // joint XEnt training
  double lr_head = 1e-3;         // head on a frozen backbone
  int early_stop_patience = 10;
  int max_epochs = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  AdamWConfig adamw(double lr) const { return {lr, beta1, beta2, eps, weight_decay}; }
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (!(c.lr_backbone > 0 && c.lr_end_to_end > 0 && c.lr_head > 0)) throw UsageError("learning rates must be > 0");
  if (c.early_stop_patience < 1) throw UsageError("early_stop_patience must be >= 1");
  if (c.max_epochs < 1) throw UsageError("max_epochs must be >= 1");
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
};

template <class S>
struct TrainProblem {
  std::vector<Mat<S>*> params;
  std::vector<Mat<S>*> grads;
  std::vector<bool> trainable;
  std::size_t num_samples = 0;
  // Batches smaller than this are skipped (VICReg needs batch statistics).
  std::size_t min_batch = 1;
  // Fills grads (already zeroed) for the given sample indices; returns loss.
  std::function<double(std::span<const std::size_t>)> batch_loss;
  // Validation loss with the current parameters.
  std::function<double()> validation_loss;
};

/// Epoch loop over shuffled mini-batches. Stops after `patience` epochs
/// without strict improvement in validation loss and restores the parameters
/// of the best epoch.
template <class S>
TrainHistory train(TrainProblem<S>& prob, const TrainConfig& cfg, double lr, Rng& rng) {
  validate(cfg);
  if (prob.num_samples == 0) throw DataError("no training samples");
  if (prob.params.size() != prob.grads.size() || prob.trainable.size() != prob.params.size())
    throw UsageError("train: parameter bookkeeping mismatch");
  AdamW<S> opt(cfg.adamw(lr));
  TrainHistory hist;
  std::vector<Mat<S>> best;
  for (auto* p : prob.params) best.push_back(*p);
  std::vector<std::size_t> order(prob.num_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  int stale = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t n = std::min(bs, order.size() - b);
      if (n < prob.min_batch) continue;
      for (auto* g : prob.grads) g->setZero();
      const double loss = prob.batch_loss(std::span<const std::size_t>(order.data() + b, n));
      if (!std::isfinite(loss)) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      opt.step(prob.params, prob.grads, &prob.trainable);
      total += loss * static_cast<double>(n);
      seen += n;
    }
    const double val = prob.validation_loss();
    if (!std::isfinite(val)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    hist.epochs.push_back({epoch, seen ? total / static_cast<double>(seen) : 0.0, val});
    if (val < hist.best_val_loss) {
      hist.best_val_loss = val;
      hist.best_epoch = epoch;
      for (std::size_t k = 0; k < prob.params.size(); ++k) best[k] = *prob.params[k];
      stale = 0;
    } else if (++stale >= cfg.early_stop_patience) {
      hist.early_stopped = true;
      break;
    }
  }
  for (std::size_t k = 0; k < prob.params.size(); ++k) *prob.params[k] = best[k];
  return hist;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

/// Worst relative error |a - n| / max(|a|, |n|, floor * max(1, |L|)) between
/// analytic and central-difference gradients over every element of `params`.
/// Scaling the floor by the loss keeps round-off in the differences of a large
/// loss from dominating elements whose true gradient is zero.
inline double gradient_check(const std::vector<Eigen::MatrixXd*>& params, const std::vector<const Eigen::MatrixXd*>& analytic,
                             const std::function<double()>& loss, double step = 1e-5, double floor = 1e-5) {
  floor *= std::max(1.0, std::abs(loss()));
  double worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + step;
      const double up = loss();
      p.data()[i] = saved - step;
      const double down = loss();
      p.data()[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[k]->data()[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
    }
  }
  return worst;
}

}  // namespace emgssl
