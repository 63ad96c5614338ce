#include "misuse/lstm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "misuse/error.hpp"
#include "misuse/random.hpp"

namespace misuse {

using nlohmann::json;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Windows

std::size_t TrainingWindow::real_length() const {
  std::size_t pad = 0;
  while (pad < kWindowLength && input[pad] == kPadding) ++pad;
  return kWindowLength - pad;
}

RowMatrix TrainingWindow::one_hot(std::size_t d) const {
  RowMatrix m(kWindowLength, d);
  for (std::size_t t = 0; t < kWindowLength; ++t)
    if (input[t] != kPadding) m(t, static_cast<std::size_t>(input[t])) = 1.0;
  return m;
}

std::vector<TrainingWindow> encode_windows(std::span<const ActionId> session) {
  const std::size_t n = session.size();
  if (n < 2) throw InvalidArgument("a session needs at least two actions to form windows");
  std::vector<TrainingWindow> out;
  out.reserve(n - 1);
  for (std::size_t i = 1; i < n; ++i) {
    TrainingWindow w;
    w.input.fill(kPadding);
    const std::size_t visible = std::min(i, kWindowLength);
    const std::size_t first = i - visible;
    for (std::size_t k = 0; k < visible; ++k)
      w.input[kWindowLength - visible + k] = session[first + k];
    w.target = session[i];
    out.push_back(w);
  }
  return out;
}

std::vector<TrainingWindow> encode_windows(const SessionDataset& dataset) {
  std::vector<TrainingWindow> out;
  for (const auto& s : dataset.sessions()) {
    if (s.length() < 2) continue;
    auto w = encode_windows(s.actions);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

LstmModel::LstmModel(const LstmShape& shape) : shape_(shape) {
  if (shape.vocabulary < 2) throw InvalidArgument("the vocabulary must hold at least 2 actions");
  if (shape.hidden < 1) throw InvalidArgument("the LSTM needs at least one hidden unit");
  if (!(shape.dropout >= 0.0 && shape.dropout < 1.0))
    throw InvalidArgument("dropout rate must lie in [0, 1)");
  params_ = Vector::Zero(static_cast<Eigen::Index>(layout().total));
}

LstmModel::Layout LstmModel::layout() const {
  const std::size_t d = shape_.vocabulary, H = shape_.hidden;
  Layout l;
  l.input = 0;
  l.recurrent = l.input + 4 * H * d;
  l.bias = l.recurrent + 4 * H * H;
  l.dense = l.bias + 4 * H;
  l.dense_bias = l.dense + d * H;
  l.total = l.dense_bias + d;
  return l;
}

LstmModel LstmModel::initialized(const LstmShape& shape, std::uint64_t seed) {
  LstmModel m(shape);
  Rng rng(seed);
  const auto H = shape.hidden, d = shape.vocabulary;
  const double gate_bound = 1.0 / std::sqrt(static_cast<double>(d + H));
  const double dense_bound = 1.0 / std::sqrt(static_cast<double>(H));
  const auto l = m.layout();
  auto& p = m.params_;
  for (std::size_t i = l.input; i < l.dense; ++i) p[static_cast<Eigen::Index>(i)] = rng.uniform(-gate_bound, gate_bound);
  for (std::size_t i = l.dense; i < l.total; ++i) p[static_cast<Eigen::Index>(i)] = rng.uniform(-dense_bound, dense_bound);
  m.gate_bias().segment(static_cast<Eigen::Index>(H), static_cast<Eigen::Index>(H)).setOnes();
  m.metadata.seed = seed;
  return m;
}

namespace {
inline Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }
}  // namespace

LstmModel::ConstMatrixMap LstmModel::input_weights() const {
  return {params_.data() + layout().input, ix(4 * hidden()), ix(vocabulary_size())};
}
LstmModel::ConstMatrixMap LstmModel::recurrent_weights() const {
  return {params_.data() + layout().recurrent, ix(4 * hidden()), ix(hidden())};
}
LstmModel::ConstVectorMap LstmModel::gate_bias() const {
  return {params_.data() + layout().bias, ix(4 * hidden())};
}
LstmModel::ConstMatrixMap LstmModel::dense_weights() const {
  return {params_.data() + layout().dense, ix(vocabulary_size()), ix(hidden())};
}
LstmModel::ConstVectorMap LstmModel::dense_bias() const {
  return {params_.data() + layout().dense_bias, ix(vocabulary_size())};
}
LstmModel::MatrixMap LstmModel::input_weights() {
  return {params_.data() + layout().input, ix(4 * hidden()), ix(vocabulary_size())};
}
LstmModel::MatrixMap LstmModel::recurrent_weights() {
  return {params_.data() + layout().recurrent, ix(4 * hidden()), ix(hidden())};
}
LstmModel::VectorMap LstmModel::gate_bias() { return {params_.data() + layout().bias, ix(4 * hidden())}; }
LstmModel::MatrixMap LstmModel::dense_weights() {
  return {params_.data() + layout().dense, ix(vocabulary_size()), ix(hidden())};
}
LstmModel::VectorMap LstmModel::dense_bias() {
  return {params_.data() + layout().dense_bias, ix(vocabulary_size())};
}

Vector dropout_mask(std::size_t hidden, double rate, std::uint64_t seed) {
  Rng rng(seed);
  Vector m(static_cast<Eigen::Index>(hidden));
  const double keep = 1.0 - rate;
  for (Eigen::Index i = 0; i < m.size(); ++i) m[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Batched recurrence

namespace {

// Vectorizable logistic and tanh (Eigen vectorizes exp for doubles).
template <typename Derived>
void sigmoid_inplace(Eigen::ArrayBase<Derived>&& x) {
  x = 1.0 / (1.0 + (-x).exp());
}

template <typename Derived>
void tanh_inplace(Eigen::ArrayBase<Derived>&& x) {
  x = 2.0 / (1.0 + (-2.0 * x).exp()) - 1.0;
}

// Columns are sequences of equal length; entries are action ids or kPadding.
struct Batch {
  std::vector<std::span<const ActionId>> rows;
  std::size_t length = 0;

  std::size_t size() const { return rows.size(); }
  // First step at which any column carries a real action. Every column is
  // pure padding before it, so all columns share one state up to there.
  std::size_t start() const {
    std::size_t s = length;
    for (const auto& r : rows) {
      std::size_t k = 0;
      while (k < s && r[k] == kPadding) ++k;
      s = std::min(s, k);
    }
    return s;
  }
};

Batch make_batch(std::span<const TrainingWindow> windows) {
  Batch b;
  b.length = kWindowLength;
  b.rows.reserve(windows.size());
  for (const auto& w : windows) b.rows.emplace_back(w.input.data(), kWindowLength);
  return b;
}

// Everything the backward pass needs from one forward pass.
struct Trace {
  std::size_t start = 0;
  // Shared padding trajectory: state after k zero-input steps (k = 0..start),
  // and the gates of step k (k = 1..start).
  std::vector<Vector> pad_h, pad_c, pad_gates, pad_tanh_c;
  // Batch steps t = start..length-1 stored at t - start.
  std::vector<Matrix> gates, c, tanh_c, h;
  Matrix h0, c0;
  Matrix final_input;  // hidden state after dropout
  Matrix logits, probs;
};

void cell_step(const LstmModel& model, const Matrix& h_prev, const Matrix& c_prev,
               const std::vector<ActionId>* inputs, Matrix& gates, Matrix& c, Matrix& tanh_c,
               Matrix& h) {
  const auto H = static_cast<Eigen::Index>(model.hidden());
  const auto B = h_prev.cols();
  gates.resize(4 * H, B);
  gates.noalias() = model.recurrent_weights() * h_prev;
  gates.colwise() += model.gate_bias();
  if (inputs) {
    const auto Wx = model.input_weights();
    for (Eigen::Index j = 0; j < B; ++j) {
      const ActionId a = (*inputs)[static_cast<std::size_t>(j)];
      if (a != kPadding) gates.col(j) += Wx.col(a);
    }
  }
  sigmoid_inplace(gates.topRows(2 * H).array());
  tanh_inplace(gates.middleRows(2 * H, H).array());
  sigmoid_inplace(gates.bottomRows(H).array());
  c.resize(H, B);
  c.array() = gates.middleRows(H, H).array() * c_prev.array() +
              gates.topRows(H).array() * gates.middleRows(2 * H, H).array();
  tanh_c = c;
  tanh_inplace(tanh_c.array());
  h.resize(H, B);
  h.array() = gates.bottomRows(H).array() * tanh_c.array();
}

void run_forward(const LstmModel& model, const Batch& batch, const std::vector<Vector>* masks,
                 Trace& tr) {
  const auto H = static_cast<Eigen::Index>(model.hidden());
  const auto B = static_cast<Eigen::Index>(batch.size());
  const std::size_t L = batch.length;
  tr.start = batch.start();
  if (tr.start == L && L > 0) tr.start = L - 1;  // all padding: run the last step batched

  tr.pad_h.resize(tr.start + 1);
  tr.pad_c.resize(tr.start + 1);
  tr.pad_gates.resize(tr.start + 1);
  tr.pad_tanh_c.resize(tr.start + 1);
  tr.pad_h[0] = Vector::Zero(H);
  tr.pad_c[0] = Vector::Zero(H);
  {
    Matrix g, c, tc, h;
    for (std::size_t k = 1; k <= tr.start; ++k) {
      cell_step(model, tr.pad_h[k - 1], tr.pad_c[k - 1], nullptr, g, c, tc, h);
      tr.pad_gates[k] = g;
      tr.pad_c[k] = c;
      tr.pad_tanh_c[k] = tc;
      tr.pad_h[k] = h;
    }
  }

  tr.h0 = tr.pad_h[tr.start].replicate(1, B);
  tr.c0 = tr.pad_c[tr.start].replicate(1, B);
  const std::size_t steps = L - tr.start;
  if (tr.gates.size() < steps) {
    tr.gates.resize(steps);
    tr.c.resize(steps);
    tr.tanh_c.resize(steps);
    tr.h.resize(steps);
  }
  std::vector<ActionId> inputs(static_cast<std::size_t>(B));
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = tr.start + s;
    for (std::size_t j = 0; j < batch.size(); ++j) inputs[j] = batch.rows[j][t];
    const Matrix& hp = s == 0 ? tr.h0 : tr.h[s - 1];
    const Matrix& cp = s == 0 ? tr.c0 : tr.c[s - 1];
    cell_step(model, hp, cp, &inputs, tr.gates[s], tr.c[s], tr.tanh_c[s], tr.h[s]);
  }

  const Matrix& last = steps ? tr.h[steps - 1] : tr.h0;
  tr.final_input = last;
  if (masks)
    for (Eigen::Index j = 0; j < B; ++j)
      tr.final_input.col(j).array() *= (*masks)[static_cast<std::size_t>(j)].array();
  tr.logits.noalias() = model.dense_weights() * tr.final_input;
  tr.logits.colwise() += model.dense_bias();
  tr.probs.resize(tr.logits.rows(), B);
  for (Eigen::Index j = 0; j < B; ++j) {
    const double mx = tr.logits.col(j).maxCoeff();
    tr.probs.col(j) = (tr.logits.col(j).array() - mx).exp();
    tr.probs.col(j) /= tr.probs.col(j).sum();
    // Keep every probability strictly positive even under extreme logits.
    tr.probs.col(j) = tr.probs.col(j).cwiseMax(std::numeric_limits<double>::min());
  }
}

// -log softmax(logits)[target], computed stably.
double column_loss(const Matrix& logits, Eigen::Index j, ActionId target) {
  const double mx = logits.col(j).maxCoeff();
  const double lse = mx + std::log((logits.col(j).array() - mx).exp().sum());
  return lse - logits(target, j);
}

// Accumulates d(mean loss)/d(params) into `grad` (already sized and zeroed).
void run_backward(const LstmModel& model, const Batch& batch, std::span<const ActionId> targets,
                  const std::vector<Vector>* masks, const Trace& tr, Vector& grad) {
  const auto H = static_cast<Eigen::Index>(model.hidden());
  const auto d = static_cast<Eigen::Index>(model.vocabulary_size());
  const auto B = static_cast<Eigen::Index>(batch.size());
  const auto lay = model.layout();
  Eigen::Map<Matrix> gWx(grad.data() + lay.input, 4 * H, d);
  Eigen::Map<Matrix> gWh(grad.data() + lay.recurrent, 4 * H, H);
  Eigen::Map<Vector> gb(grad.data() + lay.bias, 4 * H);
  Eigen::Map<Matrix> gWy(grad.data() + lay.dense, d, H);
  Eigen::Map<Vector> gby(grad.data() + lay.dense_bias, d);

  Matrix dlogits = tr.probs;
  for (Eigen::Index j = 0; j < B; ++j) dlogits(targets[static_cast<std::size_t>(j)], j) -= 1.0;
  dlogits /= static_cast<double>(B);
  gWy.noalias() += dlogits * tr.final_input.transpose();
  gby += dlogits.rowwise().sum();
  Matrix dh = model.dense_weights().transpose() * dlogits;
  if (masks)
    for (Eigen::Index j = 0; j < B; ++j) dh.col(j).array() *= (*masks)[static_cast<std::size_t>(j)].array();
  Matrix dc = Matrix::Zero(H, B);
  Matrix dz(4 * H, B);

  const auto Wh = model.recurrent_weights();
  const std::size_t steps = batch.length - tr.start;
  for (std::size_t s = steps; s-- > 0;) {
    const std::size_t t = tr.start + s;
    const Matrix& g = tr.gates[s];
    const Matrix& c_prev = s == 0 ? tr.c0 : tr.c[s - 1];
    const Matrix& h_prev = s == 0 ? tr.h0 : tr.h[s - 1];
    const auto I = g.topRows(H).array();
    const auto F = g.middleRows(H, H).array();
    const auto G = g.middleRows(2 * H, H).array();
    const auto O = g.bottomRows(H).array();
    const auto tc = tr.tanh_c[s].array();
    dc.array() += dh.array() * O * (1.0 - tc * tc);
    dz.topRows(H).array() = dc.array() * G * I * (1.0 - I);
    dz.middleRows(H, H).array() = dc.array() * c_prev.array() * F * (1.0 - F);
    dz.middleRows(2 * H, H).array() = dc.array() * I * (1.0 - G * G);
    dz.bottomRows(H).array() = dh.array() * tc * O * (1.0 - O);
    dc.array() *= F;
    gWh.noalias() += dz * h_prev.transpose();
    gb += dz.rowwise().sum();
    for (Eigen::Index j = 0; j < B; ++j) {
      const ActionId a = batch.rows[static_cast<std::size_t>(j)][t];
      if (a != kPadding) gWx.col(a) += dz.col(j);
    }
    dh.noalias() = Wh.transpose() * dz;
  }

  // All columns started from the same padded state: fold their adjoints and
  // run one backward pass through the shared padding trajectory.
  Vector dhv = dh.rowwise().sum();
  Vector dcv = dc.rowwise().sum();
  Vector dzv(4 * H);
  for (std::size_t k = tr.start; k >= 1; --k) {
    const Vector& g = tr.pad_gates[k];
    const auto I = g.head(H).array();
    const auto F = g.segment(H, H).array();
    const auto G = g.segment(2 * H, H).array();
    const auto O = g.tail(H).array();
    const auto tc = tr.pad_tanh_c[k].array();
    dcv.array() += dhv.array() * O * (1.0 - tc * tc);
    dzv.head(H).array() = dcv.array() * G * I * (1.0 - I);
    dzv.segment(H, H).array() = dcv.array() * tr.pad_c[k - 1].array() * F * (1.0 - F);
    dzv.segment(2 * H, H).array() = dcv.array() * I * (1.0 - G * G);
    dzv.tail(H).array() = dhv.array() * tc * O * (1.0 - O);
    dcv.array() *= F;
    gWh.noalias() += dzv * tr.pad_h[k - 1].transpose();
    gb += dzv;
    dhv.noalias() = Wh.transpose() * dzv;
  }
}

void check_rows(const LstmModel& model, std::span<const ActionId> rows) {
  if (rows.empty()) throw InvalidArgument("forward needs at least one input row");
  if (rows.size() > kWindowLength)
    throw InvalidArgument("at most " + std::to_string(kWindowLength) + " input rows are allowed");
  const auto d = static_cast<ActionId>(model.vocabulary_size());
  for (ActionId a : rows)
    if (a != kPadding && (a < 0 || a >= d))
      throw InvalidArgument("input action " + std::to_string(a) + " outside vocabulary of size " +
                            std::to_string(d));
}

}  // namespace

std::vector<double> forward(const LstmModel& model, std::span<const ActionId> rows, Mode mode,
                            std::uint64_t seed) {
  check_rows(model, rows);
  Batch b;
  b.rows.push_back(rows);
  b.length = rows.size();
  std::vector<Vector> masks;
  if (mode == Mode::kTrain) masks.push_back(dropout_mask(model.hidden(), model.dropout(), seed));
  Trace tr;
  run_forward(model, b, mode == Mode::kTrain ? &masks : nullptr, tr);
  return {tr.probs.data(), tr.probs.data() + tr.probs.size()};
}

std::vector<double> forward(const LstmModel& model, const RowMatrix& one_hot_rows, Mode mode,
                            std::uint64_t seed) {
  if (one_hot_rows.cols != model.vocabulary_size())
    throw InvalidArgument("input rows have dimension " + std::to_string(one_hot_rows.cols) +
                          ", model expects " + std::to_string(model.vocabulary_size()));
  std::vector<ActionId> ids;
  for (std::size_t r = 0; r < one_hot_rows.rows; ++r) {
    ActionId id = kPadding;
    for (std::size_t c = 0; c < one_hot_rows.cols; ++c) {
      const double v = one_hot_rows(r, c);
      if (v == 0.0) continue;
      if (v != 1.0 || id != kPadding)
        throw InvalidArgument("row " + std::to_string(r) + " is neither zero nor one-hot");
      id = static_cast<ActionId>(c);
    }
    ids.push_back(id);
  }
  return forward(model, ids, mode, seed);
}

Vector pre_dense_activation(const LstmModel& model, std::span<const ActionId> rows, Mode mode,
                            std::uint64_t seed) {
  check_rows(model, rows);
  Batch b;
  b.rows.push_back(rows);
  b.length = rows.size();
  std::vector<Vector> masks;
  if (mode == Mode::kTrain) masks.push_back(dropout_mask(model.hidden(), model.dropout(), seed));
  Trace tr;
  run_forward(model, b, mode == Mode::kTrain ? &masks : nullptr, tr);
  return tr.final_input.col(0);
}

namespace {

constexpr std::size_t kPredictChunk = 128;

// Window positions ordered by real length so chunks waste little work on padding.
std::vector<std::size_t> by_length(std::span<const TrainingWindow> windows) {
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return windows[a].real_length() < windows[b].real_length();
  });
  return order;
}

template <typename Fn>
void for_each_chunk(const LstmModel& model, std::span<const TrainingWindow> windows, Fn&& fn) {
  const auto order = by_length(windows);
  Trace tr;
  std::vector<TrainingWindow> chunk;
  for (std::size_t start = 0; start < order.size(); start += kPredictChunk) {
    const std::size_t end = std::min(order.size(), start + kPredictChunk);
    chunk.clear();
    for (std::size_t i = start; i < end; ++i) chunk.push_back(windows[order[i]]);
    run_forward(model, make_batch(chunk), nullptr, tr);
    for (std::size_t i = start; i < end; ++i) fn(order[i], tr, static_cast<Eigen::Index>(i - start));
  }
}

}  // namespace

Matrix predict(const LstmModel& model, std::span<const TrainingWindow> windows) {
  Matrix out(static_cast<Eigen::Index>(model.vocabulary_size()),
             static_cast<Eigen::Index>(windows.size()));
  for_each_chunk(model, windows, [&](std::size_t pos, const Trace& tr, Eigen::Index col) {
    out.col(static_cast<Eigen::Index>(pos)) = tr.probs.col(col);
  });
  return out;
}

double loss(std::span<const double> p, ActionId target) {
  if (target < 0 || static_cast<std::size_t>(target) >= p.size())
    throw InvalidArgument("target outside the distribution");
  return -std::log(p[static_cast<std::size_t>(target)]);
}

double loss_and_gradient(const LstmModel& model, std::span<const TrainingWindow> batch,
                         const std::vector<Vector>* masks, Vector& gradient) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  if (masks && masks->size() != batch.size()) throw InvalidArgument("one dropout mask per window");
  gradient = Vector::Zero(static_cast<Eigen::Index>(model.parameter_count()));
  const Batch b = make_batch(batch);
  Trace tr;
  run_forward(model, b, masks, tr);
  std::vector<ActionId> targets;
  double total = 0.0;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    targets.push_back(batch[j].target);
    total += column_loss(tr.logits, static_cast<Eigen::Index>(j), batch[j].target);
  }
  run_backward(model, b, targets, masks, tr, gradient);
  return total / static_cast<double>(batch.size());
}

double mean_loss(const LstmModel& model, std::span<const TrainingWindow> windows) {
  if (windows.empty()) throw InvalidArgument("mean loss over no windows");
  std::vector<double> per(windows.size());
  for_each_chunk(model, windows, [&](std::size_t pos, const Trace& tr, Eigen::Index col) {
    per[pos] = column_loss(tr.logits, col, windows[pos].target);
  });
  double total = 0.0;
  for (double v : per) total += v;
  return total / static_cast<double>(windows.size());
}

double accuracy(const LstmModel& model, std::span<const TrainingWindow> windows) {
  if (windows.empty()) throw InvalidArgument("accuracy over no windows");
  std::size_t correct = 0;
  for_each_chunk(model, windows, [&](std::size_t pos, const Trace& tr, Eigen::Index col) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < tr.probs.rows(); ++r)
      if (tr.probs(r, col) > tr.probs(best, col)) best = r;
    if (best == windows[pos].target) ++correct;
  });
  return static_cast<double>(correct) / static_cast<double>(windows.size());
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<std::vector<std::size_t>> make_batches(std::span<const TrainingWindow> windows,
                                                   const TrainConfig& cfg, Rng& rng) {
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  if (cfg.bucket_by_length) {
    // Sort within pools of 50 batches so each batch has similar history
    // lengths; pools and batch order stay random.
    const std::size_t pool = cfg.batch_size * 50;
    for (std::size_t s = 0; s < order.size(); s += pool) {
      const auto e = std::min(order.size(), s + pool);
      std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(s),
                       order.begin() + static_cast<std::ptrdiff_t>(e),
                       [&](std::size_t a, std::size_t b) {
                         return windows[a].real_length() < windows[b].real_length();
                       });
    }
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < order.size(); s += cfg.batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + cfg.batch_size)));
  if (cfg.bucket_by_length) rng.shuffle(batches);
  return batches;
}

}  // namespace

TrainResult train(LstmModel model, std::span<const TrainingWindow> train_windows,
                  std::span<const TrainingWindow> validation_windows, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  if (train_windows.empty()) throw InvalidArgument("no training windows");
  if (cfg.batch_size < 1) throw InvalidArgument("batch size must be positive");
  if (cfg.max_epochs < 1) throw InvalidArgument("need at least one epoch");
  const auto d = static_cast<ActionId>(model.vocabulary_size());
  for (const auto* set : {&train_windows, &validation_windows})
    for (const auto& w : *set)
      if (w.target < 0 || w.target >= d) throw InvalidArgument("window target outside vocabulary");

  Rng rng(cfg.seed);
  const auto P = static_cast<Eigen::Index>(model.parameter_count());
  Vector m1 = Vector::Zero(P), m2 = Vector::Zero(P), grad(P);
  std::size_t step = 0;
  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  LstmModel best = model;
  std::size_t best_epoch = 0, since_best = 0;
  const bool use_dropout = model.dropout() > 0.0;
  const double keep = 1.0 - model.dropout();

  std::vector<TrainingWindow> batch;
  std::vector<Vector> masks;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto batches = make_batches(train_windows, cfg, rng);
    double epoch_loss = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      batch.clear();
      masks.clear();
      for (std::size_t idx : batches[bi]) {
        batch.push_back(train_windows[idx]);
        if (use_dropout) {
          Vector mk(static_cast<Eigen::Index>(model.hidden()));
          for (Eigen::Index i = 0; i < mk.size(); ++i) mk[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
          masks.push_back(std::move(mk));
        }
      }
      const double l = loss_and_gradient(model, batch, use_dropout ? &masks : nullptr, grad);
      const double norm = grad.norm();
      if (!std::isfinite(l) || !std::isfinite(norm)) {
        std::ostringstream os;
        os << "non-finite training loss at epoch " << epoch << ", batch " << bi + 1
           << " (loss " << l << ", gradient norm " << norm << ")";
        throw NumericalError(os.str());
      }
      if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) grad *= cfg.clip_norm / norm;
      ++step;
      m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * grad;
      m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      model.parameters().array() -=
          cfg.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + cfg.epsilon);
      epoch_loss += l * static_cast<double>(batch.size());
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_loss / static_cast<double>(train_windows.size());
    stats.validation_loss = validation_windows.empty() ? std::numeric_limits<double>::quiet_NaN()
                                                       : mean_loss(model, validation_windows);
    result.curve.push_back(stats);
    if (on_epoch) on_epoch(stats);

    const double monitored = validation_windows.empty() ? stats.train_loss : stats.validation_loss;
    if (monitored < best_val) {
      best_val = monitored;
      best = model;
      best_epoch = epoch;
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }

  best.metadata.epochs = result.curve.size();
  best.metadata.best_epoch = best_epoch;
  best.metadata.batch_size = cfg.batch_size;
  best.metadata.learning_rate = cfg.learning_rate;
  best.metadata.seed = cfg.seed;
  result.model = std::move(best);
  return result;
}

// ---------------------------------------------------------------------------
// Gradient verification

namespace {

// Straight single-sequence forward pass in extended precision. Shares no code
// with the batched engine, so it doubles as an oracle for it.
long double reference_loss(const LstmModel& model, const TrainingWindow& window, const Vector* mask) {
  using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  using LVector = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
  const auto H = static_cast<Eigen::Index>(model.hidden());
  const LMatrix Wx = model.input_weights().cast<long double>();
  const LMatrix Wh = model.recurrent_weights().cast<long double>();
  const LVector b = model.gate_bias().cast<long double>();
  const LMatrix Wy = model.dense_weights().cast<long double>();
  const LVector by = model.dense_bias().cast<long double>();
  const auto sig = [](long double x) { return 1.0L / (1.0L + std::exp(-x)); };
  LVector h = LVector::Zero(H), c = LVector::Zero(H);
  for (ActionId a : window.input) {
    LVector z = Wh * h + b;
    if (a != kPadding) z += Wx.col(a);
    for (Eigen::Index k = 0; k < H; ++k) {
      const long double i = sig(z[k]), f = sig(z[H + k]), g = std::tanh(z[2 * H + k]),
                        o = sig(z[3 * H + k]);
      c[k] = f * c[k] + i * g;
      h[k] = o * std::tanh(c[k]);
    }
  }
  if (mask) h.array() *= mask->cast<long double>().array();
  const LVector logits = Wy * h + by;
  const long double mx = logits.maxCoeff();
  return mx + std::log((logits.array() - mx).exp().sum()) - logits[window.target];
}

}  // namespace

double gradient_check(const LstmModel& model, const TrainingWindow& window, double epsilon,
                      const Vector* mask) {
  std::vector<Vector> masks;
  if (mask) masks.push_back(*mask);
  Vector analytic;
  loss_and_gradient(model, std::span<const TrainingWindow>(&window, 1), mask ? &masks : nullptr,
                    analytic);

  LstmModel probe = model;
  double worst = 0.0;
  auto& p = probe.parameters();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + epsilon;
    const long double up = reference_loss(probe, window, mask);
    p[i] = saved - epsilon;
    const long double down = reference_loss(probe, window, mask);
    p[i] = saved;
    // Divide by the step actually taken after rounding to double.
    const long double step = static_cast<long double>(saved + epsilon) - static_cast<long double>(saved - epsilon);
    const double numeric = static_cast<double>((up - down) / step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

const char* const kGateNames[] = {"i", "f", "g", "o"};

json rows_of(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_of(const json& j, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw FormatError("weight '" + name + "' has the wrong number of rows");
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw FormatError("weight '" + name + "' has the wrong number of columns");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace

std::string lstm_to_json(const LstmModel& model) {
  const auto H = static_cast<Eigen::Index>(model.hidden());
  const auto d = static_cast<Eigen::Index>(model.vocabulary_size());
  json weights;
  for (int g = 0; g < 4; ++g) {
    // Gate weights as hidden x (d + hidden): input part, then recurrent part.
    Matrix w(H, d + H);
    w.leftCols(d) = model.input_weights().middleRows(g * H, H);
    w.rightCols(H) = model.recurrent_weights().middleRows(g * H, H);
    weights[std::string("W_") + kGateNames[g]] = rows_of(w);
    Vector b = model.gate_bias().segment(g * H, H);
    weights[std::string("b_") + kGateNames[g]] = std::vector<double>(b.data(), b.data() + b.size());
  }
  weights["W_dense"] = rows_of(model.dense_weights().transpose());  // hidden x d
  Vector by = model.dense_bias();
  weights["b_dense"] = std::vector<double>(by.data(), by.data() + by.size());
  json j;
  j["version"] = 1;
  j["d"] = model.vocabulary_size();
  j["hidden"] = model.hidden();
  j["dropout"] = model.dropout();
  j["weights"] = std::move(weights);
  j["training"] = {{"epochs", model.metadata.epochs},
                   {"best_epoch", model.metadata.best_epoch},
                   {"batch_size", model.metadata.batch_size},
                   {"learning_rate", model.metadata.learning_rate},
                   {"seed", model.metadata.seed}};
  return j.dump();
}

LstmModel lstm_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("version").get<int>() != 1) throw FormatError("unsupported LSTM model version");
    LstmShape shape;
    shape.vocabulary = j.at("d").get<std::size_t>();
    shape.hidden = j.at("hidden").get<std::size_t>();
    shape.dropout = j.at("dropout").get<double>();
    LstmModel model(shape);
    const auto H = static_cast<Eigen::Index>(shape.hidden);
    const auto d = static_cast<Eigen::Index>(shape.vocabulary);
    const auto& w = j.at("weights");
    for (int g = 0; g < 4; ++g) {
      const std::string wn = std::string("W_") + kGateNames[g];
      const std::string bn = std::string("b_") + kGateNames[g];
      const Matrix m = matrix_of(w.at(wn), H, d + H, wn);
      model.input_weights().middleRows(g * H, H) = m.leftCols(d);
      model.recurrent_weights().middleRows(g * H, H) = m.rightCols(H);
      const auto b = w.at(bn).get<std::vector<double>>();
      if (static_cast<Eigen::Index>(b.size()) != H) throw FormatError("bias '" + bn + "' has the wrong size");
      model.gate_bias().segment(g * H, H) = Eigen::Map<const Vector>(b.data(), H);
    }
    model.dense_weights() = matrix_of(w.at("W_dense"), H, d, "W_dense").transpose();
    const auto by = w.at("b_dense").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(by.size()) != d) throw FormatError("bias 'b_dense' has the wrong size");
    model.dense_bias() = Eigen::Map<const Vector>(by.data(), d);
    if (j.contains("training")) {
      const auto& t = j["training"];
      model.metadata.epochs = t.value("epochs", std::size_t{0});
      model.metadata.best_epoch = t.value("best_epoch", std::size_t{0});
      model.metadata.batch_size = t.value("batch_size", std::size_t{0});
      model.metadata.learning_rate = t.value("learning_rate", 0.0);
      model.metadata.seed = t.value("seed", std::uint64_t{0});
    }
    if (!model.parameters().allFinite()) throw FormatError("LSTM weights are not finite");
    return model;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed LSTM model: ") + e.what());
  }
}

std::string loss_curve_csv(std::span<const EpochStats> curve) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,val_loss\n";
  for (const auto& e : curve) {
    os << e.epoch << ',' << e.train_loss << ',';
    if (!std::isnan(e.validation_loss)) os << e.validation_loss;
    os << '\n';
  }
  return os.str();
}

}  // namespace misuse
