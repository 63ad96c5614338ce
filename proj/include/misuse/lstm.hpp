#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "misuse/corpus.hpp"
#include "misuse/lda.hpp"

namespace misuse {

// Every training example sees this many input rows; shorter histories are
// left-padded with all-zero rows.
inline constexpr std::size_t kWindowLength = 99;
inline constexpr ActionId kPadding = -1;

struct TrainingWindow {
  std::array<ActionId, kWindowLength> input;  // kPadding marks a zero row
  ActionId target = 0;

  std::size_t real_length() const;
  std::size_t padding() const { return kWindowLength - real_length(); }
  // kWindowLength x d matrix of one-hot / zero rows.
  RowMatrix one_hot(std::size_t d) const;
};

// One window per predictable position: window i holds a_1..a_i (at most the
// last 99 of them) and targets a_{i+1}.
std::vector<TrainingWindow> encode_windows(std::span<const ActionId> session);
std::vector<TrainingWindow> encode_windows(const SessionDataset& dataset);

struct LstmShape {
  std::size_t vocabulary = 0;  // d
  std::size_t hidden = 256;
  double dropout = 0.4;
};

struct TrainingMetadata {
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  std::size_t batch_size = 0;
  double learning_rate = 0.0;
  std::uint64_t seed = 0;
};

// Single-layer LSTM -> dropout -> dense -> softmax over the action vocabulary.
// Parameters live in one flat vector (gate weights, recurrent weights, gate
// biases, dense weights, dense bias) so optimizers and gradient checks can
// treat them uniformly. Gate blocks are ordered input, forget, candidate, output.
class LstmModel {
 public:
  using Matrix = Eigen::MatrixXd;
  using Vector = Eigen::VectorXd;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using VectorMap = Eigen::Map<Vector>;
  using ConstVectorMap = Eigen::Map<const Vector>;

  LstmModel() = default;
  // All-zero weights (uniform predictions).
  explicit LstmModel(const LstmShape& shape);
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, forget-gate bias 1.
  static LstmModel initialized(const LstmShape& shape, std::uint64_t seed);

  const LstmShape& shape() const { return shape_; }
  std::size_t vocabulary_size() const { return shape_.vocabulary; }
  std::size_t hidden() const { return shape_.hidden; }
  double dropout() const { return shape_.dropout; }

  std::size_t parameter_count() const { return static_cast<std::size_t>(params_.size()); }
  Vector& parameters() { return params_; }
  const Vector& parameters() const { return params_; }

  // 4H x d input weights, 4H x H recurrent weights, 4H biases,
  // d x H dense weights, d dense biases.
  ConstMatrixMap input_weights() const;
  ConstMatrixMap recurrent_weights() const;
  ConstVectorMap gate_bias() const;
  ConstMatrixMap dense_weights() const;
  ConstVectorMap dense_bias() const;
  MatrixMap input_weights();
  MatrixMap recurrent_weights();
  VectorMap gate_bias();
  MatrixMap dense_weights();
  VectorMap dense_bias();

  // Offsets of each block inside the flat parameter vector.
  struct Layout {
    std::size_t input = 0, recurrent = 0, bias = 0, dense = 0, dense_bias = 0, total = 0;
  };
  Layout layout() const;

  TrainingMetadata metadata;

  bool operator==(const LstmModel& o) const {
    return shape_.vocabulary == o.shape_.vocabulary && shape_.hidden == o.shape_.hidden &&
           shape_.dropout == o.shape_.dropout && params_ == o.params_;
  }

 private:
  LstmShape shape_;
  Vector params_;
};

enum class Mode { kInfer, kTrain };

// Inverted-dropout mask over hidden units: entries are 0 or 1 / (1 - rate).
Eigen::VectorXd dropout_mask(std::size_t hidden, double rate, std::uint64_t seed);

// Next-action distribution after reading `rows` (each an action id or
// kPadding) from a zero state. Train mode applies dropout drawn from `seed`.
std::vector<double> forward(const LstmModel& model, std::span<const ActionId> rows,
                            Mode mode = Mode::kInfer, std::uint64_t seed = 0);
// Same, from an explicit one-hot / zero row matrix (rows x d).
std::vector<double> forward(const LstmModel& model, const RowMatrix& one_hot_rows,
                            Mode mode = Mode::kInfer, std::uint64_t seed = 0);

// Final hidden state after dropout (the dense layer's input); exposed for
// checking the dropout scaling.
Eigen::VectorXd pre_dense_activation(const LstmModel& model, std::span<const ActionId> rows,
                                     Mode mode, std::uint64_t seed = 0);

// Inference-mode next-action distributions for many windows; column j is the
// distribution for windows[j].
Eigen::MatrixXd predict(const LstmModel& model, std::span<const TrainingWindow> windows);

// Cross-entropy of a probability vector against the realized action.
double loss(std::span<const double> p, ActionId target);

// Mean cross-entropy over `batch` and its gradient with respect to every
// parameter (same layout as LstmModel::parameters()). With `masks` (one per
// window) dropout is applied with those masks; without, inference mode.
double loss_and_gradient(const LstmModel& model, std::span<const TrainingWindow> batch,
                         const std::vector<Eigen::VectorXd>* masks, Eigen::VectorXd& gradient);

struct TrainConfig {
  std::size_t max_epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 5.0;
  std::size_t patience = 5;  // early stopping on validation loss; 0 disables
  bool bucket_by_length = true;
  std::uint64_t seed = 1;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;  // NaN when no validation windows
};

struct TrainResult {
  LstmModel model;
  std::vector<EpochStats> curve;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Minibatch BPTT with Adam and global-norm clipping. Returns the weights of
// the epoch with the lowest validation loss.
TrainResult train(LstmModel model, std::span<const TrainingWindow> train_windows,
                  std::span<const TrainingWindow> validation_windows, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

// Mean inference-mode cross-entropy over windows.
double mean_loss(const LstmModel& model, std::span<const TrainingWindow> windows);

// Fraction of windows whose argmax prediction (lowest index on ties) is the target.
double accuracy(const LstmModel& model, std::span<const TrainingWindow> windows);

// Max relative error between the analytic gradient and central differences
// of the loss on one window.
double gradient_check(const LstmModel& model, const TrainingWindow& window, double epsilon = 1e-5,
                      const Eigen::VectorXd* mask = nullptr);

std::string lstm_to_json(const LstmModel& model);
LstmModel lstm_from_json(const std::string& text);

std::string loss_curve_csv(std::span<const EpochStats> curve);

}  // namespace misuse
