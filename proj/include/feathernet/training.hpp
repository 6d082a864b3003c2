#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "feathernet/data.hpp"
#include "feathernet/model.hpp"

namespace feathernet {

struct TrainConfig {
    double lr0 = 0.001;
    double decay_factor = 0.1;
    std::size_t decay_period = 60;  // epochs
    double momentum = 0.9;
    double focal_alpha = 1.0;
    double focal_gamma = 3.0;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    bool augment_real = false;  // apply depth augmentation to real training samples
    bool augment_all = false;   // ... or to every training sample
    double eval_threshold = 0.5;

    void validate() const;
};

// lr0 * decay_factor^floor(epoch / decay_period), epoch counted from 0.
double lr_at_epoch(const TrainConfig& config, std::size_t epoch);

inline constexpr double kFocalClamp = 1e-12;

template <typename Scalar>
struct FocalLoss {
    Scalar loss = 0;
    Tensor<Scalar> grad;  // d loss / d logits, N x 2 x 1 x 1
};

// Mean over the batch of -alpha * (1 - p_t)^gamma * log(p_t), p_t being the
// softmax probability of the true class (index 1 = real). p_t is clamped
// below at 1e-12 inside the log.
template <typename Scalar>
FocalLoss<Scalar> focal_loss(const Tensor<Scalar>& logits, std::span<const Label> labels, double alpha = 1.0,
                             double gamma = 3.0);

// Zero-mean normal weights with variance 2 / fan_in for every convolution and
// linear layer; zero biases and BN shifts, unit BN scales, reset running stats.
template <typename Scalar>
void he_initialize(Model<Scalar>& model, std::uint64_t seed);

// Heavy-ball momentum: v <- momentum * v + g; w <- w - lr * v.
// Throws (leaving w and v untouched) when g has a non-finite entry.
template <typename Scalar>
void sgd_momentum_step(std::span<Scalar> weights, std::span<const Scalar> grads, std::span<Scalar> velocity,
                       double lr, double momentum);

// Velocity buffers for every learned parameter of a model.
template <typename Scalar>
class SgdMomentum {
public:
    explicit SgdMomentum(double momentum) : momentum_(momentum) {}

    void step(Model<Scalar>& model, double lr);

private:
    double momentum_;
    std::vector<VectorX<Scalar>> velocity_;
};

// One optimizer step on a batch; returns the loss before the update.
template <typename Scalar>
Scalar train_step(Model<Scalar>& model, const Tensor<Scalar>& batch, std::span<const Label> labels,
                  const TrainConfig& config, SgdMomentum<Scalar>& optimizer, double lr);

// Stacks 1 x C x H x W tensors into a batch.
TensorF stack(std::span<const TensorF> items);

// Probability of "real" for each sample, inference mode.
std::vector<double> score_samples(const ModelF& model, std::span<const LabeledSample> samples,
                                  std::size_t batch_size = 32);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double lr = 0.0;
    double train_loss = 0.0;
    double val_acer = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> log;
    std::size_t best_epoch = 0;
    double best_val_acer = 1.0;
    ModelF best;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Full recipe: seed-derived shuffling per epoch, step-decayed lr, focal loss,
// validation ACER per epoch; keeps the lowest-ACER weights (earliest on ties).
TrainResult fit(ModelF& model, std::span<const LabeledSample> train, std::span<const LabeledSample> val,
                const TrainConfig& config, const EpochCallback& on_epoch = {});
TrainResult fit(ModelF& model, const Manifest& train, const Manifest& val, const TrainConfig& config,
                const EpochCallback& on_epoch = {});

// CSV: epoch,lr,train_loss,val_acer
void write_training_log(const std::vector<EpochRecord>& log, const std::filesystem::path& file);

}  // namespace feathernet
