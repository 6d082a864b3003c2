#include "feathernet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "feathernet/metrics.hpp"
#include "feathernet/rng.hpp"

namespace feathernet {

void TrainConfig::validate() const {
    if (!(lr0 > 0.0) || !(decay_factor > 0.0) || decay_period == 0 || !(momentum >= 0.0) || !(focal_alpha > 0.0)) {
        throw Error("train", "learning rate, decay, momentum and alpha must be positive");
    }
    if (!(focal_gamma >= 0.0)) throw Error("train", "gamma must be >= 0");
    if (epochs == 0 || batch_size == 0) throw Error("train", "epochs and batch size must be positive");
}

double lr_at_epoch(const TrainConfig& config, std::size_t epoch) {
    return config.lr0 * std::pow(config.decay_factor, static_cast<double>(epoch / config.decay_period));
}

template <typename Scalar>
FocalLoss<Scalar> focal_loss(const Tensor<Scalar>& logits, std::span<const Label> labels, double alpha, double gamma) {
    const auto n = logits.shape().n;
    if (logits.shape().sample() != 2) throw ShapeError("focal loss", "class axis: expected 2 logits per sample");
    if (labels.size() != n) {
        throw ShapeError("focal loss", "batch axis: " + std::to_string(n) + " logit rows, " +
                                           std::to_string(labels.size()) + " labels");
    }
    FocalLoss<Scalar> out;
    out.grad = Tensor<Scalar>({n, 2, 1, 1});
    const double log_floor = std::log(kFocalClamp);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t t = labels[i] == Label::Real ? 1 : 0;
        const double zt = logits[2 * i + t];
        const double zo = logits[2 * i + (1 - t)];
        // log p_t = -log(1 + exp(zo - zt)), evaluated without overflow.
        const double d = zo - zt;
        const double log_p = d > 0 ? -(d + std::log1p(std::exp(-d))) : -std::log1p(std::exp(d));
        const double p = std::exp(log_p);
        const double q = 1.0 - p;
        const double log_pc = std::max(log_p, log_floor);
        total += -alpha * std::pow(q, gamma) * log_pc;
        // dL/dz_t = alpha * (gamma * p * q^gamma * log p - q^(gamma+1))
        const double dzt = alpha * (gamma * p * std::pow(q, gamma) * log_pc - std::pow(q, gamma + 1.0));
        out.grad[2 * i + t] = static_cast<Scalar>(dzt / static_cast<double>(n));
        out.grad[2 * i + (1 - t)] = static_cast<Scalar>(-dzt / static_cast<double>(n));
    }
    out.loss = static_cast<Scalar>(total / static_cast<double>(n));
    return out;
}

template <typename Scalar>
void he_initialize(Model<Scalar>& model, std::uint64_t seed) {
    Rng rng(seed);
    model.for_each_param(ParamVisitor<Scalar>([&](const std::string&, Tensor<Scalar>& t, ParamKind kind) {
        const auto& s = t.shape();
        switch (kind) {
            case ParamKind::ConvWeight:
            case ParamKind::LinearWeight: {
                const double fan_in = kind == ParamKind::ConvWeight ? static_cast<double>(s.c * s.h * s.w)
                                                                    : static_cast<double>(s.n);
                const double stddev = std::sqrt(2.0 / fan_in);
                for (auto& v : t.span()) v = static_cast<Scalar>(rng.normal(0.0, stddev));
                break;
            }
            case ParamKind::BnScale:
            case ParamKind::RunningVar: t.values().setOnes(); break;
            case ParamKind::Bias:
            case ParamKind::BnShift:
            case ParamKind::RunningMean: t.values().setZero(); break;
        }
        t.drop_grad();
    }));
}

template <typename Scalar>
void sgd_momentum_step(std::span<Scalar> weights, std::span<const Scalar> grads, std::span<Scalar> velocity,
                       double lr, double momentum) {
    if (weights.size() != grads.size() || weights.size() != velocity.size()) {
        throw ShapeError("sgd", "weight, gradient and velocity lengths differ");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) throw Error("sgd", "non-finite gradient at element " + std::to_string(i));
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
        velocity[i] = static_cast<Scalar>(momentum * velocity[i] + grads[i]);
        weights[i] = static_cast<Scalar>(weights[i] - lr * velocity[i]);
    }
}

template <typename Scalar>
void SgdMomentum<Scalar>::step(Model<Scalar>& model, double lr) {
    std::vector<Tensor<Scalar>*> params;
    std::vector<std::string> names;
    model.for_each_param(ParamVisitor<Scalar>([&](const std::string& name, Tensor<Scalar>& t, ParamKind kind) {
        if (!is_learned(kind)) return;
        t.ensure_grad();
        params.push_back(&t);
        names.push_back(name);
    }));
    // Check every gradient before touching any weight so a failed step leaves the model intact.
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->grad().allFinite()) throw Error("sgd", "non-finite gradient in " + names[i]);
    }
    if (velocity_.empty()) {
        for (auto* p : params) velocity_.push_back(VectorX<Scalar>::Zero(static_cast<Eigen::Index>(p->size())));
    }
    if (velocity_.size() != params.size()) throw Error("sgd", "optimizer state does not match model");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& g = params[i]->grad();
        sgd_momentum_step<Scalar>(params[i]->span(), {g.data(), static_cast<std::size_t>(g.size())},
                                  {velocity_[i].data(), static_cast<std::size_t>(velocity_[i].size())}, lr, momentum_);
    }
}

template <typename Scalar>
Scalar train_step(Model<Scalar>& model, const Tensor<Scalar>& batch, std::span<const Label> labels,
                  const TrainConfig& config, SgdMomentum<Scalar>& optimizer, double lr) {
    if (model.arch().head == HeadKind::None) throw Error("train", "model without a classifier head cannot be trained");
    model.zero_grad();
    Tape<Scalar> tape;
    const auto logits = model.forward_train(batch, tape);
    const auto loss = focal_loss(logits, labels, config.focal_alpha, config.focal_gamma);
    model.backward(loss.grad, tape);
    optimizer.step(model, lr);
    return loss.loss;
}

TensorF stack(std::span<const TensorF> items) {
    if (items.empty()) throw Error("train", "cannot stack an empty batch");
    Shape4 s = items.front().shape();
    const std::size_t per = s.sample();
    s.n = 0;
    for (const auto& t : items) {
        if (t.shape().sample() != per || t.shape().c != items.front().shape().c) {
            throw ShapeError("train", "batch items have different shapes");
        }
        s.n += t.shape().n;
    }
    TensorF out(s);
    std::size_t offset = 0;
    for (const auto& t : items) {
        std::copy(t.data(), t.data() + t.size(), out.data() + offset);
        offset += t.size();
    }
    return out;
}

std::vector<double> score_samples(const ModelF& model, std::span<const LabeledSample> samples, std::size_t batch_size) {
    std::vector<double> scores;
    scores.reserve(samples.size());
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const auto end = std::min(samples.size(), start + batch_size);
        std::vector<TensorF> items;
        for (std::size_t i = start; i < end; ++i) items.push_back(preprocess(samples[i]));
        const auto probs = softmax2(model.forward(stack(items)));
        for (std::size_t i = 0; i < end - start; ++i) scores.push_back(probs[2 * i + 1]);
    }
    return scores;
}

TrainResult fit(ModelF& model, std::span<const LabeledSample> train, std::span<const LabeledSample> val,
                const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (train.empty()) throw Error("train", "empty manifest (training set)");
    if (val.empty()) throw Error("train", "empty manifest (validation set)");
    const bool has_real = std::any_of(train.begin(), train.end(), [](const auto& s) { return s.label == Label::Real; });
    const bool has_fake = std::any_of(train.begin(), train.end(), [](const auto& s) { return s.label == Label::Fake; });
    if (!has_real || !has_fake) throw Error("train", "training set must contain both real and fake samples");

    const bool augmenting = config.augment_real || config.augment_all;
    std::vector<TensorF> cached;
    if (!augmenting) {
        cached.reserve(train.size());
        for (const auto& s : train) cached.push_back(preprocess(s));
    }
    ScoredSet val_set;
    for (const auto& s : val) val_set.labels.push_back(s.label);

    TrainResult result;
    result.best = model;
    SgdMomentum<float> optimizer(config.momentum);
    std::vector<std::size_t> order(train.size());

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = lr_at_epoch(config, epoch);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle(Rng::derive(config.seed, epoch));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const auto end = std::min(order.size(), start + config.batch_size);
            std::vector<TensorF> items;
            std::vector<Label> labels;
            for (std::size_t k = start; k < end; ++k) {
                const auto idx = order[k];
                const auto& sample = train[idx];
                labels.push_back(sample.label);
                if (!augmenting) {
                    items.push_back(cached[idx]);
                } else if (config.augment_all || sample.label == Label::Real) {
                    Rng rng(Rng::derive(Rng::derive(config.seed, epoch), idx + 1));
                    items.push_back(preprocess(augment_depth(sample.image, draw_augment_params(rng))));
                } else {
                    items.push_back(preprocess(sample));
                }
            }
            const float loss = train_step(model, stack(items), labels, config, optimizer, lr);
            loss_sum += static_cast<double>(loss) * static_cast<double>(end - start);
        }

        val_set.scores = score_samples(model, val, config.batch_size);
        EpochRecord record;
        record.epoch = epoch + 1;
        record.lr = lr;
        record.train_loss = loss_sum / static_cast<double>(train.size());
        val_set.require_both_classes("train");
        record.val_acer = error_rates(val_set, config.eval_threshold).acer;
        result.log.push_back(record);
        if (result.best_epoch == 0 || record.val_acer < result.best_val_acer) {
            result.best_epoch = record.epoch;
            result.best_val_acer = record.val_acer;
            result.best = model;
        }
        if (on_epoch) on_epoch(record);
    }
    return result;
}

TrainResult fit(ModelF& model, const Manifest& train, const Manifest& val, const TrainConfig& config,
                const EpochCallback& on_epoch) {
    if (train.empty()) throw Error("train", "empty manifest (training set)");
    if (val.empty()) throw Error("train", "empty manifest (validation set)");
    std::vector<LabeledSample> train_samples, val_samples;
    for (std::size_t i = 0; i < train.size(); ++i) train_samples.push_back(load_sample(train, i));
    for (std::size_t i = 0; i < val.size(); ++i) val_samples.push_back(load_sample(val, i));
    return fit(model, train_samples, val_samples, config, on_epoch);
}

void write_training_log(const std::vector<EpochRecord>& log, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw FormatError("train", FormatErrorKind::Io, "cannot write " + file.string());
    out << "epoch,lr,train_loss,val_acer\n";
    out.precision(9);
    for (const auto& r : log) out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.val_acer << '\n';
}

template FocalLoss<float> focal_loss(const Tensor<float>&, std::span<const Label>, double, double);
template FocalLoss<double> focal_loss(const Tensor<double>&, std::span<const Label>, double, double);
template void he_initialize(Model<float>&, std::uint64_t);
template void he_initialize(Model<double>&, std::uint64_t);
template void sgd_momentum_step(std::span<float>, std::span<const float>, std::span<float>, double, double);
template void sgd_momentum_step(std::span<double>, std::span<const double>, std::span<double>, double, double);
template class SgdMomentum<float>;
template class SgdMomentum<double>;
template float train_step(Model<float>&, const Tensor<float>&, std::span<const Label>, const TrainConfig&,
                          SgdMomentum<float>&, double);
template double train_step(Model<double>&, const Tensor<double>&, std::span<const Label>, const TrainConfig&,
                           SgdMomentum<double>&, double);

}  // namespace feathernet
