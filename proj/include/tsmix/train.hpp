// Supervised training loops for every augmentation mode, the Adam optimizer,
// and evaluation plumbing.
//
// Reproducibility contract: a run owns four independent RNG streams derived
// from (seed, tag) so that skipping draws in one concern (say, forcing lambda
// in a degeneration test) cannot desynchronize the others.
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tsmix/augment.hpp"
#include "tsmix/data.hpp"
#include "tsmix/errors.hpp"
#include "tsmix/metrics.hpp"
#include "tsmix/model.hpp"
#include "tsmix/random.hpp"
#include "tsmix/tensor.hpp"

namespace tsmix {

namespace stream_tag {
constexpr std::uint64_t init = 1;
constexpr std::uint64_t shuffle = 2;
constexpr std::uint64_t augment = 3;
constexpr std::uint64_t dropout = 4;
} // namespace stream_tag

enum class TrainMode {
    supervised,
    permute,
    permute_pp,
    mixup,
    mixup_pp,
    latent_mixup,
    latent_mixup_pp,
};

inline const char* mode_to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::supervised: return "supervised";
        case TrainMode::permute: return "permute";
        case TrainMode::permute_pp: return "permute_pp";
        case TrainMode::mixup: return "mixup";
        case TrainMode::mixup_pp: return "mixup_pp";
        case TrainMode::latent_mixup: return "latent_mixup";
        case TrainMode::latent_mixup_pp: return "latent_mixup_pp";
    }
    throw ContractError("mode_to_string: unhandled mode");
}

inline TrainMode mode_from_string(const std::string& name) {
    for (TrainMode mode :
         {TrainMode::supervised, TrainMode::permute, TrainMode::permute_pp, TrainMode::mixup,
          TrainMode::mixup_pp, TrainMode::latent_mixup, TrainMode::latent_mixup_pp})
        if (name == mode_to_string(mode)) return mode;
    throw ConfigError("unknown training mode '" + name + "'");
}

inline bool mode_keeps_original(TrainMode mode) {
    return mode == TrainMode::supervised || mode == TrainMode::permute_pp ||
           mode == TrainMode::mixup_pp || mode == TrainMode::latent_mixup_pp;
}

inline bool mode_is_latent(TrainMode mode) {
    return mode == TrainMode::latent_mixup || mode == TrainMode::latent_mixup_pp;
}

struct TrainConfig {
    TrainMode mode = TrainMode::supervised;
    std::size_t k = 2;
    BetaParams alpha{0.2};
    double lr = 2e-4;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 100;
    std::uint64_t seed = 0;
    std::size_t n_segments = 4;
    // Test hooks for the endpoint-degeneration suite; when set they bypass
    // the corresponding rng draws entirely.
    std::optional<double> forced_lambda;
    bool forced_identity_pairing = false;

    void validate() const {
        const bool pp = mode == TrainMode::permute_pp || mode == TrainMode::mixup_pp ||
                        mode == TrainMode::latent_mixup_pp;
        if (pp && k < 1) throw ConfigError("train config: k must be >= 1 for ++ modes");
        if (!(lr > 0.0)) throw ConfigError("train config: lr must be positive");
        if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
        if (max_epochs < 1) throw ConfigError("train config: max_epochs must be >= 1");
        if (!(alpha.alpha > 0.0)) throw ConfigError("train config: alpha must be positive");
        if (n_segments < 1) throw ConfigError("train config: n_segments must be >= 1");
        if (forced_lambda && (*forced_lambda < 0.0 || *forced_lambda > 1.0))
            throw ConfigError("train config: forced_lambda must lie in [0,1]");
    }
};

// ===================== Adam =====================

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(lr > 0.0)) throw ConfigError("adam: lr must be positive");
    }

    // Bias-corrected update from the gradients accumulated on `params`.
    // Gradients are consumed: cleared to zero after the step. A parameter
    // whose gradient buffer was never touched counts as zero gradient.
    void step(std::vector<std::pair<std::string, Tensor>>& params) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i].second.size(), 0.0);
                v_[i].assign(params[i].second.size(), 0.0);
            }
        }
        if (m_.size() != params.size())
            throw ContractError("adam: parameter list changed between steps");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = params[i].second;
            if (m_[i].size() != p.size())
                throw ContractError("adam: gradient shape mismatch for " + params[i].first);
            if (!p.has_grad()) continue; // zero gradient, no update
            auto& values = p.values_mut();
            const auto& grad = p.grad();
            for (std::size_t j = 0; j < values.size(); ++j) {
                const double g = grad[j];
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                values[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
            p.zero_grad();
        }
    }

    std::size_t steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ===================== batching =====================

// One shuffle draw, then contiguous slices; the trailing batch may be short.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          RandomStream& shuffle_rng) {
    if (batch_size == 0) throw ConfigError("make_batches: batch_size must be >= 1");
    std::vector<std::size_t> order = shuffle_rng.permutation(n);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t at = 0; at < n; at += batch_size) {
        const std::size_t end = std::min(n, at + batch_size);
        batches.emplace_back(order.begin() + at, order.begin() + end);
    }
    return batches;
}

struct EpochStreams {
    RandomStream shuffle;
    RandomStream augment;
    RandomStream dropout;

    static EpochStreams from_seed(std::uint64_t seed) {
        return EpochStreams{RandomStream::derive(seed, stream_tag::shuffle),
                            RandomStream::derive(seed, stream_tag::augment),
                            RandomStream::derive(seed, stream_tag::dropout)};
    }
};

// ===================== per-batch training cycle =====================

namespace detail {

inline MixCoefficient draw_lambda(const TrainConfig& cfg, RandomStream& augment_rng) {
    if (cfg.forced_lambda) return MixCoefficient{*cfg.forced_lambda};
    return sample_lambda(cfg.alpha, augment_rng);
}

inline std::vector<std::size_t> draw_pairing(const TrainConfig& cfg, std::size_t n,
                                             RandomStream& augment_rng) {
    if (cfg.forced_identity_pairing) {
        std::vector<std::size_t> id(n);
        std::iota(id.begin(), id.end(), std::size_t{0});
        return id;
    }
    return augment_rng.permutation(n);
}

inline double supervised_step(TransformerClassifier& model, Adam& opt, const LabeledBatch& batch,
                              const TrainConfig& cfg, RandomStream& dropout_rng) {
    Tensor loss = cross_entropy_soft(model.forward(batch.inputs, true, dropout_rng), batch.labels);
    backward(loss);
    opt.step(model.parameters());
    (void)cfg;
    return loss.item();
}

inline double latent_mix_step(TransformerClassifier& model, Adam& opt, const LabeledBatch& batch,
                              const TrainConfig& cfg, RandomStream& augment_rng,
                              RandomStream& dropout_rng) {
    const MixCoefficient lam = draw_lambda(cfg, augment_rng);
    const auto perm = draw_pairing(cfg, batch.size(), augment_rng);
    LatentBatch z = model.encode(batch.inputs, true, dropout_rng);
    LatentBatch partner{gather_rows(z.values, perm), LatentBatch::Provenance::real};
    Tensor partner_labels = gather_rows(batch.labels, perm);
    auto [mixed, labels] = latent_mix(z, partner, batch.labels, partner_labels, lam);
    Tensor loss = cross_entropy_soft(model.classify_head(mixed), labels);
    backward(loss);
    opt.step(model.parameters());
    return loss.item();
}

inline double input_mix_step(TransformerClassifier& model, Adam& opt, const LabeledBatch& batch,
                             const TrainConfig& cfg, RandomStream& augment_rng,
                             RandomStream& dropout_rng) {
    const MixCoefficient lam = draw_lambda(cfg, augment_rng);
    const auto perm = draw_pairing(cfg, batch.size(), augment_rng);
    return supervised_step(model, opt, mixup_batch(batch, lam, perm), cfg, dropout_rng);
}

inline double permute_step(TransformerClassifier& model, Adam& opt, const LabeledBatch& batch,
                           const TrainConfig& cfg, RandomStream& augment_rng,
                           RandomStream& dropout_rng) {
    return supervised_step(model, opt, permute_batch(batch, cfg.n_segments, augment_rng), cfg,
                           dropout_rng);
}

// Constituent steps for one original batch, original first, then synthetic;
// one optimizer step per constituent.
inline void run_batch_cycle(TransformerClassifier& model, Adam& opt, const LabeledBatch& batch,
                            const TrainConfig& cfg, RandomStream& augment_rng,
                            RandomStream& dropout_rng, std::vector<double>& losses) {
    switch (cfg.mode) {
        case TrainMode::supervised:
            losses.push_back(supervised_step(model, opt, batch, cfg, dropout_rng));
            return;
        case TrainMode::permute:
            losses.push_back(permute_step(model, opt, batch, cfg, augment_rng, dropout_rng));
            return;
        case TrainMode::permute_pp:
            losses.push_back(supervised_step(model, opt, batch, cfg, dropout_rng));
            for (std::size_t i = 0; i < cfg.k; ++i)
                losses.push_back(permute_step(model, opt, batch, cfg, augment_rng, dropout_rng));
            return;
        case TrainMode::mixup:
            losses.push_back(input_mix_step(model, opt, batch, cfg, augment_rng, dropout_rng));
            return;
        case TrainMode::mixup_pp:
            losses.push_back(supervised_step(model, opt, batch, cfg, dropout_rng));
            for (std::size_t i = 0; i < cfg.k; ++i)
                losses.push_back(input_mix_step(model, opt, batch, cfg, augment_rng, dropout_rng));
            return;
        case TrainMode::latent_mixup:
            losses.push_back(latent_mix_step(model, opt, batch, cfg, augment_rng, dropout_rng));
            return;
        case TrainMode::latent_mixup_pp:
            losses.push_back(supervised_step(model, opt, batch, cfg, dropout_rng));
            for (std::size_t i = 0; i < cfg.k; ++i)
                losses.push_back(
                    latent_mix_step(model, opt, batch, cfg, augment_rng, dropout_rng));
            return;
    }
    throw ConfigError("run_batch_cycle: unknown training mode");
}

} // namespace detail

// ===================== evaluation =====================

struct EvalResult {
    ConfusionMatrix cm;
    MetricSet metrics;
};

// Argmax scoring with dropout disabled; ties resolve to the lowest class.
inline EvalResult evaluate(TransformerClassifier& model, const Dataset& data) {
    if (data.size() == 0) throw ValidationError("evaluate: empty evaluation set");
    const std::size_t n_classes = model.config().n_classes;
    ConfusionMatrix cm(n_classes);
    RandomStream unused(0); // training=false consumes no draws
    constexpr std::size_t kEvalBatch = 64;
    std::vector<std::size_t> idx;
    for (std::size_t at = 0; at < data.size(); at += kEvalBatch) {
        idx.clear();
        for (std::size_t i = at; i < std::min(data.size(), at + kEvalBatch); ++i) idx.push_back(i);
        Tensor logits = model.forward(data.gather_inputs(idx), false, unused);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < n_classes; ++c)
                if (logits.values()[r * n_classes + c] > logits.values()[r * n_classes + best])
                    best = c;
            cm.record(data.labels[idx[r]], best);
        }
    }
    return EvalResult{cm, score(cm)};
}

// ===================== epoch & fit =====================

struct EpochReport {
    std::size_t epoch = 0;
    double train_loss = 0.0; // mean over optimizer steps
    MetricSet val;
};

inline EpochReport train_epoch(TransformerClassifier& model, const Dataset& train,
                               const Dataset& val, const TrainConfig& cfg, Adam& opt,
                               EpochStreams& streams, std::size_t epoch_index,
                               std::vector<double>* step_losses = nullptr) {
    cfg.validate();
    if (train.size() == 0) throw ValidationError("train_epoch: empty training set");
    std::vector<double> losses;
    for (const auto& idx : make_batches(train.size(), cfg.batch_size, streams.shuffle)) {
        LabeledBatch batch{train.gather_inputs(idx), train.gather_onehot(idx),
                           BatchSource::original};
        detail::run_batch_cycle(model, opt, batch, cfg, streams.augment, streams.dropout, losses);
    }
    if (step_losses) step_losses->insert(step_losses->end(), losses.begin(), losses.end());
    double total = 0.0;
    for (double l : losses) total += l;
    EpochReport report;
    report.epoch = epoch_index;
    report.train_loss = total / static_cast<double>(losses.size());
    report.val = evaluate(model, val).metrics;
    return report;
}

struct FitResult {
    std::vector<EpochReport> epochs;
    std::size_t best_epoch = 0;
    MetricSet best_val;
};

// Trains max_epochs epochs and leaves the model at the best-validation-
// accuracy snapshot (earliest epoch wins ties).
inline FitResult fit(TransformerClassifier& model, const Dataset& train, const Dataset& val,
                     const TrainConfig& cfg,
                     const std::function<void(const EpochReport&)>& on_epoch = nullptr) {
    cfg.validate();
    EpochStreams streams = EpochStreams::from_seed(cfg.seed);
    Adam opt(cfg.lr);
    FitResult result;
    std::vector<std::vector<double>> best_snapshot = model.snapshot_values();
    double best_acc = -1.0;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        EpochReport report = train_epoch(model, train, val, cfg, opt, streams, epoch);
        if (report.val.accuracy > best_acc) {
            best_acc = report.val.accuracy;
            best_snapshot = model.snapshot_values();
            result.best_epoch = epoch;
            result.best_val = report.val;
        }
        if (on_epoch) on_epoch(report);
        result.epochs.push_back(std::move(report));
    }
    model.restore_values(best_snapshot);
    return result;
}

} // namespace tsmix
