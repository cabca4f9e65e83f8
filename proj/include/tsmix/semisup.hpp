// Pseudo-labeling on an unlabeled pool plus the combined training objective
// and the semi-supervised epoch/fit drivers.
#pragma once

#include <iostream>
#include <optional>
#include <utility>
#include <vector>

#include "tsmix/train.hpp"

namespace tsmix {

struct PseudoLabelConfig {
    double tau = 0.99;
    std::size_t relabel_every = 1;
    std::size_t warmup_epochs = 10;

    void validate() const {
        if (!(tau > 0.0) || tau > 1.0)
            throw ConfigError("pseudo-label config: tau must lie in (0,1]");
        if (relabel_every < 1)
            throw ConfigError("pseudo-label config: relabel_every must be >= 1");
    }
};

struct PseudoLabelSet {
    std::vector<std::size_t> indices; // rows of the pool that passed the threshold
    Tensor labels;                    // [n_selected, n_classes], exact one-hot
    std::vector<double> confidences;  // max softmax per selected row

    std::size_t size() const { return indices.size(); }
};

struct PseudoCensus {
    std::size_t pool_size = 0;
    std::size_t n_selected = 0;
    std::vector<std::size_t> per_class;
    double mean_confidence = 0.0; // 0 when nothing selected
};

// ===================== selection =====================

// Keeps every row whose top probability reaches tau and hardens it to a
// one-hot label at the argmax (ties resolve to the lowest class).
inline PseudoLabelSet select_pseudo_labels(const Tensor& probs, double tau) {
    if (!(tau > 0.0) || tau > 1.0)
        throw ConfigError("select_pseudo_labels: tau must lie in (0,1]");
    if (probs.rank() != 2) throw ShapeError("select_pseudo_labels: expected [n, classes]");
    const std::size_t n = probs.shape()[0];
    const std::size_t k = probs.shape()[1];
    PseudoLabelSet out;
    std::vector<double> label_rows;
    for (std::size_t r = 0; r < n; ++r) {
        double row_sum = 0.0;
        std::size_t best = 0;
        for (std::size_t c = 0; c < k; ++c) {
            const double p = probs.values()[r * k + c];
            if (p < -1e-6 || p > 1.0 + 1e-6)
                throw ValidationError("select_pseudo_labels: probability out of range in row " +
                                      std::to_string(r));
            row_sum += p;
            if (p > probs.values()[r * k + best]) best = c;
        }
        if (std::abs(row_sum - 1.0) > 1e-6)
            throw ValidationError("select_pseudo_labels: row " + std::to_string(r) +
                                  " does not sum to 1");
        const double top = probs.values()[r * k + best];
        if (top >= tau) {
            out.indices.push_back(r);
            out.confidences.push_back(top);
            for (std::size_t c = 0; c < k; ++c) label_rows.push_back(c == best ? 1.0 : 0.0);
        }
    }
    out.labels = Tensor::from_values({out.indices.size(), k}, std::move(label_rows));
    return out;
}

inline PseudoCensus census_of(const PseudoLabelSet& set, std::size_t pool_size,
                              std::size_t n_classes) {
    PseudoCensus census;
    census.pool_size = pool_size;
    census.n_selected = set.size();
    census.per_class.assign(n_classes, 0);
    double total = 0.0;
    for (std::size_t r = 0; r < set.size(); ++r) {
        for (std::size_t c = 0; c < n_classes; ++c)
            if (set.labels.values()[r * n_classes + c] == 1.0) {
                ++census.per_class[c];
                break;
            }
        total += set.confidences[r];
    }
    if (set.size() > 0) census.mean_confidence = total / static_cast<double>(set.size());
    return census;
}

// Softmax class probabilities over every pool sample, dropout disabled.
inline Tensor infer_pool_probs(TransformerClassifier& model, const UnlabeledPool& pool) {
    const std::size_t k = model.config().n_classes;
    std::vector<double> rows;
    rows.reserve(pool.size() * k);
    RandomStream unused(0);
    constexpr std::size_t kEvalBatch = 64;
    std::vector<std::size_t> idx;
    for (std::size_t at = 0; at < pool.size(); at += kEvalBatch) {
        idx.clear();
        for (std::size_t i = at; i < std::min(pool.size(), at + kEvalBatch); ++i)
            idx.push_back(i);
        Tensor probs = softmax(model.forward(pool.gather_inputs(idx), false, unused), -1);
        rows.insert(rows.end(), probs.values().begin(), probs.values().end());
    }
    return Tensor::from_values({pool.size(), k}, std::move(rows));
}

// ===================== combined objective =====================

// Per-example cross entropy summed (not averaged) over the batch.
inline Tensor sum_cross_entropy(const Tensor& logits, const Tensor& targets) {
    return scale(cross_entropy_soft(logits, targets),
                 static_cast<double>(logits.shape().at(0)));
}

// Unweighted sum of the labeled term and the accepted-pseudo term. A part
// with zero rows simply drops out of the objective.
inline Tensor combined_loss(const Tensor& labeled_logits, const Tensor& labeled_targets,
                            const Tensor& pseudo_logits, const Tensor& pseudo_targets) {
    const bool has_labeled = labeled_logits.rank() > 0 && labeled_logits.shape()[0] > 0;
    const bool has_pseudo = pseudo_logits.rank() > 0 && pseudo_logits.shape()[0] > 0;
    if (!has_labeled && !has_pseudo)
        throw ValidationError("combined_loss: both parts are empty");
    if (!has_pseudo) return sum_cross_entropy(labeled_logits, labeled_targets);
    if (!has_labeled) return sum_cross_entropy(pseudo_logits, pseudo_targets);
    return add(sum_cross_entropy(labeled_logits, labeled_targets),
               sum_cross_entropy(pseudo_logits, pseudo_targets));
}

// ===================== semi-supervised epoch =====================

namespace detail {

inline Tensor concat_batch_rows(const Tensor& a, const Tensor& b) {
    Shape shape = a.shape();
    if (b.shape().size() != shape.size())
        throw ShapeError("concat_batch_rows: rank mismatch");
    for (std::size_t d = 1; d < shape.size(); ++d)
        if (b.shape()[d] != shape[d]) throw ShapeError("concat_batch_rows: trailing dim mismatch");
    shape[0] += b.shape()[0];
    std::vector<double> values;
    values.reserve(a.size() + b.size());
    values.insert(values.end(), a.values().begin(), a.values().end());
    values.insert(values.end(), b.values().begin(), b.values().end());
    return Tensor::from_values(std::move(shape), std::move(values));
}

inline LabeledBatch gather_pseudo_batch(const UnlabeledPool& pool, const PseudoLabelSet& set,
                                        const std::vector<std::size_t>& rows) {
    const std::size_t k = set.labels.shape()[1];
    std::vector<std::size_t> pool_idx;
    std::vector<double> labels;
    pool_idx.reserve(rows.size());
    labels.reserve(rows.size() * k);
    for (std::size_t r : rows) {
        pool_idx.push_back(set.indices.at(r));
        for (std::size_t c = 0; c < k; ++c) labels.push_back(set.labels.values()[r * k + c]);
    }
    return LabeledBatch{pool.gather_inputs(pool_idx),
                        Tensor::from_values({rows.size(), k}, std::move(labels)),
                        BatchSource::pseudo};
}

} // namespace detail

struct SemiEpochReport {
    EpochReport report;
    PseudoCensus census;
};

// One epoch of pseudo-label training. Each cycle steps on a labeled batch,
// then on a pseudo batch, then on k batches mixed from the union of the two;
// a side that has run out of batches drops out of the cycle. An empty pool
// degrades to the plain epoch (with a warning).
inline SemiEpochReport pseudo_mixup_epoch(TransformerClassifier& model, const Dataset& labeled,
                                          const UnlabeledPool& pool, const PseudoLabelSet& pseudo,
                                          const Dataset& val, const TrainConfig& cfg, Adam& opt,
                                          EpochStreams& streams, std::size_t epoch_index,
                                          std::vector<double>* step_losses = nullptr) {
    cfg.validate();
    if (cfg.mode != TrainMode::mixup_pp && cfg.mode != TrainMode::latent_mixup_pp)
        throw ConfigError("pseudo_mixup_epoch: mode must be mixup_pp or latent_mixup_pp");
    const std::size_t n_classes = model.config().n_classes;
    SemiEpochReport out;
    out.census = census_of(pseudo, pool.size(), n_classes);
    if (pool.size() == 0) {
        std::cerr << "warning: unlabeled pool is empty; running plain training epoch\n";
        out.report = train_epoch(model, labeled, val, cfg, opt, streams, epoch_index, step_losses);
        return out;
    }
    if (labeled.size() == 0) throw ValidationError("pseudo_mixup_epoch: empty labeled set");

    const auto labeled_batches = make_batches(labeled.size(), cfg.batch_size, streams.shuffle);
    const auto pseudo_batches = make_batches(pseudo.size(), cfg.batch_size, streams.shuffle);
    const std::size_t cycles = std::max(labeled_batches.size(), pseudo_batches.size());

    std::vector<double> losses;
    for (std::size_t i = 0; i < cycles; ++i) {
        std::optional<LabeledBatch> lab;
        std::optional<LabeledBatch> pse;
        if (i < labeled_batches.size())
            lab = LabeledBatch{labeled.gather_inputs(labeled_batches[i]),
                               labeled.gather_onehot(labeled_batches[i]), BatchSource::original};
        if (i < pseudo_batches.size())
            pse = detail::gather_pseudo_batch(pool, pseudo, pseudo_batches[i]);

        if (lab)
            losses.push_back(detail::supervised_step(model, opt, *lab, cfg, streams.dropout));
        if (pse)
            losses.push_back(detail::supervised_step(model, opt, *pse, cfg, streams.dropout));

        LabeledBatch combined =
            lab && pse
                ? LabeledBatch{detail::concat_batch_rows(lab->inputs, pse->inputs),
                               detail::concat_batch_rows(lab->labels, pse->labels),
                               BatchSource::original}
                : (lab ? *lab : *pse);
        for (std::size_t j = 0; j < cfg.k; ++j) {
            if (cfg.mode == TrainMode::mixup_pp)
                losses.push_back(detail::input_mix_step(model, opt, combined, cfg,
                                                        streams.augment, streams.dropout));
            else
                losses.push_back(detail::latent_mix_step(model, opt, combined, cfg,
                                                         streams.augment, streams.dropout));
        }
    }
    if (step_losses) step_losses->insert(step_losses->end(), losses.begin(), losses.end());
    double total = 0.0;
    for (double l : losses) total += l;
    out.report.epoch = epoch_index;
    out.report.train_loss = total / static_cast<double>(losses.size());
    out.report.val = evaluate(model, val).metrics;
    return out;
}

// ===================== semi-supervised fit =====================

struct SemisupFitResult {
    std::vector<EpochReport> epochs;
    std::vector<std::optional<PseudoCensus>> census; // absent during warm-up
    std::size_t best_epoch = 0;
    MetricSet best_val;
};

// Warm-up epochs train on the labeled set alone with the configured mode;
// afterwards the pool is re-scored every relabel_every epochs and training
// switches to pseudo_mixup_epoch. Model ends at the best-validation snapshot.
inline SemisupFitResult fit_semisup(
    TransformerClassifier& model, const Dataset& labeled, const UnlabeledPool& pool,
    const Dataset& val, const TrainConfig& cfg, const PseudoLabelConfig& pcfg,
    const std::function<void(const EpochReport&, const PseudoCensus*)>& on_epoch = nullptr) {
    cfg.validate();
    pcfg.validate();
    if (cfg.mode != TrainMode::mixup_pp && cfg.mode != TrainMode::latent_mixup_pp)
        throw ConfigError("fit_semisup: mode must be mixup_pp or latent_mixup_pp");
    EpochStreams streams = EpochStreams::from_seed(cfg.seed);
    Adam opt(cfg.lr);
    SemisupFitResult result;
    std::vector<std::vector<double>> best_snapshot = model.snapshot_values();
    double best_acc = -1.0;
    PseudoLabelSet current;
    current.labels = Tensor::zeros({0, model.config().n_classes});
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        EpochReport report;
        std::optional<PseudoCensus> census;
        if (epoch < pcfg.warmup_epochs || pool.size() == 0) {
            report = train_epoch(model, labeled, val, cfg, opt, streams, epoch);
        } else {
            const std::size_t since = epoch - pcfg.warmup_epochs;
            if (since % pcfg.relabel_every == 0)
                current = select_pseudo_labels(infer_pool_probs(model, pool), pcfg.tau);
            SemiEpochReport semi =
                pseudo_mixup_epoch(model, labeled, pool, current, val, cfg, opt, streams, epoch);
            report = semi.report;
            census = semi.census;
        }
        if (report.val.accuracy > best_acc) {
            best_acc = report.val.accuracy;
            best_snapshot = model.snapshot_values();
            result.best_epoch = epoch;
            result.best_val = report.val;
        }
        if (on_epoch) on_epoch(report, census ? &*census : nullptr);
        result.epochs.push_back(report);
        result.census.push_back(census);
    }
    model.restore_values(best_snapshot);
    return result;
}

} // namespace tsmix
