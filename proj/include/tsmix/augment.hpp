// Synthetic-sample generators: beta-sampled mixing coefficients, input-space
// mixup, latent-space mixing, batch pairing, and segment permutation.
#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "tsmix/errors.hpp"
#include "tsmix/random.hpp"
#include "tsmix/tensor.hpp"

namespace tsmix {

struct MixCoefficient {
    double lambda = 0.5;
};

struct BetaParams {
    double alpha = 0.2;
};

enum class BatchSource { original, mixed, permuted, pseudo };

struct LabeledBatch {
    Tensor inputs;        // [batch x T x C]
    Tensor labels;        // [batch x n_classes], rows on the simplex
    BatchSource source = BatchSource::original;

    std::size_t size() const { return inputs.size() == 0 ? 0 : inputs.extent(0); }
};

namespace detail {

inline void require_simplex_rows(const Tensor& labels, double tol, const char* who) {
    if (labels.rank() != 2)
        throw ValidationError(std::string(who) + ": labels must be [batch x classes]");
    const std::size_t b = labels.extent(0), c = labels.extent(1);
    for (std::size_t r = 0; r < b; ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double v = labels.values()[r * c + j];
            if (v < -tol)
                throw ValidationError(std::string(who) + ": negative label mass in row " +
                                      std::to_string(r));
            total += v;
        }
        if (std::abs(total - 1.0) > tol)
            throw ValidationError(std::string(who) + ": label row " + std::to_string(r) +
                                  " sums to " + std::to_string(total));
    }
}

inline void require_permutation(const std::vector<std::size_t>& perm, std::size_t n,
                                const char* who) {
    if (perm.size() != n)
        throw ContractError(std::string(who) + ": permutation length " +
                            std::to_string(perm.size()) + " != batch size " + std::to_string(n));
    std::vector<bool> seen(n, false);
    for (std::size_t p : perm) {
        if (p >= n || seen[p])
            throw ContractError(std::string(who) + ": not a permutation of [0, " +
                                std::to_string(n) + ")");
        seen[p] = true;
    }
}

} // namespace detail

inline void validate_batch(const LabeledBatch& batch) {
    detail::require_simplex_rows(batch.labels, 1e-9, "labeled batch");
    if (batch.inputs.extent(0) != batch.labels.extent(0))
        throw ValidationError("labeled batch: inputs and labels disagree on batch size");
    if (batch.source == BatchSource::original || batch.source == BatchSource::pseudo) {
        const std::size_t c = batch.labels.extent(1);
        for (std::size_t r = 0; r < batch.labels.extent(0); ++r) {
            std::size_t ones = 0;
            for (std::size_t j = 0; j < c; ++j) {
                const double v = batch.labels.values()[r * c + j];
                if (v == 1.0) ++ones;
                else if (v != 0.0)
                    throw ValidationError("labeled batch: hard-labeled row " + std::to_string(r) +
                                          " is not one-hot");
            }
            if (ones != 1)
                throw ValidationError("labeled batch: hard-labeled row " + std::to_string(r) +
                                      " is not one-hot");
        }
    }
}

// One draw from Beta(alpha, alpha) via two Gamma(alpha, 1) draws.
inline MixCoefficient sample_lambda(const BetaParams& params, RandomStream& rng) {
    if (!(params.alpha > 0.0))
        throw ConfigError("sample_lambda: alpha must be positive, got " +
                          std::to_string(params.alpha));
    const double g1 = rng.gamma(params.alpha);
    const double g2 = rng.gamma(params.alpha);
    return MixCoefficient{g1 / (g1 + g2)};
}

// lambda*x1 + (1-lambda)*x2 elementwise. Endpoints hand back the original
// tensor so those cases are bit-exact.
inline Tensor mix_inputs(const Tensor& x1, const Tensor& x2, MixCoefficient lam) {
    if (x1.shape() != x2.shape())
        throw ShapeError("mix_inputs: shapes disagree: " + detail::shape_str(x1.shape()) + " vs " +
                         detail::shape_str(x2.shape()));
    if (lam.lambda == 1.0) return x1;
    if (lam.lambda == 0.0) return x2;
    std::vector<double> out(x1.size());
    const double l = lam.lambda, r = 1.0 - lam.lambda;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = l * x1.values()[i] + r * x2.values()[i];
    return Tensor::from_values(x1.shape(), std::move(out));
}

inline Tensor mix_labels(const Tensor& y1, const Tensor& y2, MixCoefficient lam) {
    detail::require_simplex_rows(y1, 1e-9, "mix_labels");
    detail::require_simplex_rows(y2, 1e-9, "mix_labels");
    return mix_inputs(y1, y2, lam);
}

// Differentiable convex combination for latent representations; stays inside
// whatever computation graph h1/h2 live in.
inline Tensor mix_latents(const Tensor& h1, const Tensor& h2, MixCoefficient lam) {
    if (h1.shape() != h2.shape())
        throw ShapeError("mix_latents: widths disagree: " + detail::shape_str(h1.shape()) +
                         " vs " + detail::shape_str(h2.shape()));
    if (lam.lambda == 1.0) return h1;
    if (lam.lambda == 0.0) return h2;
    return add(scale(h1, lam.lambda), scale(h2, 1.0 - lam.lambda));
}

// Pairs sample i with sample perm[i] under one shared lambda.
inline LabeledBatch mixup_batch(const LabeledBatch& batch, MixCoefficient lam,
                                const std::vector<std::size_t>& perm) {
    detail::require_permutation(perm, batch.size(), "mixup_batch");
    Tensor partner_inputs = gather_rows(batch.inputs, perm);
    Tensor partner_labels = gather_rows(batch.labels, perm);
    return LabeledBatch{mix_inputs(batch.inputs, partner_inputs, lam),
                        mix_labels(batch.labels, partner_labels, lam), BatchSource::mixed};
}

// k independent (lambda, permutation) draws over the same source batch.
inline std::vector<LabeledBatch> generate_mixup_batches(const LabeledBatch& batch, std::size_t k,
                                                        const BetaParams& params,
                                                        RandomStream& rng) {
    std::vector<LabeledBatch> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        const MixCoefficient lam = sample_lambda(params, rng);
        out.push_back(mixup_batch(batch, lam, rng.permutation(batch.size())));
    }
    return out;
}

// ===================== segment permutation =====================

// Contiguous chunk boundaries for T split into n segments; the first
// T mod n chunks are one element longer.
inline std::vector<std::size_t> segment_offsets(std::size_t seq_len, std::size_t n_segments) {
    std::vector<std::size_t> offsets{0};
    const std::size_t base = seq_len / n_segments;
    const std::size_t longer = seq_len % n_segments;
    for (std::size_t s = 0; s < n_segments; ++s)
        offsets.push_back(offsets.back() + base + (s < longer ? 1 : 0));
    return offsets;
}

inline Tensor permute_segments_with_order(const Tensor& x, std::size_t n_segments,
                                          const std::vector<std::size_t>& order) {
    if (x.rank() != 2) throw ShapeError("permute_segments: expects [T x C]");
    const std::size_t seq_len = x.extent(0), channels = x.extent(1);
    if (n_segments < 1 || n_segments > seq_len)
        throw ConfigError("permute_segments: n_segments " + std::to_string(n_segments) +
                          " outside [1, " + std::to_string(seq_len) + "]");
    detail::require_permutation(order, n_segments, "permute_segments");
    const auto offsets = segment_offsets(seq_len, n_segments);
    std::vector<double> out;
    out.reserve(x.size());
    for (std::size_t s : order)
        out.insert(out.end(), x.values().begin() + offsets[s] * channels,
                   x.values().begin() + offsets[s + 1] * channels);
    return Tensor::from_values(x.shape(), std::move(out));
}

inline Tensor permute_segments(const Tensor& x, std::size_t n_segments, RandomStream& rng) {
    if (x.rank() != 2) throw ShapeError("permute_segments: expects [T x C]");
    if (n_segments < 1 || n_segments > x.extent(0))
        throw ConfigError("permute_segments: n_segments " + std::to_string(n_segments) +
                          " outside [1, " + std::to_string(x.extent(0)) + "]");
    return permute_segments_with_order(x, n_segments, rng.permutation(n_segments));
}

// Applies an independent segment shuffle to every sample; labels unchanged.
inline LabeledBatch permute_batch(const LabeledBatch& batch, std::size_t n_segments,
                                  RandomStream& rng) {
    const std::size_t b = batch.size();
    const std::size_t seq_len = batch.inputs.extent(1);
    const std::size_t channels = batch.inputs.extent(2);
    std::vector<double> out;
    out.reserve(batch.inputs.size());
    for (std::size_t i = 0; i < b; ++i) {
        Tensor sample = Tensor::from_values(
            {seq_len, channels},
            std::vector<double>(batch.inputs.values().begin() + i * seq_len * channels,
                                batch.inputs.values().begin() + (i + 1) * seq_len * channels));
        Tensor shuffled = permute_segments(sample, n_segments, rng);
        out.insert(out.end(), shuffled.values().begin(), shuffled.values().end());
    }
    return LabeledBatch{Tensor::from_values(batch.inputs.shape(), std::move(out)), batch.labels,
                        BatchSource::permuted};
}

} // namespace tsmix
