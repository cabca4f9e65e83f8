// Transformer encoder classifier factored as f(x) = g(h(x)): `encode` is h
// (projection, positional encoding, encoder layers, temporal mean-pool) and
// `classify_head` is g (single affine map to logits). Latent mixing operates
// on the pooled [batch x d_model] output of h.
#pragma once

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tsmix/augment.hpp"
#include "tsmix/errors.hpp"
#include "tsmix/io.hpp"
#include "tsmix/random.hpp"
#include "tsmix/tensor.hpp"

namespace tsmix {

struct ModelConfig {
    std::size_t n_layers = 5;
    std::size_t n_heads = 5;
    std::size_t d_model = 100;
    double dropout_p = 0.15;
    std::size_t n_classes = 0;
    std::size_t n_channels = 0;
    std::size_t seq_len = 0;

    void validate() const {
        if (n_layers == 0 || n_heads == 0 || d_model == 0)
            throw ConfigError("model config: n_layers, n_heads, d_model must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("model config: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        if (n_classes < 2) throw ConfigError("model config: n_classes must be at least 2");
        if (seq_len < 1 || n_channels < 1)
            throw ConfigError("model config: seq_len and n_channels must be positive");
        if (dropout_p < 0.0 || dropout_p >= 1.0)
            throw ConfigError("model config: dropout_p must lie in [0,1)");
    }
};

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"n_layers", cfg.n_layers},   {"n_heads", cfg.n_heads},
                          {"d_model", cfg.d_model},     {"dropout_p", cfg.dropout_p},
                          {"n_classes", cfg.n_classes}, {"n_channels", cfg.n_channels},
                          {"seq_len", cfg.seq_len}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.d_model = j.at("d_model").get<std::size_t>();
        cfg.dropout_p = j.at("dropout_p").get<double>();
        cfg.n_classes = j.at("n_classes").get<std::size_t>();
        cfg.n_channels = j.at("n_channels").get<std::size_t>();
        cfg.seq_len = j.at("seq_len").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

struct LatentBatch {
    Tensor values; // [batch x d_model]
    enum class Provenance { real, mixed } provenance = Provenance::real;
};

// Latent-space mixing surface: convex-combines two latent batches and their
// label distributions under one coefficient.
inline std::pair<LatentBatch, Tensor> latent_mix(const LatentBatch& h1, const LatentBatch& h2,
                                                 const Tensor& y1, const Tensor& y2,
                                                 MixCoefficient lam) {
    return {LatentBatch{mix_latents(h1.values, h2.values, lam), LatentBatch::Provenance::mixed},
            mix_labels(y1, y2, lam)};
}

class TransformerClassifier {
public:
    TransformerClassifier(const ModelConfig& cfg, RandomStream& init_rng) : cfg_(cfg) {
        cfg_.validate();
        const std::size_t d = cfg_.d_model;
        add_param("in_proj.w", {cfg_.n_channels, d}, init_rng);
        add_param("in_proj.b", {d});
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            for (const char* name : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
                add_param(p + name, {d, d}, init_rng);
            for (const char* name : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
                add_param(p + name, {d});
            add_param(p + "ln1.gain", {d}, nullptr, 1.0);
            add_param(p + "ln1.bias", {d});
            add_param(p + "ff.w1", {d, 2 * d}, init_rng);
            add_param(p + "ff.b1", {2 * d});
            add_param(p + "ff.w2", {2 * d, d}, init_rng);
            add_param(p + "ff.b2", {d});
            add_param(p + "ln2.gain", {d}, nullptr, 1.0);
            add_param(p + "ln2.bias", {d});
        }
        add_param("head.w", {d, cfg_.n_classes}, init_rng);
        add_param("head.b", {cfg_.n_classes});
        build_positional_table();
    }

    const ModelConfig& config() const { return cfg_; }

    // h(x): [B x T x C] -> pooled [B x d_model] latent.
    LatentBatch encode(const Tensor& x, bool training, RandomStream& rng) {
        if (x.rank() != 3 || x.extent(1) != cfg_.seq_len || x.extent(2) != cfg_.n_channels)
            throw ShapeError("encode: input " + detail::shape_str(x.shape()) +
                             " does not match [B x " + std::to_string(cfg_.seq_len) + " x " +
                             std::to_string(cfg_.n_channels) + "]");
        const std::size_t batch = x.extent(0);
        const std::size_t t = cfg_.seq_len;
        const std::size_t d = cfg_.d_model;
        const std::size_t heads = cfg_.n_heads;
        const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d / heads));

        Tensor h = add_row_bias(matmul(reshape(x, {batch * t, cfg_.n_channels}), at("in_proj.w")),
                                at("in_proj.b"));
        h = add(h, tiled_positional(batch));
        h = dropout(h, cfg_.dropout_p, training, rng);

        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            Tensor q = split_heads(add_row_bias(matmul(h, at(p + "attn.wq")), at(p + "attn.bq")),
                                   batch, t, heads);
            Tensor k = split_heads(add_row_bias(matmul(h, at(p + "attn.wk")), at(p + "attn.bk")),
                                   batch, t, heads);
            Tensor v = split_heads(add_row_bias(matmul(h, at(p + "attn.wv")), at(p + "attn.bv")),
                                   batch, t, heads);
            Tensor weights = softmax(scale(bmm(q, k, true), inv_sqrt_dk), -1);
            Tensor context = merge_heads(bmm(weights, v), batch, heads);
            Tensor attn_out = add_row_bias(matmul(context, at(p + "attn.wo")), at(p + "attn.bo"));
            attn_out = dropout(attn_out, cfg_.dropout_p, training, rng);
            h = layer_norm(add(h, attn_out), at(p + "ln1.gain"), at(p + "ln1.bias"));

            Tensor ff = add_row_bias(matmul(h, at(p + "ff.w1")), at(p + "ff.b1"));
            ff = add_row_bias(matmul(relu(ff), at(p + "ff.w2")), at(p + "ff.b2"));
            ff = dropout(ff, cfg_.dropout_p, training, rng);
            h = layer_norm(add(h, ff), at(p + "ln2.gain"), at(p + "ln2.bias"));
        }
        return LatentBatch{mean_pool_rows(h, t), LatentBatch::Provenance::real};
    }

    // g(z): affine map from latent width to class logits.
    Tensor classify_head(const LatentBatch& z) {
        if (z.values.rank() != 2 || z.values.extent(1) != cfg_.d_model)
            throw ShapeError("classify_head: latent " + detail::shape_str(z.values.shape()) +
                             " does not have width " + std::to_string(cfg_.d_model));
        return add_row_bias(matmul(z.values, at("head.w")), at("head.b"));
    }

    // f(x) = g(h(x)); the only prediction path.
    Tensor forward(const Tensor& x, bool training, RandomStream& rng) {
        return classify_head(encode(x, training, rng));
    }

    std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

    Tensor& at(const std::string& name) {
        for (auto& [n, t] : params_)
            if (n == name) return t;
        throw ContractError("unknown parameter '" + name + "'");
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.size();
        return n;
    }

    // Fixed sinusoidal table, [seq_len x d_model].
    const std::vector<double>& positional_table() const { return pos_table_; }

    std::vector<std::vector<double>> snapshot_values() const {
        std::vector<std::vector<double>> snap;
        snap.reserve(params_.size());
        for (const auto& [name, t] : params_) snap.push_back(t.values());
        return snap;
    }

    void restore_values(const std::vector<std::vector<double>>& snap) {
        if (snap.size() != params_.size())
            throw ContractError("restore_values: snapshot layout mismatch");
        for (std::size_t i = 0; i < snap.size(); ++i) {
            if (snap[i].size() != params_[i].second.size())
                throw ContractError("restore_values: size mismatch at " + params_[i].first);
            params_[i].second.values_mut() = snap[i];
        }
    }

    // ===================== checkpoint =====================
    // Layout: magic, little-endian u64 header length, JSON header holding the
    // config and the parameter manifest, then raw row-major doubles in
    // manifest order. Raw bytes keep the round trip value-exact.

    void save_checkpoint(const std::filesystem::path& path) const {
        nlohmann::json manifest = nlohmann::json::array();
        for (const auto& [name, t] : params_)
            manifest.push_back({{"name", name}, {"shape", t.shape()}});
        const std::string header =
            nlohmann::json{{"config", model_config_to_json(cfg_)}, {"params", manifest}}.dump();
        std::string blob = kCheckpointMagic;
        std::uint64_t len = header.size();
        char lenbuf[8];
        std::memcpy(lenbuf, &len, 8);
        blob.append(lenbuf, 8);
        blob += header;
        for (const auto& [name, t] : params_)
            blob.append(reinterpret_cast<const char*>(t.values().data()),
                        t.values().size() * sizeof(double));
        io::atomic_write_file(path, blob);
    }

    static TransformerClassifier load_checkpoint(const std::filesystem::path& path) {
        const std::string blob = io::read_file(path);
        const std::string magic = kCheckpointMagic;
        if (blob.size() < magic.size() + 8 || blob.compare(0, magic.size(), magic) != 0)
            throw ParseError(path.string() + ": not a model checkpoint");
        std::uint64_t len = 0;
        std::memcpy(&len, blob.data() + magic.size(), 8);
        const std::size_t header_at = magic.size() + 8;
        if (blob.size() < header_at + len)
            throw ParseError(path.string() + ": truncated checkpoint header");
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(blob.substr(header_at, len));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ": bad checkpoint header: " + e.what());
        }
        ModelConfig cfg = model_config_from_json(header.at("config"));
        RandomStream dummy(0);
        TransformerClassifier model(cfg, dummy);
        std::size_t at = header_at + len;
        const auto& manifest = header.at("params");
        if (manifest.size() != model.params_.size())
            throw ParseError(path.string() + ": parameter manifest length mismatch");
        for (std::size_t i = 0; i < model.params_.size(); ++i) {
            const auto& entry = manifest[i];
            auto& [name, tensor] = model.params_[i];
            if (entry.at("name").get<std::string>() != name)
                throw ParseError(path.string() + ": unexpected parameter '" +
                                 entry.at("name").get<std::string>() + "'");
            const auto shape = entry.at("shape").get<Shape>();
            if (shape != tensor.shape())
                throw ParseError(path.string() + ": shape mismatch for '" + name + "'");
            const std::size_t bytes = tensor.size() * sizeof(double);
            if (blob.size() < at + bytes)
                throw ParseError(path.string() + ": truncated parameter data");
            std::memcpy(tensor.values_mut().data(), blob.data() + at, bytes);
            at += bytes;
        }
        if (at != blob.size()) throw ParseError(path.string() + ": trailing bytes in checkpoint");
        return model;
    }

private:
    static constexpr const char* kCheckpointMagic = "TSMIXCK1";

    void add_param(const std::string& name, Shape shape, RandomStream* rng = nullptr,
                   double fill = 0.0) {
        Tensor t = Tensor::full(std::move(shape), fill, true);
        if (rng) {
            // fan_in = input width of the linear map this matrix implements.
            const double bound = 1.0 / std::sqrt(static_cast<double>(t.shape()[0]));
            for (double& v : t.values_mut()) v = rng->uniform(-bound, bound);
        }
        params_.emplace_back(name, std::move(t));
    }

    void add_param(const std::string& name, Shape shape, RandomStream& rng) {
        add_param(name, std::move(shape), &rng);
    }

    void build_positional_table() {
        const std::size_t t_max = cfg_.seq_len, d = cfg_.d_model;
        pos_table_.assign(t_max * d, 0.0);
        for (std::size_t t = 0; t < t_max; ++t) {
            for (std::size_t i = 0; i < d; i += 2) {
                const double rate =
                    std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
                const double angle = static_cast<double>(t) * rate;
                pos_table_[t * d + i] = std::sin(angle);
                if (i + 1 < d) pos_table_[t * d + i + 1] = std::cos(angle);
            }
        }
    }

    Tensor tiled_positional(std::size_t batch) const {
        std::vector<double> tiled(batch * pos_table_.size());
        for (std::size_t b = 0; b < batch; ++b)
            std::copy(pos_table_.begin(), pos_table_.end(),
                      tiled.begin() + b * pos_table_.size());
        return Tensor::from_values({batch * cfg_.seq_len, cfg_.d_model}, std::move(tiled));
    }

    ModelConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<double> pos_table_;
};

} // namespace tsmix
