// Dataset container, CSV/JSON ingestion, deterministic splits, label-fraction
// subsampling, and the synthetic generator used by the experiment harness.
//
// On-disk format. Data CSV, no header, one sample per row:
//   label,[subject,]v(0,0),v(0,1),...,v(C-1,T-1)
// with channel-major flattening (all timesteps of channel 0, then channel 1,
// ...). Meta JSON sidecar:
//   {"n_classes":K,"n_channels":C,"seq_len":T,"class_names":[...],"has_subject":bool}
// In memory samples are stored time-major ([sample][t][c]) to match the model
// input layout; load/save permute indices, which is value-exact.
#pragma once

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "tsmix/errors.hpp"
#include "tsmix/io.hpp"
#include "tsmix/random.hpp"
#include "tsmix/tensor.hpp"

namespace tsmix {

struct DatasetMeta {
    std::size_t n_classes = 0;
    std::size_t n_channels = 0;
    std::size_t seq_len = 0;
    std::vector<std::string> class_names;
    bool has_subject = false;

    void validate() const {
        if (n_classes == 0 || n_channels == 0 || seq_len == 0)
            throw ValidationError("dataset meta: all counts must be positive");
        if (class_names.size() != n_classes)
            throw ValidationError("dataset meta: class_names length " +
                                  std::to_string(class_names.size()) + " != n_classes " +
                                  std::to_string(n_classes));
    }

    std::size_t sample_width() const { return seq_len * n_channels; }
};

inline nlohmann::json meta_to_json(const DatasetMeta& meta) {
    return nlohmann::json{{"n_classes", meta.n_classes},
                          {"n_channels", meta.n_channels},
                          {"seq_len", meta.seq_len},
                          {"class_names", meta.class_names},
                          {"has_subject", meta.has_subject}};
}

inline DatasetMeta meta_from_json(const nlohmann::json& j) {
    DatasetMeta meta;
    try {
        meta.n_classes = j.at("n_classes").get<std::size_t>();
        meta.n_channels = j.at("n_channels").get<std::size_t>();
        meta.seq_len = j.at("seq_len").get<std::size_t>();
        meta.class_names = j.at("class_names").get<std::vector<std::string>>();
        meta.has_subject = j.at("has_subject").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("dataset meta: ") + e.what());
    }
    meta.validate();
    return meta;
}

struct Dataset {
    DatasetMeta meta;
    std::vector<double> values; // [n][seq_len][n_channels], time-major
    std::vector<std::size_t> labels;
    std::vector<std::uint64_t> subjects; // empty unless meta.has_subject

    std::size_t size() const { return labels.size(); }

    const double* sample(std::size_t i) const { return values.data() + i * meta.sample_width(); }

    // [|idx| x T x C] input tensor for the selected samples.
    Tensor gather_inputs(const std::vector<std::size_t>& idx) const {
        const std::size_t w = meta.sample_width();
        std::vector<double> out(idx.size() * w);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            if (idx[r] >= size()) throw ContractError("gather_inputs: index out of range");
            std::copy_n(sample(idx[r]), w, out.data() + r * w);
        }
        return Tensor::from_values({idx.size(), meta.seq_len, meta.n_channels}, std::move(out));
    }

    // [|idx| x n_classes] one-hot label rows.
    Tensor gather_onehot(const std::vector<std::size_t>& idx) const {
        std::vector<double> out(idx.size() * meta.n_classes, 0.0);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            if (idx[r] >= size()) throw ContractError("gather_onehot: index out of range");
            out[r * meta.n_classes + labels[idx[r]]] = 1.0;
        }
        return Tensor::from_values({idx.size(), meta.n_classes}, std::move(out));
    }

    std::vector<std::size_t> all_indices() const {
        std::vector<std::size_t> idx(size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return idx;
    }
};

// Label-free view handed to semi-supervised training. Ground truth, when the
// pool came from subsample_labels, is retained by the caller only.
struct UnlabeledPool {
    DatasetMeta meta;
    std::vector<double> values;

    std::size_t size() const {
        const std::size_t w = meta.sample_width();
        return w == 0 ? 0 : values.size() / w;
    }

    Tensor gather_inputs(const std::vector<std::size_t>& idx) const {
        const std::size_t w = meta.sample_width();
        std::vector<double> out(idx.size() * w);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            if (idx[r] >= size()) throw ContractError("gather_inputs: index out of range");
            std::copy_n(values.data() + idx[r] * w, w, out.data() + r * w);
        }
        return Tensor::from_values({idx.size(), meta.seq_len, meta.n_channels}, std::move(out));
    }
};

// ===================== CSV round-trip =====================

namespace detail {

inline std::vector<std::string_view> split_csv_row(std::string_view row) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = row.find(',', start);
        if (comma == std::string_view::npos) {
            fields.push_back(row.substr(start));
            break;
        }
        fields.push_back(row.substr(start, comma - start));
        start = comma + 1;
    }
    return fields;
}

} // namespace detail

inline Dataset load_csv(const std::filesystem::path& data_path,
                        const std::filesystem::path& meta_path) {
    nlohmann::json meta_json;
    try {
        meta_json = nlohmann::json::parse(io::read_file(meta_path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(meta_path.string() + ": " + e.what());
    }
    Dataset ds;
    ds.meta = meta_from_json(meta_json);
    const std::size_t width = ds.meta.sample_width();
    const std::size_t expect_fields = 1 + (ds.meta.has_subject ? 1 : 0) + width;

    const std::string content = io::read_file(data_path);
    std::size_t line_start = 0;
    std::size_t row_no = 0;
    while (line_start < content.size()) {
        std::size_t line_end = content.find('\n', line_start);
        if (line_end == std::string::npos) line_end = content.size();
        std::string_view line(content.data() + line_start, line_end - line_start);
        line_start = line_end + 1;
        if (line.empty()) continue;
        ++row_no;
        const std::string where = data_path.string() + " row " + std::to_string(row_no);
        auto fields = detail::split_csv_row(line);
        if (fields.size() != expect_fields)
            throw ParseError(where + ": expected " + std::to_string(expect_fields) +
                             " fields, found " + std::to_string(fields.size()));
        std::size_t at = 0;
        const std::uint64_t label = io::parse_uint(fields[at++], where);
        if (label >= ds.meta.n_classes)
            throw ParseError(where + ": label " + std::to_string(label) + " outside [0, " +
                             std::to_string(ds.meta.n_classes) + ")");
        ds.labels.push_back(static_cast<std::size_t>(label));
        if (ds.meta.has_subject) ds.subjects.push_back(io::parse_uint(fields[at++], where));
        const std::size_t base = ds.values.size();
        ds.values.resize(base + width);
        // Channel-major row into time-major storage.
        for (std::size_t c = 0; c < ds.meta.n_channels; ++c)
            for (std::size_t t = 0; t < ds.meta.seq_len; ++t)
                ds.values[base + t * ds.meta.n_channels + c] = io::parse_double(fields[at++], where);
    }
    return ds;
}

inline std::string dataset_to_csv(const Dataset& ds) {
    std::string out;
    const std::size_t width = ds.meta.sample_width();
    out.reserve(ds.size() * width * 10);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out += std::to_string(ds.labels[i]);
        if (ds.meta.has_subject) {
            out += ',';
            out += std::to_string(ds.subjects[i]);
        }
        const double* row = ds.sample(i);
        for (std::size_t c = 0; c < ds.meta.n_channels; ++c)
            for (std::size_t t = 0; t < ds.meta.seq_len; ++t) {
                out += ',';
                out += io::fmt_double(row[t * ds.meta.n_channels + c]);
            }
        out += '\n';
    }
    return out;
}

inline void save_csv(const Dataset& ds, const std::filesystem::path& data_path,
                     const std::filesystem::path& meta_path) {
    ds.meta.validate();
    if (ds.meta.has_subject && ds.subjects.size() != ds.size())
        throw ValidationError("save_csv: subject column flagged but not populated");
    io::atomic_write_file(data_path, dataset_to_csv(ds));
    io::atomic_write_file(meta_path, meta_to_json(ds.meta).dump(2) + "\n");
}

// ===================== splits =====================

struct SplitSpec {
    double fraction = 0.8;
    enum class Stratify { label, subject } stratify_by = Stratify::label;
    std::uint64_t seed = 0;
};

namespace detail {

inline Dataset take_rows(const Dataset& ds, const std::vector<std::size_t>& idx) {
    Dataset out;
    out.meta = ds.meta;
    const std::size_t w = ds.meta.sample_width();
    out.values.reserve(idx.size() * w);
    for (std::size_t i : idx) {
        out.values.insert(out.values.end(), ds.sample(i), ds.sample(i) + w);
        out.labels.push_back(ds.labels[i]);
        if (ds.meta.has_subject) out.subjects.push_back(ds.subjects[i]);
    }
    return out;
}

constexpr std::uint64_t kSplitStreamTag = 0x5917;

} // namespace detail

inline std::pair<Dataset, Dataset> stratified_split(const Dataset& ds, const SplitSpec& spec) {
    if (!(spec.fraction > 0.0 && spec.fraction < 1.0))
        throw ConfigError("stratified_split: fraction must lie in (0,1)");
    RandomStream rng = RandomStream::derive(spec.seed, detail::kSplitStreamTag);
    std::vector<std::size_t> train_idx, holdout_idx;

    if (spec.stratify_by == SplitSpec::Stratify::label) {
        std::vector<std::vector<std::size_t>> per_class(ds.meta.n_classes);
        for (std::size_t i = 0; i < ds.size(); ++i) per_class[ds.labels[i]].push_back(i);
        for (std::size_t c = 0; c < per_class.size(); ++c) {
            auto& members = per_class[c];
            if (members.size() < 2)
                throw ValidationError("stratified_split: class " + std::to_string(c) + " has " +
                                      std::to_string(members.size()) +
                                      " samples; need at least 2");
            rng.shuffle(members);
            auto take = static_cast<std::size_t>(
                std::llround(spec.fraction * static_cast<double>(members.size())));
            take = std::clamp<std::size_t>(take, 1, members.size() - 1);
            train_idx.insert(train_idx.end(), members.begin(), members.begin() + take);
            holdout_idx.insert(holdout_idx.end(), members.begin() + take, members.end());
        }
    } else {
        if (!ds.meta.has_subject || ds.subjects.size() != ds.size())
            throw ValidationError("stratified_split: subject mode needs subject ids");
        std::map<std::uint64_t, std::vector<std::size_t>> by_subject;
        for (std::size_t i = 0; i < ds.size(); ++i) by_subject[ds.subjects[i]].push_back(i);
        if (by_subject.size() < 2)
            throw ValidationError("stratified_split: subject mode needs at least 2 subjects");
        std::vector<std::uint64_t> subjects;
        for (const auto& [s, _] : by_subject) subjects.push_back(s);
        rng.shuffle(subjects);
        const double target = spec.fraction * static_cast<double>(ds.size());
        std::size_t train_count = 0;
        // Last subject always lands in the holdout so neither side is empty.
        for (std::size_t k = 0; k < subjects.size(); ++k) {
            auto& members = by_subject[subjects[k]];
            const bool to_train = static_cast<double>(train_count) < target &&
                                  k + 1 < subjects.size();
            auto& side = to_train ? train_idx : holdout_idx;
            side.insert(side.end(), members.begin(), members.end());
            if (to_train) train_count += members.size();
        }
        if (train_idx.empty())
            throw ValidationError("stratified_split: subject partition left train side empty");
    }

    std::sort(train_idx.begin(), train_idx.end());
    std::sort(holdout_idx.begin(), holdout_idx.end());
    return {detail::take_rows(ds, train_idx), detail::take_rows(ds, holdout_idx)};
}

// ===================== label subsampling =====================

struct SubsampleResult {
    Dataset labeled;
    UnlabeledPool unlabeled;
    std::vector<std::size_t> labeled_indices;   // into the source dataset
    std::vector<std::size_t> unlabeled_indices; // into the source dataset
    std::vector<std::size_t> hidden_labels;     // ground truth for the pool, eval only
};

inline SubsampleResult subsample_labels(const Dataset& ds, double pct, std::uint64_t seed) {
    if (!(pct > 0.0 && pct <= 100.0))
        throw ConfigError("subsample_labels: pct must lie in (0,100]");
    RandomStream rng = RandomStream::derive(seed, detail::kSplitStreamTag + 1);
    std::vector<std::vector<std::size_t>> per_class(ds.meta.n_classes);
    for (std::size_t i = 0; i < ds.size(); ++i) per_class[ds.labels[i]].push_back(i);

    std::vector<std::size_t> keep, drop;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        auto& members = per_class[c];
        const auto take = static_cast<std::size_t>(
            std::floor(pct / 100.0 * static_cast<double>(members.size())));
        if (take == 0)
            throw ValidationError("subsample_labels: pct " + io::fmt_double(pct) +
                                  " yields zero labeled samples for class " + std::to_string(c));
        rng.shuffle(members);
        keep.insert(keep.end(), members.begin(), members.begin() + take);
        drop.insert(drop.end(), members.begin() + take, members.end());
    }
    std::sort(keep.begin(), keep.end());
    std::sort(drop.begin(), drop.end());

    SubsampleResult res;
    res.labeled = detail::take_rows(ds, keep);
    res.labeled_indices = keep;
    res.unlabeled_indices = drop;
    res.unlabeled.meta = ds.meta;
    const std::size_t w = ds.meta.sample_width();
    res.unlabeled.values.reserve(drop.size() * w);
    for (std::size_t i : drop) {
        res.unlabeled.values.insert(res.unlabeled.values.end(), ds.sample(i), ds.sample(i) + w);
        res.hidden_labels.push_back(ds.labels[i]);
    }
    return res;
}

// ===================== synthetic generator =====================

// Class c emits c+1 sinusoid cycles over the window with a fixed per
// (class, channel) phase offset, plus i.i.d. Gaussian noise.
inline Dataset synth_generate(std::size_t n_classes, std::size_t n_per_class, std::size_t seq_len,
                              std::size_t n_channels, double noise_sd, std::uint64_t seed) {
    if (n_classes == 0 || n_per_class == 0 || seq_len == 0 || n_channels == 0)
        throw ConfigError("synth_generate: all counts must be positive");
    if (noise_sd < 0.0) throw ConfigError("synth_generate: noise_sd must be nonnegative");
    Dataset ds;
    ds.meta.n_classes = n_classes;
    ds.meta.n_channels = n_channels;
    ds.meta.seq_len = seq_len;
    ds.meta.has_subject = false;
    for (std::size_t c = 0; c < n_classes; ++c)
        ds.meta.class_names.push_back("class_" + std::to_string(c));

    RandomStream rng = RandomStream::derive(seed, detail::kSplitStreamTag + 2);
    const double two_pi = 2.0 * 3.14159265358979323846;
    ds.values.resize(n_classes * n_per_class * seq_len * n_channels);
    std::size_t at = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        for (std::size_t s = 0; s < n_per_class; ++s) {
            ds.labels.push_back(c);
            for (std::size_t t = 0; t < seq_len; ++t) {
                for (std::size_t ch = 0; ch < n_channels; ++ch) {
                    const double phase =
                        two_pi * (0.37 * static_cast<double>(c) + 0.61 * static_cast<double>(ch));
                    const double angle = two_pi * static_cast<double>((c + 1) * t) /
                                             static_cast<double>(seq_len) +
                                         phase;
                    double v = std::sin(angle);
                    if (noise_sd > 0.0) v += rng.normal(0.0, noise_sd);
                    ds.values[at++] = v;
                }
            }
        }
    }
    return ds;
}

} // namespace tsmix
