// Experiment runner behind the command-line tool: run directories, the two
// ablation grids, semi-supervised runs, dataset generation, and tabulation.
//
// Every command follows the same artifact discipline: refuse a directory that
// already holds run files unless overwrite is requested, write files through
// a temp-then-rename step, and finish by writing manifest.json followed by
// the tables derived from the per-seed files.
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsmix/semisup.hpp"

namespace tsmix {

constexpr const char* kVersionString = "tsmix 0.1.0";
constexpr const char* kModelSelectionNote =
    "best validation accuracy; earliest epoch wins ties";

// ===================== configuration =====================

struct ExperimentConfig {
    // data: load from data_dir when set, otherwise synthesize
    std::string data_dir;
    std::size_t n_classes = 3;
    std::size_t train_per_class = 300;
    std::size_t test_per_class = 100;
    std::size_t seq_len = 64;
    std::size_t n_channels = 2;
    double noise_sd = 0.3;
    std::uint64_t data_seed = 1234;
    // model
    std::size_t n_layers = 5;
    std::size_t n_heads = 5;
    std::size_t d_model = 100;
    double dropout_p = 0.15;
    // training
    std::string mode = "supervised";
    std::size_t k = 2;
    double alpha = 0.2;
    double lr = 2e-4;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 100;
    double val_fraction = 0.2;
    std::size_t n_segments = 4;
    // semi-supervised
    double tau = 0.99;
    std::size_t relabel_every = 1;
    std::size_t warmup_epochs = 10;
    // experiment grids
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<double> label_pct;     // empty -> per-command default
    std::vector<std::size_t> k_grid = {1, 2, 3, 4};
    std::vector<std::string> modes;    // ablate-labels; empty -> {mode}
    // output
    std::filesystem::path out_dir;
    bool overwrite = false;

    void validate() const {
        if (seeds.empty()) throw ConfigError("config: seeds must be nonempty");
        for (std::size_t i = 0; i < seeds.size(); ++i)
            for (std::size_t j = i + 1; j < seeds.size(); ++j)
                if (seeds[i] == seeds[j])
                    throw ConfigError("config: duplicate seed " + std::to_string(seeds[i]));
        for (double pct : label_pct)
            if (!(pct > 0.0 && pct <= 100.0))
                throw ConfigError("config: label_pct values must lie in (0,100], got " +
                                  io::fmt_double(pct));
        if (k_grid.empty()) throw ConfigError("config: k_grid must be nonempty");
        for (std::size_t kk : k_grid)
            if (kk < 1) throw ConfigError("config: k_grid values must be >= 1");
        if (!(val_fraction > 0.0 && val_fraction < 1.0))
            throw ConfigError("config: val_fraction must lie in (0,1)");
        mode_from_string(mode);
        for (const auto& m : modes) mode_from_string(m);
        if (data_dir.empty()) {
            if (n_classes < 2) throw ConfigError("config: n_classes must be >= 2");
            if (train_per_class < 2 || test_per_class < 1)
                throw ConfigError("config: per-class sample counts too small");
            if (!(noise_sd >= 0.0)) throw ConfigError("config: noise_sd must be >= 0");
        }
        train_config(seeds.front()).validate();
        pseudo_config().validate();
    }

    ModelConfig model_config(const DatasetMeta& meta) const {
        ModelConfig mc;
        mc.n_layers = n_layers;
        mc.n_heads = n_heads;
        mc.d_model = d_model;
        mc.dropout_p = dropout_p;
        mc.n_classes = meta.n_classes;
        mc.n_channels = meta.n_channels;
        mc.seq_len = meta.seq_len;
        mc.validate();
        return mc;
    }

    TrainConfig train_config(std::uint64_t seed) const {
        TrainConfig tc;
        tc.mode = mode_from_string(mode);
        tc.k = k;
        tc.alpha = BetaParams{alpha};
        tc.lr = lr;
        tc.batch_size = batch_size;
        tc.max_epochs = max_epochs;
        tc.seed = seed;
        tc.n_segments = n_segments;
        return tc;
    }

    PseudoLabelConfig pseudo_config() const {
        PseudoLabelConfig pc;
        pc.tau = tau;
        pc.relabel_every = relabel_every;
        pc.warmup_epochs = warmup_epochs;
        return pc;
    }
};

namespace detail {

template <typename T>
T config_get(const nlohmann::json& j, const std::string& key) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + key + "' has the wrong type");
    }
}

} // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    ExperimentConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "data_dir") cfg.data_dir = detail::config_get<std::string>(value, key);
        else if (key == "n_classes") cfg.n_classes = detail::config_get<std::size_t>(value, key);
        else if (key == "train_per_class")
            cfg.train_per_class = detail::config_get<std::size_t>(value, key);
        else if (key == "test_per_class")
            cfg.test_per_class = detail::config_get<std::size_t>(value, key);
        else if (key == "seq_len") cfg.seq_len = detail::config_get<std::size_t>(value, key);
        else if (key == "n_channels") cfg.n_channels = detail::config_get<std::size_t>(value, key);
        else if (key == "noise_sd") cfg.noise_sd = detail::config_get<double>(value, key);
        else if (key == "data_seed") cfg.data_seed = detail::config_get<std::uint64_t>(value, key);
        else if (key == "n_layers") cfg.n_layers = detail::config_get<std::size_t>(value, key);
        else if (key == "n_heads") cfg.n_heads = detail::config_get<std::size_t>(value, key);
        else if (key == "d_model") cfg.d_model = detail::config_get<std::size_t>(value, key);
        else if (key == "dropout_p") cfg.dropout_p = detail::config_get<double>(value, key);
        else if (key == "mode") cfg.mode = detail::config_get<std::string>(value, key);
        else if (key == "k") cfg.k = detail::config_get<std::size_t>(value, key);
        else if (key == "alpha") cfg.alpha = detail::config_get<double>(value, key);
        else if (key == "lr") cfg.lr = detail::config_get<double>(value, key);
        else if (key == "batch_size") cfg.batch_size = detail::config_get<std::size_t>(value, key);
        else if (key == "max_epochs") cfg.max_epochs = detail::config_get<std::size_t>(value, key);
        else if (key == "val_fraction")
            cfg.val_fraction = detail::config_get<double>(value, key);
        else if (key == "n_segments") cfg.n_segments = detail::config_get<std::size_t>(value, key);
        else if (key == "tau") cfg.tau = detail::config_get<double>(value, key);
        else if (key == "relabel_every")
            cfg.relabel_every = detail::config_get<std::size_t>(value, key);
        else if (key == "warmup_epochs")
            cfg.warmup_epochs = detail::config_get<std::size_t>(value, key);
        else if (key == "seeds")
            cfg.seeds = detail::config_get<std::vector<std::uint64_t>>(value, key);
        else if (key == "label_pct")
            cfg.label_pct = detail::config_get<std::vector<double>>(value, key);
        else if (key == "k_grid")
            cfg.k_grid = detail::config_get<std::vector<std::size_t>>(value, key);
        else if (key == "modes")
            cfg.modes = detail::config_get<std::vector<std::string>>(value, key);
        else
            throw ConfigError("config: unknown key '" + key + "'");
    }
    return cfg;
}

inline ExperimentConfig load_config_file(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

inline nlohmann::json resolved_config_json(const ExperimentConfig& cfg) {
    return nlohmann::json{{"data_dir", cfg.data_dir},
                          {"n_classes", cfg.n_classes},
                          {"train_per_class", cfg.train_per_class},
                          {"test_per_class", cfg.test_per_class},
                          {"seq_len", cfg.seq_len},
                          {"n_channels", cfg.n_channels},
                          {"noise_sd", cfg.noise_sd},
                          {"data_seed", cfg.data_seed},
                          {"n_layers", cfg.n_layers},
                          {"n_heads", cfg.n_heads},
                          {"d_model", cfg.d_model},
                          {"dropout_p", cfg.dropout_p},
                          {"mode", cfg.mode},
                          {"k", cfg.k},
                          {"alpha", cfg.alpha},
                          {"lr", cfg.lr},
                          {"batch_size", cfg.batch_size},
                          {"max_epochs", cfg.max_epochs},
                          {"val_fraction", cfg.val_fraction},
                          {"n_segments", cfg.n_segments},
                          {"tau", cfg.tau},
                          {"relabel_every", cfg.relabel_every},
                          {"warmup_epochs", cfg.warmup_epochs},
                          {"seeds", cfg.seeds},
                          {"label_pct", cfg.label_pct},
                          {"k_grid", cfg.k_grid},
                          {"modes", cfg.modes},
                          {"out_dir", cfg.out_dir.string()}};
}

// Comma-separated list parsing for the override flags.
inline std::vector<std::string> split_list(const std::string& raw) {
    std::vector<std::string> parts;
    std::size_t at = 0;
    while (at <= raw.size()) {
        const std::size_t comma = raw.find(',', at);
        const std::size_t end = comma == std::string::npos ? raw.size() : comma;
        parts.push_back(raw.substr(at, end - at));
        if (comma == std::string::npos) break;
        at = comma + 1;
    }
    return parts;
}

inline std::vector<std::uint64_t> parse_seed_list(const std::string& raw) {
    std::vector<std::uint64_t> seeds;
    for (const auto& part : split_list(raw)) {
        try {
            seeds.push_back(io::parse_uint(part, "--seeds"));
        } catch (const ParseError&) {
            throw ConfigError("--seeds: '" + part + "' is not a nonnegative integer");
        }
    }
    return seeds;
}

inline std::vector<double> parse_pct_list(const std::string& raw) {
    std::vector<double> pcts;
    for (const auto& part : split_list(raw)) {
        try {
            pcts.push_back(io::parse_double(part, "--label-pct"));
        } catch (const ParseError&) {
            throw ConfigError("--label-pct: '" + part + "' is not a number");
        }
    }
    return pcts;
}

// ===================== data acquisition =====================

struct DataBundle {
    Dataset train;
    Dataset test;
};

inline DataBundle load_or_generate(const ExperimentConfig& cfg) {
    if (!cfg.data_dir.empty()) {
        const std::filesystem::path dir(cfg.data_dir);
        DataBundle bundle{load_csv(dir / "train.csv", dir / "meta.json"),
                          load_csv(dir / "test.csv", dir / "meta.json")};
        return bundle;
    }
    return DataBundle{synth_generate(cfg.n_classes, cfg.train_per_class, cfg.seq_len,
                                     cfg.n_channels, cfg.noise_sd, cfg.data_seed),
                      synth_generate(cfg.n_classes, cfg.test_per_class, cfg.seq_len,
                                     cfg.n_channels, cfg.noise_sd, cfg.data_seed + 1)};
}

// ===================== run directory policy =====================

namespace detail {

inline bool is_seed_file(const std::filesystem::path& p) {
    const std::string name = p.filename().string();
    return name.rfind("seed_", 0) == 0 && p.extension() == ".jsonl";
}

inline bool has_run_artifacts(const std::filesystem::path& out) {
    namespace fs = std::filesystem;
    for (const char* name : {"manifest.json", "summary.csv", "curves.csv"})
        if (fs::exists(out / name)) return true;
    for (const auto& entry : fs::directory_iterator(out)) {
        if (entry.is_regular_file() && is_seed_file(entry.path())) return true;
        if (entry.is_directory())
            for (const auto& inner : fs::directory_iterator(entry.path()))
                if (inner.is_regular_file() && is_seed_file(inner.path())) return true;
    }
    return false;
}

} // namespace detail

inline void prepare_out_dir(const std::filesystem::path& out, bool overwrite) {
    namespace fs = std::filesystem;
    if (out.empty()) throw ConfigError("an output directory is required (--out)");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out))
        throw IoError("cannot create output directory " + out.string());
    if (detail::has_run_artifacts(out)) {
        if (!overwrite)
            throw ConfigError("output directory " + out.string() +
                              " already contains run artifacts; pass --overwrite to replace them");
        // Drop the completeness marker first so an interrupted rerun is not
        // mistaken for a finished one.
        fs::remove(out / "manifest.json", ec);
    }
}

// ===================== per-seed run =====================

struct RunOutcome {
    MetricSet test;
    std::size_t best_epoch = 0;
};

namespace detail {

inline nlohmann::json metric_fields(const char* prefix, const MetricSet& m) {
    return nlohmann::json{{std::string(prefix) + "accuracy", m.accuracy},
                          {std::string(prefix) + "f1_macro", m.f1_macro},
                          {std::string(prefix) + "kappa", m.kappa}};
}

inline nlohmann::json epoch_record(const EpochReport& report, const PseudoCensus* census) {
    nlohmann::json j{{"epoch", report.epoch}, {"train_loss", report.train_loss}};
    j.update(metric_fields("val_", report.val));
    if (census)
        j["pseudo"] = nlohmann::json{{"pool_size", census->pool_size},
                                     {"n_selected", census->n_selected},
                                     {"per_class", census->per_class},
                                     {"mean_confidence", census->mean_confidence}};
    return j;
}

inline nlohmann::json final_record(const MetricSet& test, std::size_t best_epoch) {
    nlohmann::json j{{"final", true}, {"best_epoch", best_epoch}};
    j.update(metric_fields("test_", test));
    return j;
}

} // namespace detail

// Trains one seed end to end and writes its JSONL file (one record per epoch
// plus a final test record). label_pct < 100 subsamples the training split;
// semisup additionally feeds the dropped samples back in as the unlabeled
// pool.
inline RunOutcome run_seed(const ExperimentConfig& cfg, const DataBundle& data, TrainConfig tc,
                           double label_pct, const std::filesystem::path& jsonl_path,
                           const std::filesystem::path* checkpoint_path, bool semisup) {
    SplitSpec spec;
    spec.fraction = 1.0 - cfg.val_fraction;
    spec.stratify_by = SplitSpec::Stratify::label;
    spec.seed = tc.seed;
    auto [train_part, val_part] = stratified_split(data.train, spec);

    Dataset labeled = std::move(train_part);
    UnlabeledPool pool;
    pool.meta = data.train.meta;
    if (label_pct < 100.0) {
        SubsampleResult sub = subsample_labels(labeled, label_pct, tc.seed);
        labeled = std::move(sub.labeled);
        pool = std::move(sub.unlabeled);
    }

    RandomStream init = RandomStream::derive(tc.seed, stream_tag::init);
    TransformerClassifier model(cfg.model_config(data.train.meta), init);

    std::string lines;
    const auto add_line = [&lines](const nlohmann::json& j) {
        lines += j.dump();
        lines += '\n';
    };
    std::size_t best_epoch = 0;
    if (semisup) {
        SemisupFitResult res = fit_semisup(
            model, labeled, pool, val_part, tc, cfg.pseudo_config(),
            [&](const EpochReport& r, const PseudoCensus* c) { add_line(detail::epoch_record(r, c)); });
        best_epoch = res.best_epoch;
    } else {
        FitResult res = fit(model, labeled, val_part, tc, [&](const EpochReport& r) {
            add_line(detail::epoch_record(r, nullptr));
        });
        best_epoch = res.best_epoch;
    }
    RunOutcome outcome;
    outcome.test = evaluate(model, data.test).metrics;
    outcome.best_epoch = best_epoch;
    add_line(detail::final_record(outcome.test, best_epoch));
    io::atomic_write_file(jsonl_path, lines);
    if (checkpoint_path) model.save_checkpoint(*checkpoint_path);
    return outcome;
}

// ===================== manifest & tabulation =====================

struct ManifestRun {
    std::string mode;
    std::optional<double> label_pct;
    std::optional<std::size_t> k;
    std::uint64_t seed = 0;
    std::string path; // relative to the run directory
    std::optional<std::string> checkpoint;
    std::size_t best_epoch = 0;
};

inline void write_manifest(const std::filesystem::path& out, const std::string& command,
                           const ExperimentConfig& cfg, const std::vector<ManifestRun>& runs) {
    nlohmann::json jruns = nlohmann::json::array();
    for (const auto& run : runs) {
        nlohmann::json j{{"mode", run.mode},
                         {"seed", run.seed},
                         {"path", run.path},
                         {"best_epoch", run.best_epoch}};
        if (run.label_pct) j["label_pct"] = *run.label_pct;
        if (run.k) j["k"] = *run.k;
        if (run.checkpoint) j["checkpoint"] = *run.checkpoint;
        jruns.push_back(j);
    }
    const nlohmann::json manifest{{"version", kVersionString},
                                  {"command", command},
                                  {"model_selection", kModelSelectionNote},
                                  {"config", resolved_config_json(cfg)},
                                  {"runs", jruns}};
    io::atomic_write_file(out / "manifest.json", manifest.dump(2) + "\n");
}

namespace detail {

inline MetricSet read_final_metrics(const std::filesystem::path& jsonl_path) {
    std::optional<MetricSet> found;
    std::size_t line_no = 0;
    std::size_t at = 0;
    const std::string text = io::read_file(jsonl_path);
    while (at < text.size()) {
        std::size_t end = text.find('\n', at);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(at, end - at);
        at = end + 1;
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(jsonl_path.string() + " line " + std::to_string(line_no) + ": " +
                             e.what());
        }
        if (j.value("final", false)) {
            MetricSet m;
            m.accuracy = j.at("test_accuracy").get<double>();
            m.f1_macro = j.at("test_f1_macro").get<double>();
            m.kappa = j.at("test_kappa").get<double>();
            found = m;
        }
    }
    if (!found)
        throw ParseError(jsonl_path.string() + ": no final metrics record found");
    return *found;
}

struct MetricAggregates {
    std::size_t n_runs = 0;
    SeedAggregate accuracy, f1_macro, kappa;
};

inline MetricAggregates aggregate_finals(const std::vector<MetricSet>& finals) {
    std::vector<double> acc, f1, kappa;
    for (const auto& m : finals) {
        acc.push_back(m.accuracy);
        f1.push_back(m.f1_macro);
        kappa.push_back(m.kappa);
    }
    MetricAggregates agg;
    agg.n_runs = finals.size();
    agg.accuracy = aggregate_seeds(acc);
    agg.f1_macro = aggregate_seeds(f1);
    agg.kappa = aggregate_seeds(kappa);
    return agg;
}

inline std::string fmt_metric(double v) { return io::fmt_fixed(v, 6); }

inline std::string fmt_std(const std::optional<double>& std_dev) {
    return std_dev ? fmt_metric(*std_dev) : std::string();
}

// Group key in first-seen manifest order.
struct RunGroup {
    std::string mode;
    std::optional<double> label_pct;
    std::optional<std::size_t> k;
    std::vector<MetricSet> finals;
};

inline std::vector<RunGroup> group_runs(const std::filesystem::path& out,
                                        const nlohmann::json& runs) {
    std::vector<RunGroup> groups;
    for (const auto& run : runs) {
        RunGroup key;
        key.mode = run.at("mode").get<std::string>();
        if (run.contains("label_pct")) key.label_pct = run.at("label_pct").get<double>();
        if (run.contains("k")) key.k = run.at("k").get<std::size_t>();
        auto matches = [&key](const RunGroup& g) {
            return g.mode == key.mode && g.label_pct == key.label_pct && g.k == key.k;
        };
        auto it = std::find_if(groups.begin(), groups.end(), matches);
        if (it == groups.end()) {
            groups.push_back(key);
            it = groups.end() - 1;
        }
        it->finals.push_back(read_final_metrics(out / run.at("path").get<std::string>()));
    }
    return groups;
}

inline std::string aggregate_cells(const MetricAggregates& agg) {
    return fmt_metric(agg.accuracy.mean) + "," + fmt_std(agg.accuracy.std_dev) + "," +
           fmt_metric(agg.f1_macro.mean) + "," + fmt_std(agg.f1_macro.std_dev) + "," +
           fmt_metric(agg.kappa.mean) + "," + fmt_std(agg.kappa.std_dev);
}

inline void write_summary_csv(const std::filesystem::path& out,
                              const std::vector<RunGroup>& groups, bool with_pct) {
    std::string csv = with_pct ? "mode,label_pct,n_seeds,accuracy_mean,accuracy_std,f1_macro_mean,"
                                 "f1_macro_std,kappa_mean,kappa_std\n"
                               : "mode,n_seeds,accuracy_mean,accuracy_std,f1_macro_mean,"
                                 "f1_macro_std,kappa_mean,kappa_std\n";
    for (const auto& g : groups) {
        const MetricAggregates agg = aggregate_finals(g.finals);
        csv += g.mode;
        if (with_pct) csv += "," + io::fmt_double(g.label_pct.value());
        csv += "," + std::to_string(agg.n_runs) + "," + aggregate_cells(agg) + "\n";
    }
    io::atomic_write_file(out / "summary.csv", csv);
}

inline void write_curves_csv(const std::filesystem::path& out,
                             const std::vector<RunGroup>& groups, const std::string& x_name) {
    std::string csv = x_name + ",mode,metric,mean,std\n";
    for (const auto& g : groups) {
        const MetricAggregates agg = aggregate_finals(g.finals);
        const std::string x = x_name == "k" ? std::to_string(g.k.value())
                                            : io::fmt_double(g.label_pct.value());
        const struct {
            const char* name;
            const SeedAggregate& agg;
        } rows[] = {{"accuracy", agg.accuracy}, {"f1_macro", agg.f1_macro}, {"kappa", agg.kappa}};
        for (const auto& row : rows)
            csv += x + "," + g.mode + "," + row.name + "," + fmt_metric(row.agg.mean) + "," +
                   fmt_std(row.agg.std_dev) + "\n";
    }
    io::atomic_write_file(out / "curves.csv", csv);
}

} // namespace detail

// Rebuilds the derived tables from manifest.json and the per-seed files. A
// pure function of those files: rerunning it reproduces the tables byte for
// byte.
inline void tabulate_run_dir(const std::filesystem::path& out) {
    const std::filesystem::path manifest_path = out / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
        throw ConfigError("no manifest.json in " + out.string() + "; nothing to tabulate");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(io::read_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(manifest_path.string() + ": " + e.what());
    }
    const std::string command = manifest.at("command").get<std::string>();
    if (command == "gen-data")
        throw ConfigError("run directory holds generated data, not training runs");
    const auto groups = detail::group_runs(out, manifest.at("runs"));
    if (command == "train") detail::write_summary_csv(out, groups, false);
    else if (command == "semisup") detail::write_summary_csv(out, groups, true);
    else if (command == "ablate-labels") detail::write_curves_csv(out, groups, "fraction");
    else if (command == "ablate-batches") detail::write_curves_csv(out, groups, "k");
    else throw ParseError(manifest_path.string() + ": unknown command '" + command + "'");
}

// ===================== commands =====================

inline void cmd_train(const ExperimentConfig& cfg) {
    cfg.validate();
    prepare_out_dir(cfg.out_dir, cfg.overwrite);
    const DataBundle data = load_or_generate(cfg);
    std::vector<ManifestRun> runs;
    for (std::uint64_t seed : cfg.seeds) {
        const std::string stem = "seed_" + std::to_string(seed);
        const std::filesystem::path jsonl = cfg.out_dir / (stem + ".jsonl");
        const std::filesystem::path ckpt = cfg.out_dir / (stem + ".ckpt");
        TrainConfig tc = cfg.train_config(seed);
        const RunOutcome outcome = run_seed(cfg, data, tc, 100.0, jsonl, &ckpt, false);
        ManifestRun run;
        run.mode = cfg.mode;
        run.seed = seed;
        run.path = stem + ".jsonl";
        run.checkpoint = stem + ".ckpt";
        run.best_epoch = outcome.best_epoch;
        runs.push_back(run);
    }
    write_manifest(cfg.out_dir, "train", cfg, runs);
    tabulate_run_dir(cfg.out_dir);
}

inline void cmd_ablate_labels(ExperimentConfig cfg) {
    if (cfg.label_pct.empty()) cfg.label_pct = {1, 5, 25, 50, 100};
    if (cfg.modes.empty()) cfg.modes = {cfg.mode};
    cfg.validate();
    prepare_out_dir(cfg.out_dir, cfg.overwrite);
    const DataBundle data = load_or_generate(cfg);
    std::vector<ManifestRun> runs;
    for (const std::string& mode : cfg.modes) {
        for (double pct : cfg.label_pct) {
            const std::string cell = mode + "_pct" + io::fmt_double(pct);
            std::filesystem::create_directories(cfg.out_dir / cell);
            for (std::uint64_t seed : cfg.seeds) {
                const std::string rel = cell + "/seed_" + std::to_string(seed) + ".jsonl";
                TrainConfig tc = cfg.train_config(seed);
                tc.mode = mode_from_string(mode);
                const RunOutcome outcome =
                    run_seed(cfg, data, tc, pct, cfg.out_dir / rel, nullptr, false);
                ManifestRun run;
                run.mode = mode;
                run.label_pct = pct;
                run.seed = seed;
                run.path = rel;
                run.best_epoch = outcome.best_epoch;
                runs.push_back(run);
            }
        }
    }
    write_manifest(cfg.out_dir, "ablate-labels", cfg, runs);
    tabulate_run_dir(cfg.out_dir);
}

inline void cmd_ablate_batches(const ExperimentConfig& cfg) {
    cfg.validate();
    prepare_out_dir(cfg.out_dir, cfg.overwrite);
    const DataBundle data = load_or_generate(cfg);
    std::vector<ManifestRun> runs;
    for (const char* mode : {"mixup_pp", "latent_mixup_pp"}) {
        for (std::size_t kk : cfg.k_grid) {
            const std::string cell = std::string(mode) + "_k" + std::to_string(kk);
            std::filesystem::create_directories(cfg.out_dir / cell);
            for (std::uint64_t seed : cfg.seeds) {
                const std::string rel = cell + "/seed_" + std::to_string(seed) + ".jsonl";
                TrainConfig tc = cfg.train_config(seed);
                tc.mode = mode_from_string(mode);
                tc.k = kk;
                const RunOutcome outcome =
                    run_seed(cfg, data, tc, 100.0, cfg.out_dir / rel, nullptr, false);
                ManifestRun run;
                run.mode = mode;
                run.k = kk;
                run.seed = seed;
                run.path = rel;
                run.best_epoch = outcome.best_epoch;
                runs.push_back(run);
            }
        }
    }
    write_manifest(cfg.out_dir, "ablate-batches", cfg, runs);
    tabulate_run_dir(cfg.out_dir);
}

// Maps the plain mixing modes onto their ++ counterparts; the pseudo epoch
// always keeps the original batches alongside the mixed ones.
inline std::string normalize_semisup_mode(const std::string& mode) {
    const TrainMode m = mode_from_string(mode);
    switch (m) {
        case TrainMode::mixup:
        case TrainMode::mixup_pp: return "mixup_pp";
        case TrainMode::latent_mixup:
        case TrainMode::latent_mixup_pp: return "latent_mixup_pp";
        default:
            throw ConfigError("semisup requires a mixup mode, got '" + mode + "'");
    }
}

inline void cmd_semisup(ExperimentConfig cfg) {
    if (cfg.label_pct.empty()) cfg.label_pct = {5};
    cfg.mode = normalize_semisup_mode(cfg.mode);
    cfg.validate();
    for (double pct : cfg.label_pct)
        if (pct >= 100.0)
            throw ConfigError(
                "semisup with label_pct=100 leaves no unlabeled pool; every sample would "
                "already be labeled. Use a fraction below 100 or run the train command.");
    prepare_out_dir(cfg.out_dir, cfg.overwrite);
    const DataBundle data = load_or_generate(cfg);
    std::vector<ManifestRun> runs;
    for (double pct : cfg.label_pct) {
        const std::string cell = cfg.mode + "_pct" + io::fmt_double(pct);
        std::filesystem::create_directories(cfg.out_dir / cell);
        for (std::uint64_t seed : cfg.seeds) {
            const std::string rel = cell + "/seed_" + std::to_string(seed) + ".jsonl";
            TrainConfig tc = cfg.train_config(seed);
            const RunOutcome outcome =
                run_seed(cfg, data, tc, pct, cfg.out_dir / rel, nullptr, true);
            ManifestRun run;
            run.mode = cfg.mode;
            run.label_pct = pct;
            run.seed = seed;
            run.path = rel;
            run.best_epoch = outcome.best_epoch;
            runs.push_back(run);
        }
    }
    write_manifest(cfg.out_dir, "semisup", cfg, runs);
    tabulate_run_dir(cfg.out_dir);
}

inline void cmd_gen_data(const ExperimentConfig& cfg) {
    if (!cfg.data_dir.empty())
        throw ConfigError("gen-data synthesizes its own files; data_dir must be unset");
    cfg.validate();
    prepare_out_dir(cfg.out_dir, cfg.overwrite);
    const DataBundle data = load_or_generate(cfg);
    save_csv(data.train, cfg.out_dir / "train.csv", cfg.out_dir / "meta.json");
    save_csv(data.test, cfg.out_dir / "test.csv", cfg.out_dir / "meta.json");
    const nlohmann::json manifest{
        {"version", kVersionString},
        {"command", "gen-data"},
        {"config", resolved_config_json(cfg)},
        {"files", {"train.csv", "test.csv", "meta.json"}}};
    io::atomic_write_file(cfg.out_dir / "manifest.json", manifest.dump(2) + "\n");
}

inline void cmd_tabulate(const ExperimentConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("an output directory is required (--out)");
    tabulate_run_dir(cfg.out_dir);
}

} // namespace tsmix
