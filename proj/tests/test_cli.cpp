#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "tsmix/experiment.hpp"

using namespace tsmix;
namespace fs = std::filesystem;

namespace {

fs::path test_root() {
    static const fs::path root = [] {
        fs::path p = fs::temp_directory_path() /
                     ("tsmix_cli_test_" + std::to_string(::getpid()));
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

fs::path fresh_dir(const std::string& name) {
    fs::path p = test_root() / name;
    fs::remove_all(p);
    return p;
}

ExperimentConfig tiny_experiment() {
    ExperimentConfig cfg;
    cfg.train_per_class = 10;
    cfg.test_per_class = 5;
    cfg.seq_len = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.dropout_p = 0.1;
    cfg.mode = "mixup_pp";
    cfg.batch_size = 8;
    cfg.max_epochs = 2;
    cfg.lr = 1e-3;
    cfg.seeds = {0, 1};
    return cfg;
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

nlohmann::json final_line(const fs::path& jsonl) {
    const std::string text = slurp(jsonl);
    const std::size_t last_nl = text.find_last_of('\n', text.size() - 2);
    return nlohmann::json::parse(
        text.substr(last_nl == std::string::npos ? 0 : last_nl + 1));
}

// ===================== config parsing =====================

TEST(ConfigJsonTest, UnknownKeyIsNamed) {
    try {
        config_from_json(nlohmann::json{{"learning_rate", 0.1}});
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
    }
}

TEST(ConfigJsonTest, WrongTypeIsNamed) {
    try {
        config_from_json(nlohmann::json{{"max_epochs", "ten"}});
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("max_epochs"), std::string::npos);
    }
}

TEST(ConfigJsonTest, KeysApply) {
    ExperimentConfig cfg = config_from_json(nlohmann::json{{"mode", "latent_mixup"},
                                                           {"k", 3},
                                                           {"alpha", 0.4},
                                                           {"tau", 0.95},
                                                           {"seeds", {4, 5}},
                                                           {"label_pct", {1.0, 5.0}},
                                                           {"d_model", 16}});
    EXPECT_EQ(cfg.mode, "latent_mixup");
    EXPECT_EQ(cfg.k, 3u);
    EXPECT_DOUBLE_EQ(cfg.alpha, 0.4);
    EXPECT_DOUBLE_EQ(cfg.tau, 0.95);
    EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{4, 5}));
    EXPECT_EQ(cfg.label_pct, (std::vector<double>{1.0, 5.0}));
    EXPECT_EQ(cfg.d_model, 16u);
    // untouched keys keep defaults
    EXPECT_DOUBLE_EQ(cfg.lr, 2e-4);
    EXPECT_EQ(cfg.max_epochs, 100u);
}

TEST(ConfigJsonTest, DefaultsMatchDocumentedValues) {
    ExperimentConfig cfg;
    EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
    EXPECT_DOUBLE_EQ(cfg.tau, 0.99);
    EXPECT_DOUBLE_EQ(cfg.alpha, 0.2);
    EXPECT_DOUBLE_EQ(cfg.lr, 2e-4);
    EXPECT_EQ(cfg.n_layers, 5u);
    EXPECT_EQ(cfg.n_heads, 5u);
    EXPECT_EQ(cfg.d_model, 100u);
    EXPECT_DOUBLE_EQ(cfg.dropout_p, 0.15);
    EXPECT_EQ(cfg.warmup_epochs, 10u);
}

TEST(ConfigJsonTest, ListFlagParsers) {
    EXPECT_EQ(parse_seed_list("0,7,42"), (std::vector<std::uint64_t>{0, 7, 42}));
    EXPECT_EQ(parse_pct_list("1,5,25.5"), (std::vector<double>{1.0, 5.0, 25.5}));
    EXPECT_THROW(parse_seed_list("1,x"), ConfigError);
    EXPECT_THROW(parse_pct_list("5,"), ConfigError);
}

TEST(ConfigValidateTest, RejectsBadGrids) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.seeds = {};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_experiment();
    cfg.seeds = {1, 1};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_experiment();
    cfg.label_pct = {0.0};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_experiment();
    cfg.label_pct = {101.0};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_experiment();
    cfg.mode = "bogus";
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_experiment();
    cfg.k_grid = {};
    EXPECT_THROW(cfg.validate(), ConfigError);
}

// ===================== train =====================

TEST(CmdTrainTest, WritesAllArtifacts) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.out_dir = fresh_dir("train_artifacts");
    cmd_train(cfg);
    EXPECT_TRUE(fs::exists(cfg.out_dir / "manifest.json"));
    EXPECT_TRUE(fs::exists(cfg.out_dir / "summary.csv"));
    for (int s : {0, 1}) {
        EXPECT_TRUE(fs::exists(cfg.out_dir / ("seed_" + std::to_string(s) + ".jsonl")));
        EXPECT_TRUE(fs::exists(cfg.out_dir / ("seed_" + std::to_string(s) + ".ckpt")));
    }
    const std::string summary = slurp(cfg.out_dir / "summary.csv");
    EXPECT_EQ(summary.substr(0, summary.find('\n')),
              "mode,n_seeds,accuracy_mean,accuracy_std,f1_macro_mean,f1_macro_std,"
              "kappa_mean,kappa_std");
    EXPECT_NE(summary.find("\nmixup_pp,2,"), std::string::npos);

    const nlohmann::json manifest = nlohmann::json::parse(slurp(cfg.out_dir / "manifest.json"));
    EXPECT_EQ(manifest.at("command"), "train");
    EXPECT_EQ(manifest.at("version"), kVersionString);
    EXPECT_EQ(manifest.at("config").at("mode"), "mixup_pp");
    EXPECT_FALSE(manifest.at("model_selection").get<std::string>().empty());
    ASSERT_EQ(manifest.at("runs").size(), 2u);
    for (const auto& run : manifest.at("runs"))
        EXPECT_TRUE(fs::exists(cfg.out_dir / run.at("path").get<std::string>()));

    // per-epoch records followed by a final record
    const std::string seed0 = slurp(cfg.out_dir / "seed_0.jsonl");
    EXPECT_EQ(std::count(seed0.begin(), seed0.end(), '\n'), 3); // 2 epochs + final
    const nlohmann::json fin = final_line(cfg.out_dir / "seed_0.jsonl");
    EXPECT_TRUE(fin.at("final").get<bool>());
    EXPECT_GE(fin.at("test_accuracy").get<double>(), 0.0);

    // checkpoint reloads and reproduces the recorded test metrics
    TransformerClassifier model =
        TransformerClassifier::load_checkpoint(cfg.out_dir / "seed_0.ckpt");
    const DataBundle data = load_or_generate(cfg);
    EXPECT_DOUBLE_EQ(evaluate(model, data.test).metrics.accuracy,
                     fin.at("test_accuracy").get<double>());
}

TEST(CmdTrainTest, RefusesDirtyDirWithoutOverwrite) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.out_dir = fresh_dir("train_refuse");
    cmd_train(cfg);
    EXPECT_THROW(cmd_train(cfg), ConfigError);
    cfg.overwrite = true;
    EXPECT_NO_THROW(cmd_train(cfg));
}

TEST(CmdTrainTest, RerunIsByteIdentical) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.out_dir = fresh_dir("train_rerun");
    cmd_train(cfg);
    const std::string summary1 = slurp(cfg.out_dir / "summary.csv");
    const std::string seed1 = slurp(cfg.out_dir / "seed_0.jsonl");
    cfg.overwrite = true;
    cmd_train(cfg);
    EXPECT_EQ(slurp(cfg.out_dir / "summary.csv"), summary1);
    EXPECT_EQ(slurp(cfg.out_dir / "seed_0.jsonl"), seed1);
}

TEST(CmdTabulateTest, ReproducesSummaryFromSeedFiles) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.out_dir = fresh_dir("tabulate_pure");
    cmd_train(cfg);
    const std::string original = slurp(cfg.out_dir / "summary.csv");
    fs::remove(cfg.out_dir / "summary.csv");
    cmd_tabulate(cfg);
    EXPECT_EQ(slurp(cfg.out_dir / "summary.csv"), original);
}

TEST(CmdTabulateTest, MissingManifestThrows) {
    ExperimentConfig cfg;
    cfg.out_dir = fresh_dir("tabulate_missing");
    fs::create_directories(cfg.out_dir);
    EXPECT_THROW(cmd_tabulate(cfg), ConfigError);
}

// ===================== ablations =====================

TEST(CmdAblateLabelsTest, GridRowsAndFullFractionConsistency) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.mode = "supervised";
    cfg.seeds = {0};
    cfg.label_pct = {50, 100};
    cfg.out_dir = fresh_dir("ablate_labels");
    cmd_ablate_labels(cfg);

    const std::string curves = slurp(cfg.out_dir / "curves.csv");
    EXPECT_EQ(curves.substr(0, curves.find('\n')), "fraction,mode,metric,mean,std");
    EXPECT_EQ(std::count(curves.begin(), curves.end(), '\n'), 1 + 2 * 3);
    EXPECT_NE(curves.find("50,supervised,accuracy,"), std::string::npos);
    EXPECT_NE(curves.find("100,supervised,kappa,"), std::string::npos);

    // the 100% cell reproduces a plain train run with the same seed
    ExperimentConfig tcfg = cfg;
    tcfg.out_dir = fresh_dir("ablate_labels_train");
    cmd_train(tcfg);
    const nlohmann::json from_grid =
        final_line(cfg.out_dir / "supervised_pct100" / "seed_0.jsonl");
    const nlohmann::json from_train = final_line(tcfg.out_dir / "seed_0.jsonl");
    EXPECT_EQ(from_grid.at("test_accuracy"), from_train.at("test_accuracy"));
    EXPECT_EQ(from_grid.at("test_f1_macro"), from_train.at("test_f1_macro"));
    EXPECT_EQ(from_grid.at("test_kappa"), from_train.at("test_kappa"));
}

TEST(CmdAblateLabelsTest, MoreLabelsDoNotHurtOnEasyData) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.mode = "supervised";
    cfg.train_per_class = 30;
    cfg.test_per_class = 10;
    cfg.seq_len = 16;
    cfg.batch_size = 16;
    cfg.max_epochs = 15;
    cfg.lr = 5e-3;
    cfg.seeds = {0, 1};
    cfg.label_pct = {5, 100};
    cfg.out_dir = fresh_dir("ablate_monotone");
    cmd_ablate_labels(cfg);

    const std::string curves = slurp(cfg.out_dir / "curves.csv");
    const auto mean_after = [&curves](const std::string& prefix) {
        const std::size_t at = curves.find("\n" + prefix);
        EXPECT_NE(at, std::string::npos) << prefix;
        const std::size_t start = at + 1 + prefix.size();
        const std::size_t comma = curves.find(',', start);
        return io::parse_double(curves.substr(start, comma - start), "curves");
    };
    const double acc5 = mean_after("5,supervised,accuracy,");
    const double acc100 = mean_after("100,supervised,accuracy,");
    EXPECT_GE(acc100, acc5);
}

TEST(CmdAblateBatchesTest, KEchoedVerbatim) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.seeds = {0};
    cfg.k_grid = {1, 3};
    cfg.out_dir = fresh_dir("ablate_batches");
    cmd_ablate_batches(cfg);
    const std::string curves = slurp(cfg.out_dir / "curves.csv");
    EXPECT_EQ(curves.substr(0, curves.find('\n')), "k,mode,metric,mean,std");
    // 2 modes x 2 k values x 3 metrics
    EXPECT_EQ(std::count(curves.begin(), curves.end(), '\n'), 1 + 2 * 2 * 3);
    for (const char* want : {"1,mixup_pp,accuracy,", "3,mixup_pp,accuracy,",
                             "1,latent_mixup_pp,accuracy,", "3,latent_mixup_pp,accuracy,"})
        EXPECT_NE(curves.find(want), std::string::npos) << want;
    EXPECT_TRUE(fs::exists(cfg.out_dir / "mixup_pp_k1" / "seed_0.jsonl"));
    EXPECT_TRUE(fs::exists(cfg.out_dir / "latent_mixup_pp_k3" / "seed_0.jsonl"));
}

// ===================== semisup =====================

TEST(CmdSemisupTest, RefusesFullLabelFraction) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.label_pct = {100};
    cfg.out_dir = fresh_dir("semisup_full");
    try {
        cmd_semisup(cfg);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("unlabeled pool"), std::string::npos);
    }
}

TEST(CmdSemisupTest, RunsAndRecordsCensus) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.mode = "latent_mixup"; // normalized to latent_mixup_pp
    cfg.label_pct = {25};
    cfg.tau = 0.5;
    cfg.warmup_epochs = 1;
    cfg.max_epochs = 3;
    cfg.seeds = {0};
    cfg.out_dir = fresh_dir("semisup_run");
    cmd_semisup(cfg);

    const nlohmann::json manifest = nlohmann::json::parse(slurp(cfg.out_dir / "manifest.json"));
    EXPECT_EQ(manifest.at("command"), "semisup");
    EXPECT_EQ(manifest.at("config").at("mode"), "latent_mixup_pp");
    const fs::path seed_file = cfg.out_dir / "latent_mixup_pp_pct25" / "seed_0.jsonl";
    ASSERT_TRUE(fs::exists(seed_file));

    // epochs past warm-up carry a pseudo-label census
    const std::string text = slurp(seed_file);
    std::size_t at = 0, line_no = 0;
    bool saw_census = false;
    while (at < text.size()) {
        std::size_t end = text.find('\n', at);
        if (end == std::string::npos) end = text.size();
        const nlohmann::json j = nlohmann::json::parse(text.substr(at, end - at));
        at = end + 1;
        if (j.value("final", false)) break;
        if (line_no >= 1) {
            EXPECT_TRUE(j.contains("pseudo")) << "epoch " << line_no;
            if (j.contains("pseudo")) {
                saw_census = true;
                EXPECT_EQ(j.at("pseudo").at("per_class").size(), 3u);
                EXPECT_GE(j.at("pseudo").at("pool_size").get<std::size_t>(), 1u);
            }
        } else {
            EXPECT_FALSE(j.contains("pseudo")) << "warm-up epoch " << line_no;
        }
        ++line_no;
    }
    EXPECT_TRUE(saw_census);

    const std::string summary = slurp(cfg.out_dir / "summary.csv");
    EXPECT_EQ(summary.substr(0, summary.find('\n')),
              "mode,label_pct,n_seeds,accuracy_mean,accuracy_std,f1_macro_mean,f1_macro_std,"
              "kappa_mean,kappa_std");
    EXPECT_NE(summary.find("\nlatent_mixup_pp,25,1,"), std::string::npos);
}

TEST(CmdSemisupTest, TauDefaultsTo99) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.mode = "mixup";
    cfg.label_pct = {25};
    cfg.max_epochs = 1;
    cfg.seeds = {0};
    cfg.out_dir = fresh_dir("semisup_tau");
    cmd_semisup(cfg);
    const nlohmann::json manifest = nlohmann::json::parse(slurp(cfg.out_dir / "manifest.json"));
    EXPECT_DOUBLE_EQ(manifest.at("config").at("tau").get<double>(), 0.99);
}

TEST(CmdSemisupTest, RejectsNonMixupModes) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.mode = "supervised";
    cfg.label_pct = {25};
    cfg.out_dir = fresh_dir("semisup_mode");
    EXPECT_THROW(cmd_semisup(cfg), ConfigError);
}

// ===================== gen-data =====================

TEST(CmdGenDataTest, RoundTripsAndIsSeedStable) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.out_dir = fresh_dir("gen_a");
    cmd_gen_data(cfg);
    for (const char* f : {"train.csv", "test.csv", "meta.json", "manifest.json"})
        EXPECT_TRUE(fs::exists(cfg.out_dir / f)) << f;
    const Dataset train = load_csv(cfg.out_dir / "train.csv", cfg.out_dir / "meta.json");
    const Dataset test = load_csv(cfg.out_dir / "test.csv", cfg.out_dir / "meta.json");
    EXPECT_EQ(train.size(), 30u);
    EXPECT_EQ(test.size(), 15u);

    ExperimentConfig cfg2 = tiny_experiment();
    cfg2.out_dir = fresh_dir("gen_b");
    cmd_gen_data(cfg2);
    EXPECT_EQ(slurp(cfg.out_dir / "train.csv"), slurp(cfg2.out_dir / "train.csv"));

    // a training run can consume the generated files
    ExperimentConfig rcfg = tiny_experiment();
    rcfg.data_dir = cfg.out_dir.string();
    rcfg.seeds = {0};
    rcfg.out_dir = fresh_dir("gen_consume");
    EXPECT_NO_THROW(cmd_train(rcfg));
}

TEST(CmdGenDataTest, TabulateRefusesDataDir) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.out_dir = fresh_dir("gen_tab");
    cmd_gen_data(cfg);
    EXPECT_THROW(cmd_tabulate(cfg), ConfigError);
}

// ===================== binary exit codes =====================

int run_binary(const std::string& args) {
    const std::string cmd = std::string(TSMIX_BIN) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

TEST(BinaryExitCodeTest, MapsErrorClasses) {
    const fs::path base = fresh_dir("exit_codes");
    fs::create_directories(base);

    EXPECT_EQ(run_binary("train --out " + (base / "dup").string() + " --seeds 0,0"), 2);
    EXPECT_EQ(run_binary("--definitely-not-a-flag"), 2);
    EXPECT_EQ(run_binary("tabulate --out " + (base / "nothing").string()), 2);

    const fs::path cfg_path = base / "missing_data.json";
    io::atomic_write_file(cfg_path, "{\"data_dir\": \"" + (base / "no_such").string() +
                                        "\", \"seeds\": [0]}");
    EXPECT_EQ(run_binary("train --config " + cfg_path.string() + " --out " +
                         (base / "missing_out").string()),
              3);

    io::atomic_write_file(base / "bad.json", "{not json");
    EXPECT_EQ(run_binary("train --config " + (base / "bad.json").string() + " --out " +
                         (base / "bad_out").string()),
              2);

    // success path
    io::atomic_write_file(base / "ok.json",
                          nlohmann::json{{"train_per_class", 10},
                                         {"test_per_class", 5},
                                         {"seq_len", 8},
                                         {"n_layers", 1},
                                         {"n_heads", 2},
                                         {"d_model", 8},
                                         {"max_epochs", 1},
                                         {"seeds", {0}}}
                              .dump());
    EXPECT_EQ(run_binary("train --config " + (base / "ok.json").string() + " --out " +
                         (base / "ok_out").string()),
              0);
}

} // namespace
