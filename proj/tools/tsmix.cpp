// Command-line entry point. All behavior lives in the headers; this file
// only maps flags onto ExperimentConfig and exceptions onto exit codes.
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tsmix/experiment.hpp"

namespace {

struct Flags {
    std::string config_path;
    std::string out_dir;
    std::optional<std::string> seeds;
    std::optional<std::string> mode;
    std::optional<std::string> k;
    std::optional<std::string> alpha;
    std::optional<std::string> tau;
    std::optional<std::string> label_pct;
    bool overwrite = false;
};

template <typename Parse>
auto parse_flag(const std::string& raw, const char* flag, Parse parse) {
    try {
        return parse(raw);
    } catch (const tsmix::Error&) {
        throw tsmix::ConfigError(std::string(flag) + ": cannot parse '" + raw + "'");
    }
}

void add_shared_flags(CLI::App* cmd, Flags& flags) {
    cmd->add_option("--config", flags.config_path, "JSON config file (flat key set)");
    cmd->add_option("--out", flags.out_dir, "output directory")->required();
    cmd->add_option("--seeds", [&flags](const std::vector<std::string>& v) {
            flags.seeds = v.front();
            return true;
        },
        "comma-separated seed list, e.g. 0,1,2");
    cmd->add_option("--mode", [&flags](const std::vector<std::string>& v) {
            flags.mode = v.front();
            return true;
        },
        "training mode (supervised, permute[_pp], mixup[_pp], latent_mixup[_pp])");
    cmd->add_option("--k", [&flags](const std::vector<std::string>& v) {
            flags.k = v.front();
            return true;
        },
        "mixed batches per original batch");
    cmd->add_option("--alpha", [&flags](const std::vector<std::string>& v) {
            flags.alpha = v.front();
            return true;
        },
        "Beta(alpha, alpha) mixing parameter");
    cmd->add_option("--tau", [&flags](const std::vector<std::string>& v) {
            flags.tau = v.front();
            return true;
        },
        "pseudo-label confidence threshold");
    cmd->add_option("--label-pct", [&flags](const std::vector<std::string>& v) {
            flags.label_pct = v.front();
            return true;
        },
        "comma-separated label percentages, e.g. 1,5,25");
    cmd->add_flag("--overwrite", flags.overwrite, "replace artifacts in the output directory");
}

tsmix::ExperimentConfig resolve_config(const Flags& flags, const std::string& command) {
    tsmix::ExperimentConfig cfg;
    if (!flags.config_path.empty()) cfg = tsmix::load_config_file(flags.config_path);
    if (flags.seeds) cfg.seeds = tsmix::parse_seed_list(*flags.seeds);
    if (flags.mode) cfg.mode = *flags.mode;
    if (flags.k) {
        cfg.k = parse_flag(*flags.k, "--k",
                           [](const std::string& s) { return tsmix::io::parse_uint(s, "--k"); });
        if (command == "ablate-batches") cfg.k_grid = {cfg.k};
    }
    if (flags.alpha)
        cfg.alpha = parse_flag(*flags.alpha, "--alpha", [](const std::string& s) {
            return tsmix::io::parse_double(s, "--alpha");
        });
    if (flags.tau)
        cfg.tau = parse_flag(*flags.tau, "--tau", [](const std::string& s) {
            return tsmix::io::parse_double(s, "--tau");
        });
    if (flags.label_pct) cfg.label_pct = tsmix::parse_pct_list(*flags.label_pct);
    cfg.out_dir = flags.out_dir;
    cfg.overwrite = flags.overwrite;
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"tsmix: time-series classification with mixing augmentations"};
    app.require_subcommand(1);

    Flags flags;
    CLI::App* train = app.add_subcommand("train", "train one mode across seeds");
    CLI::App* ablate_labels =
        app.add_subcommand("ablate-labels", "sweep the labeled-data percentage grid");
    CLI::App* ablate_batches =
        app.add_subcommand("ablate-batches", "sweep the mixed-batch count grid");
    CLI::App* semisup =
        app.add_subcommand("semisup", "pseudo-label training with an unlabeled pool");
    CLI::App* gen_data = app.add_subcommand("gen-data", "write a synthetic dataset");
    CLI::App* tabulate =
        app.add_subcommand("tabulate", "rebuild summary/curve tables from run files");
    for (CLI::App* cmd : {train, ablate_labels, ablate_batches, semisup, gen_data, tabulate})
        add_shared_flags(cmd, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const tsmix::ExperimentConfig cfg = resolve_config(flags, command);
        if (command == "train") tsmix::cmd_train(cfg);
        else if (command == "ablate-labels") tsmix::cmd_ablate_labels(cfg);
        else if (command == "ablate-batches") tsmix::cmd_ablate_batches(cfg);
        else if (command == "semisup") tsmix::cmd_semisup(cfg);
        else if (command == "gen-data") tsmix::cmd_gen_data(cfg);
        else tsmix::cmd_tabulate(cfg);
        return 0;
    } catch (const tsmix::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const tsmix::ParseError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const tsmix::ValidationError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const tsmix::IoError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 4;
    }
}
