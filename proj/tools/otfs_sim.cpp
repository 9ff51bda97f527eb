#include "otfs/experiment.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

int main(int argc, char** argv) {
    CLI::App app{"OTFS delay-Doppler experiment runner"};
    app.set_version_flag("--version", std::string(otfs::kVersion));
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::string> out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;

    for (const auto& name : otfs::experiment_names()) {
        auto* sub = app.add_subcommand(name, "run the " + name + " experiment");
        sub->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "output directory (overrides output_path)");
        sub->add_option("--seed", seed, "master seed (overrides master_seed)");
        sub->add_option("--threads", threads, "worker threads (overrides threads)")->check(CLI::PositiveNumber);
    }

    CLI11_PARSE(app, argc, argv);
    const std::string experiment = app.get_subcommands().front()->get_name();

    try {
        otfs::ExperimentConfig cfg = otfs::load_experiment_config(config_path);
        const auto requested = otfs::experiment_from_string(experiment);
        if (cfg.source.contains("experiment") && cfg.experiment != requested)
            throw otfs::ConfigurationError("config names experiment '" + std::string(otfs::to_string(cfg.experiment)) +
                                           "' but the subcommand is '" + experiment + "'");
        cfg.experiment = requested;
        if (cfg.experiment == otfs::ExperimentKind::BerSweep && cfg.snr_db.empty())
            throw otfs::ParseError(config_path + ": config.snr_db: ber_sweep needs at least one SNR");
        if (cfg.experiment == otfs::ExperimentKind::CapacityTable && cfg.gamma_db.empty())
            throw otfs::ParseError(config_path + ": config.gamma_db: capacity_table needs at least one SNR");
        if (seed) cfg.master_seed = *seed;
        if (threads) cfg.threads = *threads;
        if (out_dir) cfg.output_path = *out_dir;

        const otfs::ExperimentResult result = otfs::run_experiment(cfg);
        const auto csv = otfs::write_outputs(result, cfg.output_path);
        std::cout << "wrote " << csv.string() << " (" << result.rows.size() << " rows)\n";
    } catch (const otfs::ParseError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const otfs::ConfigurationError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
