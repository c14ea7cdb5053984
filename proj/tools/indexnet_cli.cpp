// Command-line entry point: train, eval, gradcheck and inspect subcommands
// over the config-driven trainer.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
// failure, 5 failed gradient check.

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>

#include "indexnet/checkpoint.hpp"
#include "indexnet/config.hpp"
#include "indexnet/trainer.hpp"

using namespace indexnet;

namespace {

int run_train(const std::string& config_path, long seed_override, const std::string& out_dir,
              const std::string& resume) {
    RunConfig cfg = run_config_from_file(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    Trainer trainer(cfg, out_dir);
    TrainOutcome outcome = trainer.run(resume);
    const EpochRow& last = outcome.metrics.back();
    std::cout << "trained " << outcome.metrics.size() << " epoch(s); final train loss "
              << last.train_loss << ", eval loss " << last.eval_loss;
    if (!std::isnan(last.eval_accuracy))
        std::cout << ", eval accuracy " << last.eval_accuracy;
    std::cout << "\ncheckpoint: " << outcome.final_checkpoint << "\nmetrics: " << out_dir
              << "/metrics.csv\n";
    if (!std::isfinite(last.train_loss))
        throw NumericError("training diverged to a non-finite loss");
    return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data) {
    CheckpointMeta meta = read_checkpoint_meta(checkpoint);
    std::istringstream spec_stream("[network]\n" + meta.spec_echo);
    ConfigSections sections = parse_config_text(spec_stream);
    RunConfig cfg = run_config_from_sections(sections);
    cfg.dataset = data;
    Trainer trainer(cfg, "/tmp/indexnet-eval");
    load_checkpoint(checkpoint, cfg.raw_network_text, trainer.model(), nullptr);
    auto [loss, acc] = trainer.evaluate();
    std::cout << "eval loss " << std::setprecision(17) << loss;
    if (!std::isnan(acc)) std::cout << ", accuracy " << acc;
    std::cout << "\n";
    return 0;
}

int run_gradcheck(const std::string& config_path, double threshold, const std::string& out_dir) {
    RunConfig cfg = run_config_from_file(config_path);
    Trainer trainer(cfg, out_dir.empty() ? "/tmp/indexnet-gradcheck" : out_dir);
    GradCheckReport report = trainer.gradcheck(threshold);
    report.write_text(std::cout);
    if (!out_dir.empty()) {
        std::ofstream txt(out_dir + "/gradcheck.txt");
        report.write_text(txt);
        std::ofstream csv(out_dir + "/gradcheck.csv");
        report.write_csv(csv);
        std::cout << "report written to " << out_dir << "/gradcheck.{txt,csv}\n";
    }
    return report.pass ? 0 : 5;
}

int run_inspect(const std::string& checkpoint) {
    std::vector<std::string> manifest;
    CheckpointMeta meta = read_checkpoint_meta(checkpoint, &manifest);
    std::cout << "checkpoint " << checkpoint << "\n";
    std::cout << "epoch " << meta.epoch << ", optimizer steps " << meta.optimizer_steps
              << ", learning rate " << meta.eta << "\n";
    std::cout << "network spec:\n";
    std::istringstream spec(meta.spec_echo);
    std::string line;
    while (std::getline(spec, line))
        if (!line.empty()) std::cout << "  " << line << "\n";
    std::size_t total = 0;
    std::cout << "tensors:\n";
    for (const std::string& m : manifest) {
        std::cout << "  " << m << "\n";
        std::istringstream ms(m);
        std::string name;
        std::size_t rank;
        ms >> name >> rank;
        std::size_t count = 1;
        for (std::size_t d = 0; d < rank; ++d) {
            std::size_t dim;
            ms >> dim;
            count *= dim;
        }
        if (name.rfind("param.", 0) == 0) total += count;
    }
    std::cout << "trainable parameters: " << total << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"indexnet: a from-scratch CPU deep-learning trainer"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "run", checkpoint, data, resume;
    long seed_override = -1;
    double threshold = 1e-5;

    CLI::App* train = app.add_subcommand("train", "train a network from a config file");
    train->add_option("--config", config_path, "run configuration file")->required();
    train->add_option("--seed", seed_override, "override the config seed");
    train->add_option("--out", out_dir, "output directory for metrics and checkpoints");
    train->add_option("--resume", resume, "resume from a checkpoint file");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--data", data, "dataset scheme string")->required();

    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference check of the configured network");
    gradcheck->add_option("--config", config_path, "run configuration file")->required();
    gradcheck->add_option("--threshold", threshold, "relative-error threshold");
    gradcheck->add_option("--out", out_dir, "directory for report files")->default_val("");

    CLI::App* inspect = app.add_subcommand("inspect", "dump checkpoint shapes and counts");
    inspect->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return run_train(config_path, seed_override, out_dir, resume);
        if (eval->parsed()) return run_eval(checkpoint, data);
        if (gradcheck->parsed()) return run_gradcheck(config_path, threshold, out_dir);
        if (inspect->parsed()) return run_inspect(checkpoint);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const GeometryError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
