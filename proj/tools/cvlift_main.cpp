// Command-line front end: runs the configured experiments and compares
// result files against references.
//
//   cvlift run --config cfg.json [--seed S] [--out DIR] [--threads K]
//   cvlift compare --a results.json --b reference.json [--rtol R]
//
// Exit codes: 0 ok, 2 config error, 3 numeric error, 4 comparison failure.

#include "cvlift/experiments.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

using namespace cvlift;
using nlohmann::json;

namespace {

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("cannot parse ") + path + ": " + e.what());
    }
    return j;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"collective-variable guided bridge toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, a_path, b_path;
    uint64_t seed = 0;
    bool seed_set = false;
    int threads = -1;
    double rtol = 1e-9;

    CLI::App* run = app.add_subcommand("run", "run one experiment from a JSON config");
    run->add_option("--config", config_path, "config file")->required();
    run->add_option("--seed", seed, "override the master seed")
        ->each([&](const std::string&) { seed_set = true; });
    run->add_option("--out", out_dir, "override the output directory");
    run->add_option("--threads", threads, "cap worker threads (0 = all)");

    CLI::App* cmp = app.add_subcommand("compare", "compare two result files");
    cmp->add_option("--a", a_path, "results file")->required();
    cmp->add_option("--b", b_path, "reference or second results file")->required();
    cmp->add_option("--rtol", rtol, "default relative tolerance");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            json config = load_json(config_path);
            RunOutcome outcome = run_experiment(
                config, out_dir, seed_set ? std::optional<uint64_t>(seed) : std::nullopt,
                threads);
            std::cout << outcome.results["values"].dump(2) << "\n";
            std::cout << "wrote " << outcome.out_dir << "/results.json\n";
            return 0;
        }
        json a = load_json(a_path);
        json b = load_json(b_path);
        CompareOutcome outcome = compare_results(a, b, rtol);
        std::cout << outcome.report.dump(2) << "\n";
        return outcome.pass ? 0 : 4;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const InvalidInputError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
