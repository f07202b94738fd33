// fairtune command-line driver.
//
// Subcommands: pretrain, finetune, analyze, report. Each takes a JSON config
// and optional overrides; overrides are applied to the config *document*
// before validation so the provenance hash always fingerprints the effective
// configuration. Input files are never modified.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
// error, 5 I/O error, 1 anything else.

#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fairtune/experiment.hpp"

namespace {

struct Options {
    std::string config_path;
    std::string seed_list;
    std::string out_dir;
    std::size_t jobs = 1;
    std::optional<std::size_t> rank;
    std::optional<double> energy;
    std::optional<double> alpha;
};

void add_common_options(CLI::App* sub, Options& opt) {
    sub->add_option("-c,--config", opt.config_path, "experiment config JSON")
        ->required();
    sub->add_option("--seed-list", opt.seed_list,
                    "comma-separated seeds overriding the config");
    sub->add_option("-o,--out", opt.out_dir, "output directory override");
    sub->add_option("-j,--jobs", opt.jobs, "parallel seed workers")
        ->check(CLI::PositiveNumber);
    auto* rank = sub->add_option("--rank", opt.rank,
                                 "explicit factorization rank for f+SVD/OURS "
                                 "runs")
                     ->check(CLI::PositiveNumber);
    sub->add_option("--energy", opt.energy,
                    "retained-energy rank selection for f+SVD/OURS runs")
        ->excludes(rank);
    sub->add_option("--alpha", opt.alpha,
                    "importance blend override for OURS runs");
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::istringstream in(text);
    std::string token;
    while (std::getline(in, token, ',')) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(token, &used);
            if (used != token.size()) throw std::invalid_argument(token);
            seeds.push_back(v);
        } catch (const std::exception&) {
            throw fairtune::ConfigError("--seed-list: '" + token +
                                        "' is not a seed");
        }
    }
    if (seeds.empty())
        throw fairtune::ConfigError("--seed-list: no seeds given");
    return seeds;
}

bool factorized(const std::string& method) {
    return method == "f+SVD" || method == "F_SVD" || method == "fsvd" ||
           method == "OURS" || method == "ours";
}

/// Fold the CLI overrides into the config document, materializing the
/// default run matrix first when a run-level override needs it.
nlohmann::json apply_overrides(nlohmann::json j, const Options& opt) {
    if (!j.is_object())
        throw fairtune::ConfigError("config root must be a JSON object");
    if (!opt.out_dir.empty()) j["out_dir"] = opt.out_dir;
    if (!opt.seed_list.empty()) j["seeds"] = parse_seed_list(opt.seed_list);
    if (opt.rank || opt.energy || opt.alpha) {
        if (!j.contains("runs"))
            j["runs"] = {{{"method", "TL"}},
                         {{"method", "f+SVD"}, {"rank", 1}},
                         {{"method", "OURS"}, {"rank", 1}}};
        if (!j["runs"].is_array())
            throw fairtune::ConfigError("config.runs must be an array");
        for (auto& run : j["runs"]) {
            if (!run.is_object() || !run.contains("method")) continue;
            const std::string method =
                run["method"].is_string() ? run["method"].get<std::string>()
                                          : std::string();
            if ((opt.rank || opt.energy) && factorized(method)) {
                run.erase("rank");
                run.erase("energy");
                if (opt.rank)
                    run["rank"] = *opt.rank;
                else
                    run["energy"] = *opt.energy;
            }
            if (opt.alpha && (method == "OURS" || method == "ours"))
                run["alpha"] = *opt.alpha;
        }
    }
    return j;
}

fairtune::ExperimentSpec load_spec(const Options& opt) {
    std::ifstream in(opt.config_path);
    if (!in) throw fairtune::FileError("cannot open config: " +
                                       opt.config_path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw fairtune::ConfigError("config " + opt.config_path + ": " +
                                    e.what());
    }
    return fairtune::parse_experiment(apply_overrides(std::move(j), opt));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fairtune: importance-neutralized low-rank fine-tuning"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "fairtune 1.0.0");

    Options opt;
    auto* pre = app.add_subcommand(
        "pretrain", "train per-seed base models, write checkpoints + reports");
    auto* fin = app.add_subcommand(
        "finetune", "run the fine-tuning matrix, write results + summary");
    auto* ana = app.add_subcommand(
        "analyze", "export PCA and Fisher heatmap for the first seed");
    auto* rep = app.add_subcommand(
        "report", "rebuild summary.csv from results.jsonl and print a table");
    for (auto* sub : {pre, fin, ana, rep}) add_common_options(sub, opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // bad flags are configuration errors
    }

    try {
        const fairtune::ExperimentSpec spec = load_spec(opt);
        if (pre->parsed()) {
            fairtune::cmd_pretrain(spec);
            std::cout << "wrote " << spec.seeds.size()
                      << " checkpoints and pretrain_reports.jsonl to "
                      << spec.out_dir << "\n";
        } else if (fin->parsed()) {
            const auto results = fairtune::cmd_finetune(spec, opt.jobs);
            std::cout << "wrote results.jsonl (" << results.size()
                      << " result lines) and summary.csv to " << spec.out_dir
                      << "\n";
        } else if (ana->parsed()) {
            fairtune::cmd_analyze(spec);
            std::cout << "wrote pca.csv and fisher_heatmap.csv to "
                      << spec.out_dir << "\n";
        } else {
            std::cout << fairtune::cmd_report(spec);
        }
        return 0;
    } catch (const fairtune::FileError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const fairtune::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fairtune::RankError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fairtune::NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const fairtune::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
