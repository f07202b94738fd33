#pragma once

// Declarative experiment harness: JSON config parsing (strict), per-seed data
// preparation, parallel run execution with deterministic merge order, and the
// provenance-headed result/summary/analysis writers used by the CLI.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "fairtune/data.hpp"
#include "fairtune/errors.hpp"
#include "fairtune/fisher.hpp"
#include "fairtune/metrics.hpp"
#include "fairtune/pipeline.hpp"
#include "json.hpp"

namespace fairtune {

// ============================================================================
// Experiment specification
// ============================================================================

/// Synthetic data block: a pretraining partition at one bias level and a
/// shifted task partition at another, each split train/test per seed.
struct SyntheticSpec {
    std::size_t n = 5000;
    std::size_t d = 10;
    double bias_pretrain = 0.2;
    double bias_task = 0.6;
    double pretrain_holdout = 0.8;      // train share of the pretrain partition
    double task_train_fraction = 0.5;   // train share of the task partition
};

/// CSV data block: one file partitioned into pretraining and task data
/// (the paper-style 60/40), then split train/test per seed.
struct CsvSpec {
    std::string path;
    ColumnSchema schema;
    double pretrain_fraction = 0.6;
    double pretrain_holdout = 0.8;
    double task_train_fraction = 0.5;
};

struct ExperimentSpec {
    std::string name = "experiment";
    std::string out_dir = "results";
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::variant<SyntheticSpec, CsvSpec> data = SyntheticSpec{};
    Arch arch;  // hidden defaults filled by the parser per data type
    FairnessKind pretrain_fairness = FairnessKind::none;
    double pretrain_intensity = 0.0;
    std::vector<RunConfig> runs;  // per-run seed/pretrain fields are overwritten
    std::string config_hash = "0000000000000000";

    bool synthetic() const {
        return std::holds_alternative<SyntheticSpec>(data);
    }

    void validate() const {
        if (name.empty()) throw ConfigError("experiment name must not be empty");
        if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
        if (seeds.empty()) throw ConfigError("seeds must not be empty");
        for (std::size_t i = 0; i < seeds.size(); ++i)
            for (std::size_t j = i + 1; j < seeds.size(); ++j)
                if (seeds[i] == seeds[j])
                    throw ConfigError("duplicate seed " +
                                      std::to_string(seeds[i]));
        if (const auto* syn = std::get_if<SyntheticSpec>(&data)) {
            if (syn->n < 40) throw ConfigError("data.n must be >= 40");
            if (syn->d < 2) throw ConfigError("data.d must be >= 2");
            for (double b : {syn->bias_pretrain, syn->bias_task})
                if (b < 0.0 || b > 1.0)
                    throw ConfigError("bias levels must be in [0, 1]");
            for (double f : {syn->pretrain_holdout, syn->task_train_fraction})
                if (f <= 0.0 || f >= 1.0)
                    throw ConfigError("split fractions must be in (0, 1)");
        } else {
            const auto& csv = std::get<CsvSpec>(data);
            if (csv.path.empty()) throw ConfigError("data.path must not be empty");
            if (csv.schema.label_column.empty() ||
                csv.schema.sensitive_column.empty())
                throw ConfigError(
                    "data.schema needs label_column and sensitive_column");
            for (double f : {csv.pretrain_fraction, csv.pretrain_holdout,
                             csv.task_train_fraction})
                if (f <= 0.0 || f >= 1.0)
                    throw ConfigError("split fractions must be in (0, 1)");
        }
        if (arch.hidden.empty())
            throw ConfigError("arch.hidden must list at least one layer width");
        for (std::size_t w : arch.hidden)
            if (w == 0) throw ConfigError("arch.hidden widths must be >= 1");
        if (!(arch.lr > 0.0)) throw ConfigError("arch.lr must be positive");
        if (arch.batch < 1) throw ConfigError("arch.batch must be >= 1");
        if (pretrain_intensity < 0.0 || pretrain_intensity > 1.0)
            throw ConfigError("pretrain.intensity must be in [0, 1]");
        if (pretrain_fairness == FairnessKind::none && pretrain_intensity != 0.0)
            throw ConfigError(
                "pretrain.intensity requires pretrain.fairness eo or dp");
        if (runs.empty()) throw ConfigError("runs must not be empty");
        for (const auto& r : runs) {
            r.validate();
            if (r.rank_policy.rank && *r.rank_policy.rank < 1)
                throw ConfigError("run rank must be >= 1");
            if (!(r.rank_policy.energy > 0.0 && r.rank_policy.energy <= 1.0))
                throw ConfigError("run energy must be in (0, 1]");
        }
        for (std::size_t i = 0; i < runs.size(); ++i)
            for (std::size_t j = i + 1; j < runs.size(); ++j)
                if (detail_run_key(runs[i]) == detail_run_key(runs[j]))
                    throw ConfigError("duplicate run entry: " +
                                      detail_run_key(runs[i]));
    }

    /// Identity of a run entry (everything except seed), used for duplicate
    /// rejection and summary grouping.
    static std::string detail_run_key(const RunConfig& r) {
        char policy[32];
        if (r.rank_policy.rank)
            std::snprintf(policy, sizeof policy, "r=%zu", *r.rank_policy.rank);
        else
            std::snprintf(policy, sizeof policy, "e=%.6g",
                          r.rank_policy.energy);
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s|a=%.6g|%s|i=%.6g|lr=%.6g|e=%zu|b=%zu",
                      to_string(r.method).c_str(), r.alpha, policy,
                      r.regularizer_intensity, r.lr, r.epochs, r.batch);
        return buf;
    }
};

// ============================================================================
// Strict JSON parsing
// ============================================================================

namespace detail {

inline void require_object(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object())
        throw ConfigError(where + " must be a JSON object");
}

inline void check_keys(const nlohmann::json& j,
                       std::initializer_list<const char*> allowed,
                       const std::string& where) {
    require_object(j, where);
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known)
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

template <typename T>
T get_field(const nlohmann::json& j, const char* key,
            const std::string& where) {
    if (!j.contains(key))
        throw ConfigError("missing key '" + std::string(key) + "' in " + where);
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T def,
         const std::string& where) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

inline ColumnSchema parse_schema(const nlohmann::json& j,
                                 const std::string& where) {
    check_keys(j,
               {"label_column", "label_positive", "label_negative",
                "sensitive_column", "sensitive_privileged",
                "sensitive_protected", "numeric_columns", "categorical_columns",
                "missing_token"},
               where);
    ColumnSchema s;
    s.label_column = get_field<std::string>(j, "label_column", where);
    s.label_positive = get_field<std::string>(j, "label_positive", where);
    s.label_negative = get_field<std::string>(j, "label_negative", where);
    s.sensitive_column = get_field<std::string>(j, "sensitive_column", where);
    s.sensitive_privileged =
        get_field<std::string>(j, "sensitive_privileged", where);
    s.sensitive_protected =
        get_field<std::string>(j, "sensitive_protected", where);
    s.numeric_columns = get_or<std::vector<std::string>>(
        j, "numeric_columns", {}, where);
    s.categorical_columns = get_or<std::vector<std::string>>(
        j, "categorical_columns", {}, where);
    s.missing_token = get_or<std::string>(j, "missing_token", "?", where);
    return s;
}

inline RunConfig parse_run(const nlohmann::json& j, const std::string& where) {
    check_keys(j,
               {"method", "rank", "energy", "alpha", "intensity", "lr",
                "epochs", "batch"},
               where);
    RunConfig r;
    r.method = method_from_string(get_field<std::string>(j, "method", where));
    if (j.contains("rank") && j.contains("energy"))
        throw ConfigError(where + ": rank and energy are mutually exclusive");
    if (j.contains("rank"))
        r.rank_policy.rank = get_field<std::size_t>(j, "rank", where);
    if (j.contains("energy"))
        r.rank_policy.energy = get_field<double>(j, "energy", where);
    r.alpha = get_or<double>(j, "alpha", 0.5, where);
    r.regularizer_intensity = get_or<double>(j, "intensity", 0.0, where);
    r.lr = get_or<double>(j, "lr", 0.01, where);
    r.epochs = get_or<std::size_t>(j, "epochs", 30, where);
    r.batch = get_or<std::size_t>(j, "batch", 64, where);
    return r;
}

}  // namespace detail

/// FNV-1a over the canonical (sorted-key) dump; the provenance fingerprint.
inline std::string config_hash(const nlohmann::json& j) {
    const std::string s = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(h));
    return buf;
}

/// Parse and validate a full experiment config. Unknown keys anywhere are
/// rejected; nothing is computed until the whole spec is valid.
inline ExperimentSpec parse_experiment(const nlohmann::json& j) {
    detail::check_keys(
        j, {"name", "out_dir", "seeds", "data", "arch", "pretrain", "runs"},
        "config");
    ExperimentSpec spec;
    spec.name = detail::get_or<std::string>(j, "name", "experiment", "config");
    spec.out_dir =
        detail::get_or<std::string>(j, "out_dir", "results", "config");
    spec.seeds = detail::get_or<std::vector<std::uint64_t>>(
        j, "seeds", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, "config");

    bool csv_data = false;
    if (j.contains("data")) {
        const auto& jd = j.at("data");
        const std::string type =
            detail::get_or<std::string>(jd, "type", "synthetic", "config.data");
        if (type == "synthetic") {
            detail::check_keys(jd,
                               {"type", "n", "d", "bias_pretrain", "bias_task",
                                "pretrain_holdout", "task_train_fraction"},
                               "config.data");
            SyntheticSpec syn;
            syn.n = detail::get_or<std::size_t>(jd, "n", 5000, "config.data");
            syn.d = detail::get_or<std::size_t>(jd, "d", 10, "config.data");
            syn.bias_pretrain = detail::get_or<double>(jd, "bias_pretrain", 0.2,
                                                       "config.data");
            syn.bias_task =
                detail::get_or<double>(jd, "bias_task", 0.6, "config.data");
            syn.pretrain_holdout = detail::get_or<double>(
                jd, "pretrain_holdout", 0.8, "config.data");
            syn.task_train_fraction = detail::get_or<double>(
                jd, "task_train_fraction", 0.5, "config.data");
            spec.data = syn;
        } else if (type == "csv") {
            detail::check_keys(jd,
                               {"type", "path", "schema", "pretrain_fraction",
                                "pretrain_holdout", "task_train_fraction"},
                               "config.data");
            CsvSpec csv;
            csv.path = detail::get_field<std::string>(jd, "path", "config.data");
            if (!jd.contains("schema"))
                throw ConfigError("missing key 'schema' in config.data");
            csv.schema =
                detail::parse_schema(jd.at("schema"), "config.data.schema");
            csv.pretrain_fraction = detail::get_or<double>(
                jd, "pretrain_fraction", 0.6, "config.data");
            csv.pretrain_holdout = detail::get_or<double>(
                jd, "pretrain_holdout", 0.8, "config.data");
            csv.task_train_fraction = detail::get_or<double>(
                jd, "task_train_fraction", 0.5, "config.data");
            spec.data = csv;
            csv_data = true;
        } else {
            throw ConfigError("config.data.type must be 'synthetic' or 'csv'");
        }
    }

    // Architecture defaults differ by data kind: a single width-20 hidden
    // layer for the synthetic fixture, the documented 32-16 stack for CSV.
    spec.arch.hidden = csv_data ? std::vector<std::size_t>{32, 16}
                                : std::vector<std::size_t>{20};
    if (j.contains("arch")) {
        const auto& ja = j.at("arch");
        detail::check_keys(ja, {"hidden", "epochs", "lr", "batch", "activation"},
                           "config.arch");
        spec.arch.hidden = detail::get_or<std::vector<std::size_t>>(
            ja, "hidden", spec.arch.hidden, "config.arch");
        spec.arch.epochs =
            detail::get_or<std::size_t>(ja, "epochs", 30, "config.arch");
        spec.arch.lr = detail::get_or<double>(ja, "lr", 0.01, "config.arch");
        spec.arch.batch =
            detail::get_or<std::size_t>(ja, "batch", 64, "config.arch");
        const std::string act = detail::get_or<std::string>(
            ja, "activation", "relu", "config.arch");
        if (act != "relu")
            throw ConfigError("config.arch.activation: only 'relu' hidden "
                              "activations are supported");
    }

    if (j.contains("pretrain")) {
        const auto& jp = j.at("pretrain");
        detail::check_keys(jp, {"fairness", "intensity"}, "config.pretrain");
        spec.pretrain_fairness = fairness_from_string(detail::get_or<std::string>(
            jp, "fairness", "none", "config.pretrain"));
        spec.pretrain_intensity =
            detail::get_or<double>(jp, "intensity", 0.0, "config.pretrain");
    }

    if (j.contains("runs")) {
        const auto& jr = j.at("runs");
        if (!jr.is_array()) throw ConfigError("config.runs must be an array");
        for (std::size_t i = 0; i < jr.size(); ++i)
            spec.runs.push_back(detail::parse_run(
                jr[i], "config.runs[" + std::to_string(i) + "]"));
    } else {
        for (Method m : {Method::TL, Method::F_SVD, Method::OURS}) {
            RunConfig r;
            r.method = m;
            if (m != Method::TL) r.rank_policy.rank = 1;
            spec.runs.push_back(r);
        }
    }

    spec.config_hash = config_hash(j);
    spec.validate();
    return spec;
}

/// Read and parse a config file. I/O problems are FileError; syntax and
/// validation problems are ConfigError (with byte position for syntax).
inline ExperimentSpec load_experiment_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    return parse_experiment(j);
}

// ============================================================================
// Data preparation
// ============================================================================

/// The four datasets a single seeded run needs. Seed streams are fixed so
/// that every consumer of the same spec+seed sees identical bytes.
struct PreparedData {
    Dataset pre_train;
    Dataset pre_test;
    Dataset task_train;
    Dataset task_test;
};

inline PreparedData prepare_data(const ExperimentSpec& spec,
                                 std::uint64_t seed) {
    PreparedData out;
    if (const auto* syn = std::get_if<SyntheticSpec>(&spec.data)) {
        Dataset pre_full = synth_biased(syn->n, syn->d, syn->bias_pretrain,
                                        mix_seed(seed, 11));
        std::tie(out.pre_train, out.pre_test) =
            partition(pre_full, syn->pretrain_holdout, mix_seed(seed, 44));
        Dataset task =
            synth_biased(syn->n, syn->d, syn->bias_task, mix_seed(seed, 22));
        std::tie(out.task_train, out.task_test) =
            partition(task, syn->task_train_fraction, mix_seed(seed, 33));
    } else {
        const auto& csv = std::get<CsvSpec>(spec.data);
        Dataset base = load_csv(csv.path, csv.schema);
        auto [pre_full, task] =
            partition(base, csv.pretrain_fraction, mix_seed(seed, 11));
        std::tie(out.pre_train, out.pre_test) =
            partition(pre_full, csv.pretrain_holdout, mix_seed(seed, 44));
        std::tie(out.task_train, out.task_test) =
            partition(task, csv.task_train_fraction, mix_seed(seed, 33));
    }
    return out;
}

// ============================================================================
// Execution
// ============================================================================

namespace detail {

inline NeuralNet obtain_pretrained(const ExperimentSpec& spec,
                                   const PreparedData& data,
                                   std::uint64_t seed,
                                   const std::string* checkpoint_dir) {
    if (checkpoint_dir) {
        const std::filesystem::path p =
            std::filesystem::path(*checkpoint_dir) /
            ("pretrain_seed" + std::to_string(seed) + ".json");
        if (std::filesystem::exists(p)) return load_checkpoint(p.string());
    }
    return pretrain(data.pre_train, spec.arch, spec.pretrain_fairness,
                    spec.pretrain_intensity, seed);
}

}  // namespace detail

/// Execute the full run matrix: every run entry for every seed. Seeds may be
/// processed in parallel (`jobs` workers); the result order is always
/// run-major then seed-major, independent of scheduling. When
/// `checkpoint_dir` is given, per-seed pretrained checkpoints found there are
/// loaded instead of retrained.
inline std::vector<RunResult> run_experiment(
    const ExperimentSpec& spec, std::size_t jobs = 1,
    const std::string* checkpoint_dir = nullptr) {
    spec.validate();
    const std::size_t n_runs = spec.runs.size();
    const std::size_t n_seeds = spec.seeds.size();
    std::vector<RunResult> results(n_runs * n_seeds);

    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::atomic<bool> failed{false};

    auto worker = [&]() {
        while (!failed.load()) {
            const std::size_t si = next.fetch_add(1);
            if (si >= n_seeds) break;
            try {
                const std::uint64_t seed = spec.seeds[si];
                const PreparedData data = prepare_data(spec, seed);
                const NeuralNet pre = detail::obtain_pretrained(
                    spec, data, seed, checkpoint_dir);
                for (std::size_t ri = 0; ri < n_runs; ++ri) {
                    RunConfig cfg = spec.runs[ri];
                    cfg.seed = seed;
                    cfg.pretrain_fairness = spec.pretrain_fairness;
                    cfg.pretrain_intensity = spec.pretrain_intensity;
                    auto [net, res] = finetune(pre, data.task_train, cfg,
                                               data.task_test, &data.pre_test);
                    results[ri * n_seeds + si] = std::move(res);
                }
            } catch (...) {
                if (!failed.exchange(true))
                    first_error = std::current_exception();
                break;
            }
        }
    };

    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        const std::size_t n_workers = std::min(jobs, n_seeds);
        pool.reserve(n_workers);
        for (std::size_t i = 0; i < n_workers; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failed.load()) std::rethrow_exception(first_error);
    return results;
}

// ============================================================================
// Serialization
// ============================================================================

inline nlohmann::json run_result_to_json(const RunResult& r) {
    nlohmann::json j;
    j["method"] = to_string(r.config.method);
    j["seed"] = r.config.seed;
    j["alpha"] = r.config.alpha;
    if (r.config.rank_policy.rank)
        j["rank"] = *r.config.rank_policy.rank;
    else
        j["energy"] = r.config.rank_policy.energy;
    j["intensity"] = r.config.regularizer_intensity;
    j["lr"] = r.config.lr;
    j["epochs"] = r.config.epochs;
    j["batch"] = r.config.batch;
    j["pretrain_fairness"] = to_string(r.config.pretrain_fairness);
    j["pretrain_intensity"] = r.config.pretrain_intensity;
    j["rank_used"] = r.rank_used;
    j["trainable_params"] = r.trainable_params;
    j["pretrain"] = r.pretrain_report;
    j["finetune"] = r.finetune_report;
    if (r.bias_delta)
        j["bias_delta"] = *r.bias_delta;
    else
        j["bias_delta"] = nullptr;
    return j;
}

/// The slice of a result the summary needs; also what cmd_report recovers
/// from a results.jsonl line.
struct ResultRecord {
    std::string run_key;  // grouping identity (method + hyperparameters)
    std::string method;
    double alpha = 0.5;
    std::string rank_policy;  // "r=1" or "e=0.95"
    double intensity = 0.0;
    std::uint64_t seed = 0;
    double err = 0, f1 = 0, dp = 0, tpr = 0, fpr = 0, eo = 0;
    std::optional<double> bias_delta;
    double trainable_params = 0;
    double rank_used = 0;
};

inline std::string rank_policy_string(const RankPolicy& p) {
    if (p.rank) return "r=" + std::to_string(*p.rank);
    char buf[32];
    std::snprintf(buf, sizeof buf, "e=%.6g", p.energy);
    return buf;
}

inline ResultRecord to_record(const RunResult& r) {
    ResultRecord rec;
    rec.run_key = ExperimentSpec::detail_run_key(r.config);
    rec.method = to_string(r.config.method);
    rec.alpha = r.config.alpha;
    rec.rank_policy = rank_policy_string(r.config.rank_policy);
    rec.intensity = r.config.regularizer_intensity;
    rec.seed = r.config.seed;
    rec.err = r.finetune_report.err_percent;
    rec.f1 = r.finetune_report.f1_weighted;
    rec.dp = r.finetune_report.delta_dp;
    rec.tpr = r.finetune_report.delta_tpr;
    rec.fpr = r.finetune_report.delta_fpr;
    rec.eo = r.finetune_report.delta_eo;
    rec.bias_delta = r.bias_delta;
    rec.trainable_params = static_cast<double>(r.trainable_params);
    rec.rank_used = static_cast<double>(r.rank_used);
    return rec;
}

inline ResultRecord record_from_json(const nlohmann::json& j) {
    ResultRecord rec;
    rec.method = j.at("method").get<std::string>();
    rec.alpha = j.at("alpha").get<double>();
    if (j.contains("rank"))
        rec.rank_policy = "r=" + std::to_string(j.at("rank").get<std::size_t>());
    else {
        char buf[32];
        std::snprintf(buf, sizeof buf, "e=%.6g", j.at("energy").get<double>());
        rec.rank_policy = buf;
    }
    rec.intensity = j.at("intensity").get<double>();
    rec.seed = j.at("seed").get<std::uint64_t>();
    const auto& fin = j.at("finetune");
    rec.err = fin.at("err_percent").get<double>();
    rec.f1 = fin.at("f1_weighted").get<double>();
    rec.dp = fin.at("delta_dp").get<double>();
    rec.tpr = fin.at("delta_tpr").get<double>();
    rec.fpr = fin.at("delta_fpr").get<double>();
    rec.eo = fin.at("delta_eo").get<double>();
    if (!j.at("bias_delta").is_null())
        rec.bias_delta = j.at("bias_delta").get<double>();
    rec.trainable_params = j.at("trainable_params").get<double>();
    rec.rank_used = j.at("rank_used").get<double>();
    {
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "%s|a=%.6g|%s|i=%.6g|lr=%.6g|e=%zu|b=%zu",
                      rec.method.c_str(), rec.alpha, rec.rank_policy.c_str(),
                      rec.intensity, j.at("lr").get<double>(),
                      j.at("epochs").get<std::size_t>(),
                      j.at("batch").get<std::size_t>());
        rec.run_key = buf;
    }
    return rec;
}

// ============================================================================
// Aggregation
// ============================================================================

/// Mean ± std row for one run entry across its seeds (the paper's
/// "derived from ten experimental runs" aggregation).
struct SummaryRow {
    std::string method;
    double alpha = 0.5;
    std::string rank_policy;
    double intensity = 0.0;
    std::size_t n_seeds = 0;
    double err_mean = 0, err_std = 0;
    double f1_mean = 0, f1_std = 0;
    double dp_mean = 0, dp_std = 0;
    double tpr_mean = 0, tpr_std = 0;
    double fpr_mean = 0, fpr_std = 0;
    double eo_mean = 0, eo_std = 0;
    std::optional<double> bias_delta_mean;
    double trainable_params_mean = 0;
    double rank_used_mean = 0;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double m = 0;
    for (double x : v) m += x;
    m /= n;
    if (v.size() < 2) return {m, 0.0};
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / (n - 1.0))};  // sample std over runs
}

}  // namespace detail

/// Group records by run entry (first-appearance order preserved) and reduce
/// each metric to mean ± sample std.
inline std::vector<SummaryRow> summarize(
    const std::vector<ResultRecord>& records) {
    std::vector<std::string> order;
    std::vector<std::vector<const ResultRecord*>> groups;
    for (const auto& rec : records) {
        std::size_t gi = order.size();
        for (std::size_t i = 0; i < order.size(); ++i)
            if (order[i] == rec.run_key) {
                gi = i;
                break;
            }
        if (gi == order.size()) {
            order.push_back(rec.run_key);
            groups.emplace_back();
        }
        groups[gi].push_back(&rec);
    }

    std::vector<SummaryRow> rows;
    for (const auto& group : groups) {
        SummaryRow row;
        const ResultRecord& head = *group.front();
        row.method = head.method;
        row.alpha = head.alpha;
        row.rank_policy = head.rank_policy;
        row.intensity = head.intensity;
        row.n_seeds = group.size();
        auto collect = [&](auto member) {
            std::vector<double> v;
            v.reserve(group.size());
            for (const auto* r : group) v.push_back(r->*member);
            return detail::mean_std(v);
        };
        std::tie(row.err_mean, row.err_std) = collect(&ResultRecord::err);
        std::tie(row.f1_mean, row.f1_std) = collect(&ResultRecord::f1);
        std::tie(row.dp_mean, row.dp_std) = collect(&ResultRecord::dp);
        std::tie(row.tpr_mean, row.tpr_std) = collect(&ResultRecord::tpr);
        std::tie(row.fpr_mean, row.fpr_std) = collect(&ResultRecord::fpr);
        std::tie(row.eo_mean, row.eo_std) = collect(&ResultRecord::eo);
        std::tie(row.trainable_params_mean, std::ignore) =
            collect(&ResultRecord::trainable_params);
        std::tie(row.rank_used_mean, std::ignore) =
            collect(&ResultRecord::rank_used);
        bool all_delta = true;
        double delta_sum = 0;
        for (const auto* r : group) {
            if (!r->bias_delta) {
                all_delta = false;
                break;
            }
            delta_sum += *r->bias_delta;
        }
        if (all_delta)
            row.bias_delta_mean = delta_sum / static_cast<double>(group.size());
        rows.push_back(std::move(row));
    }
    return rows;
}

// ============================================================================
// Output files
// ============================================================================

namespace detail {

inline std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(seeds[i]);
    }
    return s;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw FileError("cannot write " + path.string());
    return out;
}

}  // namespace detail

/// The provenance header every output file starts with.
inline std::vector<std::string> provenance_lines(const ExperimentSpec& spec,
                                                 const std::string& kind) {
    return {"fairtune " + kind,
            "config: " + spec.name + " hash=" + spec.config_hash,
            "seeds: " + detail::join_seeds(spec.seeds)};
}

inline void write_results_jsonl(const std::filesystem::path& path,
                                const ExperimentSpec& spec,
                                const std::vector<RunResult>& results) {
    auto out = detail::open_out(path);
    for (const auto& line : provenance_lines(spec, "results"))
        out << "# " << line << "\n";
    for (const auto& r : results) out << run_result_to_json(r).dump() << "\n";
    if (!out) throw FileError("write failed: " + path.string());
}

inline void write_summary_csv(const std::filesystem::path& path,
                              const ExperimentSpec& spec,
                              const std::vector<SummaryRow>& rows) {
    auto out = detail::open_out(path);
    for (const auto& line : provenance_lines(spec, "summary"))
        out << "# " << line << "\n";
    out << "method,alpha,rank_policy,intensity,n_seeds,"
           "err_mean,err_std,f1_mean,f1_std,"
           "delta_dp_mean,delta_dp_std,delta_tpr_mean,delta_tpr_std,"
           "delta_fpr_mean,delta_fpr_std,delta_eo_mean,delta_eo_std,"
           "bias_delta_mean,trainable_params_mean,rank_used_mean\n";
    char buf[512];
    for (const auto& r : rows) {
        std::string bias_delta;
        if (r.bias_delta_mean) {
            char b[32];
            std::snprintf(b, sizeof b, "%.6f", *r.bias_delta_mean);
            bias_delta = b;
        }
        std::snprintf(buf, sizeof buf,
                      "%s,%.6g,%s,%.6g,%zu,"
                      "%.3f,%.3f,%.6f,%.6f,"
                      "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,"
                      "%s,%.1f,%.1f\n",
                      r.method.c_str(), r.alpha, r.rank_policy.c_str(),
                      r.intensity, r.n_seeds, r.err_mean, r.err_std, r.f1_mean,
                      r.f1_std, r.dp_mean, r.dp_std, r.tpr_mean, r.tpr_std,
                      r.fpr_mean, r.fpr_std, r.eo_mean, r.eo_std,
                      bias_delta.c_str(), r.trainable_params_mean,
                      r.rank_used_mean);
        out << buf;
    }
    if (!out) throw FileError("write failed: " + path.string());
}

/// Plain-text table shaped like the paper's Tables 2-3 (stdout rendering).
inline std::string render_table(const std::vector<SummaryRow>& rows) {
    std::string s;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-12s %-8s %-18s %-18s %-18s %s\n",
                  "method", "policy", "Err (%)", "dDP", "dEO", "bias_delta");
    s += buf;
    for (const auto& r : rows) {
        std::string bias = "-";
        if (r.bias_delta_mean) {
            char b[32];
            std::snprintf(b, sizeof b, "%+.3f", *r.bias_delta_mean);
            bias = b;
        }
        char err[32], dp[32], eo[32];
        std::snprintf(err, sizeof err, "%.3f ± %.3f", r.err_mean, r.err_std);
        std::snprintf(dp, sizeof dp, "%.3f ± %.3f", r.dp_mean, r.dp_std);
        std::snprintf(eo, sizeof eo, "%.3f ± %.3f", r.eo_mean, r.eo_std);
        std::snprintf(buf, sizeof buf, "%-12s %-8s %-18s %-18s %-18s %s\n",
                      r.method.c_str(), r.rank_policy.c_str(), err, dp, eo,
                      bias.c_str());
        s += buf;
    }
    return s;
}

// ============================================================================
// CLI command bodies
// ============================================================================

namespace detail {

inline std::filesystem::path ensure_out_dir(const ExperimentSpec& spec) {
    const std::filesystem::path dir(spec.out_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw FileError("cannot create out_dir " + spec.out_dir + ": " +
                            ec.message());
    return dir;
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir,
                                             std::uint64_t seed) {
    return dir / ("pretrain_seed" + std::to_string(seed) + ".json");
}

}  // namespace detail

/// Pretrain one model per seed; write checkpoints plus a JSON-lines file of
/// pretraining FairnessReports (evaluated on the pretraining holdout).
inline void cmd_pretrain(const ExperimentSpec& spec) {
    spec.validate();
    const auto dir = detail::ensure_out_dir(spec);
    auto out = detail::open_out(dir / "pretrain_reports.jsonl");
    for (const auto& line : provenance_lines(spec, "pretrain reports"))
        out << "# " << line << "\n";
    for (std::uint64_t seed : spec.seeds) {
        const PreparedData data = prepare_data(spec, seed);
        const NeuralNet pre = pretrain(data.pre_train, spec.arch,
                                       spec.pretrain_fairness,
                                       spec.pretrain_intensity, seed);
        save_checkpoint(pre, detail::checkpoint_path(dir, seed).string(),
                        {"fairtune pretrain checkpoint",
                         "config: " + spec.name + " hash=" + spec.config_hash,
                         "seed: " + std::to_string(seed)});
        nlohmann::json j;
        j["seed"] = seed;
        j["fairness"] = to_string(spec.pretrain_fairness);
        j["intensity"] = spec.pretrain_intensity;
        j["report"] = evaluate(pre, data.pre_test);
        out << j.dump() << "\n";
    }
    if (!out) throw FileError("write failed: pretrain_reports.jsonl");
}

/// Run the matrix (reusing checkpoints in out_dir when present) and write
/// results.jsonl plus summary.csv.
inline std::vector<RunResult> cmd_finetune(const ExperimentSpec& spec,
                                           std::size_t jobs = 1) {
    spec.validate();
    const auto dir = detail::ensure_out_dir(spec);
    const std::string dir_str = dir.string();
    std::vector<RunResult> results = run_experiment(spec, jobs, &dir_str);
    write_results_jsonl(dir / "results.jsonl", spec, results);
    std::vector<ResultRecord> records;
    records.reserve(results.size());
    for (const auto& r : results) records.push_back(to_record(r));
    write_summary_csv(dir / "summary.csv", spec, summarize(records));
    return results;
}

/// Analysis exports for the first seed: PCA of positively-predicted task-test
/// representations (2 components + group label) and the per-group Fisher
/// heatmap of the pretrained head on the task training data.
inline void cmd_analyze(const ExperimentSpec& spec) {
    spec.validate();
    const auto dir = detail::ensure_out_dir(spec);
    const std::uint64_t seed = spec.seeds.front();
    const PreparedData data = prepare_data(spec, seed);
    const std::string dir_str = dir.string();
    const NeuralNet net =
        detail::obtain_pretrained(spec, data, seed, &dir_str);

    const ForwardResult fwd = forward(net, data.task_test.x);
    const std::vector<int> preds = predictions_from_logits(fwd.logits);
    std::vector<std::size_t> positive;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == +1) positive.push_back(i);
    Matrix reps(positive.size(), fwd.representation.cols);
    for (std::size_t i = 0; i < positive.size(); ++i)
        for (std::size_t jcol = 0; jcol < reps.cols; ++jcol)
            reps(i, jcol) = fwd.representation(positive[i], jcol);
    const Matrix proj = pca_project(reps, 2);

    auto pca_out = detail::open_out(dir / "pca.csv");
    for (const auto& line : provenance_lines(spec, "pca"))
        pca_out << "# " << line << "\n";
    pca_out << "pc1,pc2,group\n";
    char buf[96];
    for (std::size_t i = 0; i < proj.rows; ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%d\n", proj(i, 0),
                      proj(i, 1), data.task_test.s[positive[i]]);
        pca_out << buf;
    }
    if (!pca_out) throw FileError("write failed: pca.csv");

    const Dataset g1 = group_subset(data.task_train, 1);
    const Dataset g2 = group_subset(data.task_train, 2);
    export_fisher_heatmap(net, g1, g2, (dir / "fisher_heatmap.csv").string(),
                          provenance_lines(spec, "fisher heatmap"));
}

/// Rebuild summary.csv from an existing results.jsonl; returns the rendered
/// table for stdout.
inline std::string cmd_report(const ExperimentSpec& spec) {
    spec.validate();
    const std::filesystem::path dir(spec.out_dir);
    const auto results_path = dir / "results.jsonl";
    std::ifstream in(results_path);
    if (!in) throw FileError("cannot open " + results_path.string() +
                             " (run finetune first)");
    std::vector<ResultRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        try {
            records.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(results_path.string() + " line " +
                            std::to_string(lineno) + ": " + e.what());
        }
    }
    if (records.empty())
        throw DataError(results_path.string() + ": no result lines");
    const std::vector<SummaryRow> rows = summarize(records);
    write_summary_csv(dir / "summary.csv", spec, rows);
    return render_table(rows);
}

}  // namespace fairtune
