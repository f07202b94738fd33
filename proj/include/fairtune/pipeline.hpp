#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fairtune/data.hpp"
#include "fairtune/errors.hpp"
#include "fairtune/fisher.hpp"
#include "fairtune/lowrank.hpp"
#include "fairtune/metrics.hpp"
#include "fairtune/model.hpp"

namespace fairtune {

// ============================================================================
// Run configuration
// ============================================================================

enum class Method { TL, F_SVD, OURS, RETRAIN_EO, RETRAIN_DP };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::TL: return "TL";
        case Method::F_SVD: return "f+SVD";
        case Method::OURS: return "OURS";
        case Method::RETRAIN_EO: return "Retrain+EO";
        case Method::RETRAIN_DP: return "Retrain+DP";
    }
    return "TL";
}

inline Method method_from_string(const std::string& s) {
    if (s == "TL") return Method::TL;
    if (s == "f+SVD" || s == "F_SVD" || s == "fsvd") return Method::F_SVD;
    if (s == "OURS" || s == "ours") return Method::OURS;
    if (s == "Retrain+EO" || s == "RETRAIN_EO") return Method::RETRAIN_EO;
    if (s == "Retrain+DP" || s == "RETRAIN_DP") return Method::RETRAIN_DP;
    throw ConfigError("unknown method: " + s);
}

/// Rank choice for the factorized head: an explicit rank wins; otherwise the
/// smallest rank retaining `energy` of the weighted singular energy.
struct RankPolicy {
    std::optional<std::size_t> rank;
    double energy = 0.95;
};

struct RunConfig {
    Method method = Method::TL;
    RankPolicy rank_policy;
    double alpha = 0.5;                   // importance blend, [0.5, 1)
    double regularizer_intensity = 0.0;   // Retrain+EO / Retrain+DP only
    double lr = 0.01;
    std::size_t epochs = 30;
    std::size_t batch = 64;
    std::uint64_t seed = 0;
    FairnessKind pretrain_fairness = FairnessKind::none;
    double pretrain_intensity = 0.0;

    void validate() const {
        if (!(alpha >= 0.5 && alpha < 1.0))
            throw ConfigError("RunConfig: alpha must be in [0.5, 1)");
        if (regularizer_intensity < 0.0 || regularizer_intensity > 1.0)
            throw ConfigError("RunConfig: intensity must be in [0, 1]");
        if (pretrain_intensity < 0.0 || pretrain_intensity > 1.0)
            throw ConfigError("RunConfig: pretrain intensity must be in "
                              "[0, 1]");
        if (!(lr > 0.0)) throw ConfigError("RunConfig: lr must be positive");
        if (batch < 1) throw ConfigError("RunConfig: batch must be >= 1");
    }

    /// The fairness metric this run is constrained on, if any: the fine-tune
    /// regularizer for the Retrain methods, else the pretraining constraint.
    std::optional<FairnessKind> active_constraint() const {
        if (method == Method::RETRAIN_EO) return FairnessKind::eo;
        if (method == Method::RETRAIN_DP) return FairnessKind::dp;
        if (pretrain_fairness != FairnessKind::none) return pretrain_fairness;
        return std::nullopt;
    }
};

struct RunResult {
    RunConfig config;
    FairnessReport pretrain_report;
    FairnessReport finetune_report;
    std::size_t trainable_params = 0;
    std::size_t rank_used = 0;  // 0 for dense-head methods
    double wall_time = 0.0;     // seconds; diagnostic only, never serialized
    std::optional<double> bias_delta;
};

/// post − pre on the constraint's metric (Table 2-style signed change).
inline double bias_delta_report(const FairnessReport& pre,
                                const FairnessReport& post,
                                FairnessKind constraint) {
    return post.bias_for(constraint) - pre.bias_for(constraint);
}

// ============================================================================
// Training loop
// ============================================================================

struct TrainConfig {
    double lr = 0.01;
    std::size_t epochs = 30;
    std::size_t batch = 64;
    LossConfig loss;
    std::uint64_t seed = 0;
};

inline std::size_t trainable_param_count(const NeuralNet& net) {
    std::size_t n = 0;
    for (const auto& l : net.layers)
        if (!l.frozen) n += l.weight.data.size() + l.bias.size();
    return n;
}

/// Seeded minibatch SGD; throws NumericalError when the loss leaves the reals.
inline NeuralNet train_sgd(NeuralNet net, const Dataset& train,
                           const TrainConfig& cfg) {
    if (train.size() == 0) throw InputError("train_sgd: empty training set");
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5u));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size();
             start += cfg.batch) {
            const std::size_t stop =
                std::min(order.size(), start + cfg.batch);
            std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + stop);
            const Dataset batch = detail::take_rows(train, idx, "");
            auto [loss, grads] = loss_and_grad(net, batch, cfg.loss);
            if (!std::isfinite(loss))
                throw NumericalError(
                    "train_sgd: loss diverged at epoch " +
                    std::to_string(epoch));
            net = sgd_step(net, grads, cfg.lr);
        }
    }
    return net;
}

// ============================================================================
// Pretraining
// ============================================================================

struct Arch {
    std::vector<std::size_t> hidden;
    double lr = 0.01;
    std::size_t epochs = 30;
    std::size_t batch = 64;
};

/// Trains a fresh Glorot-initialized MLP, optionally with a fairness
/// relaxation (CE + intensity·R) in the objective.
inline NeuralNet pretrain(const Dataset& train, const Arch& arch,
                          FairnessKind fairness, double intensity,
                          std::uint64_t seed) {
    if (intensity < 0.0 || intensity > 1.0)
        throw ConfigError("pretrain: intensity must be in [0, 1]");
    for (int s : {1, 2})
        if (std::count(train.s.begin(), train.s.end(), s) == 0)
            throw GroupEmptyError("pretrain: group " + std::to_string(s) +
                                  " missing from training data");
    NeuralNet net = build_mlp(train.x.cols, arch.hidden, 2,
                              mix_seed(seed, 0x1417));
    TrainConfig cfg;
    cfg.lr = arch.lr;
    cfg.epochs = arch.epochs;
    cfg.batch = arch.batch;
    cfg.loss = LossConfig{fairness, intensity};
    cfg.seed = seed;
    return train_sgd(std::move(net), train, cfg);
}

// ============================================================================
// Fine-tuning methods
// ============================================================================

namespace detail {

struct FinetuneOutcome {
    NeuralNet net;
    std::size_t rank_used = 0;
};

inline RunResult assemble_result(const NeuralNet& pretrained,
                                 const FinetuneOutcome& out,
                                 const RunConfig& cfg, const Dataset& eval_ds,
                                 const Dataset& pretrain_eval,
                                 double wall_seconds) {
    RunResult r;
    r.config = cfg;
    r.pretrain_report = evaluate(pretrained, pretrain_eval);
    r.finetune_report = evaluate(out.net, eval_ds);
    r.trainable_params = trainable_param_count(out.net);
    r.rank_used = out.rank_used;
    r.wall_time = wall_seconds;
    if (auto constraint = cfg.active_constraint())
        r.bias_delta = bias_delta_report(r.pretrain_report, r.finetune_report,
                                         *constraint);
    return r;
}

inline TrainConfig finetune_train_config(const RunConfig& cfg,
                                         const LossConfig& loss) {
    TrainConfig t;
    t.lr = cfg.lr;
    t.epochs = cfg.epochs;
    t.batch = cfg.batch;
    t.loss = loss;
    t.seed = mix_seed(cfg.seed, 0xF17E);
    return t;
}

// Dense-head fine-tuning shared by TL and the Retrain baselines.
inline FinetuneOutcome finetune_dense_head(const NeuralNet& pretrained,
                                           const Dataset& task_train,
                                           const RunConfig& cfg,
                                           const LossConfig& loss) {
    NeuralNet net = pretrained;
    net.freeze_all_but_last(1);
    net = train_sgd(std::move(net), task_train,
                    finetune_train_config(cfg, loss));
    return {std::move(net), 0};
}

// Factorized-head fine-tuning shared by OURS and f+SVD; the two differ only
// in the importance diagonal fed to the factorization.
inline FinetuneOutcome finetune_factorized(const NeuralNet& pretrained,
                                           const Dataset& task_train,
                                           const RunConfig& cfg,
                                           const FisherDiagonal& imp) {
    const DenseLayer& head = pretrained.head();
    std::size_t r;
    if (cfg.rank_policy.rank) {
        r = *cfg.rank_policy.rank;
    } else {
        r = rank_for_energy(head.weight, imp, cfg.rank_policy.energy);
    }
    const LowRankHead low = weighted_factorize(head.weight, head.bias, imp, r);
    auto [l1, l2] = build_replacement_layers(low);

    NeuralNet net;
    net.layers.assign(pretrained.layers.begin(),
                      pretrained.layers.end() - 1);
    net.layers.push_back(std::move(l1));
    net.layers.push_back(std::move(l2));
    net.freeze_all_but_last(2);
    net.validate();
    net = train_sgd(std::move(net), task_train,
                    finetune_train_config(cfg, LossConfig{}));
    return {std::move(net), r};
}

inline FisherDiagonal identity_importance(std::size_t dim) {
    FisherDiagonal imp;
    imp.dim = dim;
    imp.diag.assign(dim, 1.0);
    return imp;
}

class WallTimer {
  public:
    double seconds() const {
        return std::chrono::duration<double>(
                   std::chrono::steady_clock::now() - start_)
            .count();
    }

  private:
    std::chrono::steady_clock::time_point start_ =
        std::chrono::steady_clock::now();
};

}  // namespace detail

/// Traditional transfer learning: frozen extractor, dense head fine-tuned.
/// `pretrain_eval` is the dataset the pretrained model's bias is measured on
/// (defaults to `task_eval` when null); the tuned model is always measured on
/// `task_eval`.
inline std::pair<NeuralNet, RunResult> finetune_tl(
    const NeuralNet& pretrained, const Dataset& task_train,
    const RunConfig& cfg, const Dataset& task_eval,
    const Dataset* pretrain_eval = nullptr) {
    cfg.validate();
    detail::WallTimer timer;
    auto out = detail::finetune_dense_head(pretrained, task_train, cfg,
                                           LossConfig{});
    RunResult r = detail::assemble_result(
        pretrained, out, cfg, task_eval,
        pretrain_eval ? *pretrain_eval : task_eval, timer.seconds());
    return {std::move(out.net), std::move(r)};
}

/// Unweighted truncated-SVD baseline: identity importance, same rank policy.
inline std::pair<NeuralNet, RunResult> finetune_fsvd(
    const NeuralNet& pretrained, const Dataset& task_train,
    const RunConfig& cfg, const Dataset& task_eval,
    const Dataset* pretrain_eval = nullptr) {
    cfg.validate();
    detail::WallTimer timer;
    auto out = detail::finetune_factorized(
        pretrained, task_train, cfg,
        detail::identity_importance(pretrained.head().in_dim()));
    RunResult r = detail::assemble_result(
        pretrained, out, cfg, task_eval,
        pretrain_eval ? *pretrain_eval : task_eval, timer.seconds());
    return {std::move(out.net), std::move(r)};
}

/// Weight importance neutralization: per-group Fisher on the pretrained net,
/// neutralized (or alpha-blended) importance, weighted factorization, then
/// fine-tuning of the two factor layers.
inline std::pair<NeuralNet, RunResult> finetune_ours(
    const NeuralNet& pretrained, const Dataset& task_train,
    const RunConfig& cfg, const Dataset& task_eval,
    const Dataset* pretrain_eval = nullptr) {
    cfg.validate();
    detail::WallTimer timer;
    const Dataset g1 = group_subset(task_train, 1);
    const Dataset g2 = group_subset(task_train, 2);
    const FisherDiagonal imp1 =
        row_importance(empirical_fisher(pretrained, g1), GroupTag::group1);
    const FisherDiagonal imp2 =
        row_importance(empirical_fisher(pretrained, g2), GroupTag::group2);
    const FisherDiagonal blended = cfg.alpha == 0.5
                                       ? neutralize(imp1, imp2)
                                       : blend(imp1, imp2, cfg.alpha);
    const FisherDiagonal imp = floor_importance(blended);
    auto out = detail::finetune_factorized(pretrained, task_train, cfg, imp);
    RunResult r = detail::assemble_result(
        pretrained, out, cfg, task_eval,
        pretrain_eval ? *pretrain_eval : task_eval, timer.seconds());
    return {std::move(out.net), std::move(r)};
}

/// Dense-head fine-tuning with a fairness regularizer in the objective.
inline std::pair<NeuralNet, RunResult> finetune_retrain_fair(
    const NeuralNet& pretrained, const Dataset& task_train,
    const RunConfig& cfg, const Dataset& task_eval,
    const Dataset* pretrain_eval = nullptr) {
    cfg.validate();
    if (cfg.method != Method::RETRAIN_EO && cfg.method != Method::RETRAIN_DP)
        throw ConfigError("finetune_retrain_fair: method must be Retrain+EO "
                          "or Retrain+DP");
    detail::WallTimer timer;
    const FairnessKind kind = cfg.method == Method::RETRAIN_EO
                                  ? FairnessKind::eo
                                  : FairnessKind::dp;
    auto out = detail::finetune_dense_head(
        pretrained, task_train, cfg,
        LossConfig{kind, cfg.regularizer_intensity});
    RunResult r = detail::assemble_result(
        pretrained, out, cfg, task_eval,
        pretrain_eval ? *pretrain_eval : task_eval, timer.seconds());
    return {std::move(out.net), std::move(r)};
}

/// Dispatch on cfg.method.
inline std::pair<NeuralNet, RunResult> finetune(
    const NeuralNet& pretrained, const Dataset& task_train,
    const RunConfig& cfg, const Dataset& task_eval,
    const Dataset* pretrain_eval = nullptr) {
    switch (cfg.method) {
        case Method::TL:
            return finetune_tl(pretrained, task_train, cfg, task_eval,
                               pretrain_eval);
        case Method::F_SVD:
            return finetune_fsvd(pretrained, task_train, cfg, task_eval,
                                 pretrain_eval);
        case Method::OURS:
            return finetune_ours(pretrained, task_train, cfg, task_eval,
                                 pretrain_eval);
        case Method::RETRAIN_EO:
        case Method::RETRAIN_DP:
            return finetune_retrain_fair(pretrained, task_train, cfg,
                                         task_eval, pretrain_eval);
    }
    throw ConfigError("finetune: unknown method");
}

}  // namespace fairtune
