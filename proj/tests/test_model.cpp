#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fairtune/model.hpp"

using namespace fairtune;

namespace {

Dataset toy_batch(std::size_t n, std::size_t d, std::uint64_t seed,
                  double separation = 0.0) {
    Rng rng(seed);
    Dataset ds;
    ds.x = Matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = i % 2 == 0 ? +1 : -1;
        ds.y.push_back(y);
        ds.s.push_back(rng.uniform() < 0.5 ? 1 : 2);
        for (std::size_t j = 0; j < d; ++j)
            ds.x(i, j) = rng.normal() + separation * y;
    }
    return ds;
}

// Central finite difference of the total loss w.r.t. one parameter.
double fd_grad(NeuralNet net, const Dataset& batch, const LossConfig& cfg,
               std::size_t layer, bool is_bias, std::size_t idx) {
    const double eps = 1e-5;
    double* p = is_bias ? &net.layers[layer].bias[idx]
                        : &net.layers[layer].weight.data[idx];
    const double orig = *p;
    *p = orig + eps;
    const double up = loss_and_grad(net, batch, cfg).first;
    *p = orig - eps;
    const double down = loss_and_grad(net, batch, cfg).first;
    *p = orig;
    return (up - down) / (2.0 * eps);
}

void check_grads_vs_fd(const NeuralNet& net, const Dataset& batch,
                       const LossConfig& cfg) {
    const auto [loss, grads] = loss_and_grad(net, batch, cfg);
    (void)loss;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        if (net.layers[li].frozen) continue;
        for (std::size_t e = 0; e < net.layers[li].weight.data.size(); ++e) {
            const double fd = fd_grad(net, batch, cfg, li, false, e);
            const double an = grads.weight[li].data[e];
            REQUIRE(std::abs(an - fd) <=
                    1e-4 * std::max({std::abs(an), std::abs(fd), 1e-4}));
        }
        for (std::size_t e = 0; e < net.layers[li].bias.size(); ++e) {
            const double fd = fd_grad(net, batch, cfg, li, true, e);
            const double an = grads.bias[li][e];
            REQUIRE(std::abs(an - fd) <=
                    1e-4 * std::max({std::abs(an), std::abs(fd), 1e-4}));
        }
    }
}

}  // namespace

TEST_CASE("forward basics") {
    // single identity layer, zero bias, identity weights: logits == x
    NeuralNet net;
    DenseLayer l;
    l.weight = Matrix::identity(3);
    l.bias.assign(3, 0.0);
    net.layers.push_back(l);
    Matrix x(2, 3);
    x.data = {1, 2, 3, 4, 5, 6};
    auto fr = forward(net, x);
    REQUIRE(fr.logits.data == x.data);
    REQUIRE(fr.representation.data == x.data);
}

TEST_CASE("forward hand-computed two-layer case") {
    NeuralNet net;
    DenseLayer l1;
    l1.weight = Matrix::identity(2);
    l1.bias = {0.5, -0.5};
    l1.activation = Activation::relu;
    DenseLayer l2;
    l2.weight = Matrix(2, 2);
    l2.weight.data = {1, 2, 3, 4};
    l2.bias = {0.1, 0.2};
    net.layers = {l1, l2};

    Matrix x(1, 2);
    x.data = {1.0, -2.0};
    // z1 = [1.5, -2.5] -> relu -> [1.5, 0]
    // logits = [1.5·1 + 0·3 + 0.1, 1.5·2 + 0·4 + 0.2] = [1.6, 3.2]
    auto fr = forward(net, x);
    REQUIRE(fr.logits(0, 0) == Catch::Approx(1.6).margin(1e-12));
    REQUIRE(fr.logits(0, 1) == Catch::Approx(3.2).margin(1e-12));
    REQUIRE(fr.representation(0, 0) == Catch::Approx(1.5).margin(1e-12));
    REQUIRE(fr.representation(0, 1) == 0.0);
}

TEST_CASE("forward shape contracts") {
    auto net = build_mlp(5, {8, 4}, 2, 42);
    Matrix x(7, 5);
    Rng rng(1);
    for (double& v : x.data) v = rng.normal();
    auto fr = forward(net, x);
    REQUIRE(fr.logits.rows == 7);
    REQUIRE(fr.logits.cols == 2);
    REQUIRE(fr.representation.cols == net.head().in_dim());

    Matrix bad(3, 4);
    REQUIRE_THROWS_AS(forward(net, bad), ShapeError);
}

TEST_CASE("build_mlp Glorot bounds and determinism") {
    auto a = build_mlp(6, {8}, 2, 9);
    auto b = build_mlp(6, {8}, 2, 9);
    REQUIRE(a.layers[0].weight.data == b.layers[0].weight.data);
    REQUIRE(a.layers[1].weight.data == b.layers[1].weight.data);
    const double bound0 = std::sqrt(6.0 / (6 + 8));
    for (double w : a.layers[0].weight.data) {
        REQUIRE(w >= -bound0);
        REQUIRE(w <= bound0);
    }
    auto c = build_mlp(6, {8}, 2, 10);
    REQUIRE(a.layers[0].weight.data != c.layers[0].weight.data);
}

TEST_CASE("loss saturates on perfectly separated logits") {
    NeuralNet net;
    DenseLayer l;
    l.weight = Matrix(1, 2);
    l.weight.data = {-20.0, 20.0};  // x=+1 -> logits (-20, 20)
    l.bias = {0.0, 0.0};
    net.layers.push_back(l);

    Dataset ds;
    ds.x = Matrix(2, 1);
    ds.x.data = {1.0, -1.0};
    ds.y = {+1, -1};
    ds.s = {1, 2};
    const auto [loss, grads] = loss_and_grad(net, ds);
    (void)grads;
    REQUIRE(loss < 1e-6);
}

TEST_CASE("gradients match finite differences on a 3-layer net") {
    auto net = build_mlp(4, {6, 5}, 2, 77);
    auto batch = toy_batch(16, 4, 5);
    check_grads_vs_fd(net, batch, LossConfig{});
}

TEST_CASE("gradients match finite differences on random small nets") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        auto net = build_mlp(3, {static_cast<std::size_t>(2 + seed % 7)}, 2,
                             seed);
        auto batch = toy_batch(10, 3, seed * 31);
        check_grads_vs_fd(net, batch, LossConfig{});
    }
}

TEST_CASE("fairness relaxation gradients match finite differences") {
    auto net = build_mlp(3, {4}, 2, 21);
    auto batch = toy_batch(20, 3, 8, 0.8);
    // bias the groups so the DP/EO gaps sit away from the |·| kink
    for (std::size_t i = 0; i < batch.size(); ++i)
        batch.s[i] = batch.y[i] > 0 ? (i % 4 == 0 ? 2 : 1)
                                    : (i % 4 == 0 ? 1 : 2);
    check_grads_vs_fd(net, batch, LossConfig{FairnessKind::dp, 0.5});
    check_grads_vs_fd(net, batch, LossConfig{FairnessKind::eo, 0.5});
}

TEST_CASE("fairness term raises the loss when groups diverge") {
    auto net = build_mlp(3, {4}, 2, 21);
    auto batch = toy_batch(20, 3, 8, 0.8);
    for (std::size_t i = 0; i < batch.size(); ++i)
        batch.s[i] = batch.y[i] > 0 ? 1 : 2;
    const double plain = loss_and_grad(net, batch).first;
    const double dp =
        loss_and_grad(net, batch, LossConfig{FairnessKind::dp, 0.5}).first;
    REQUIRE(dp > plain);
    const double off =
        loss_and_grad(net, batch, LossConfig{FairnessKind::dp, 0.0}).first;
    REQUIRE(off == plain);
}

TEST_CASE("loss_and_grad error paths and freezing") {
    auto net = build_mlp(3, {4}, 2, 3);
    Dataset empty;
    empty.x = Matrix(0, 3);
    REQUIRE_THROWS_AS(loss_and_grad(net, empty), InputError);

    auto bad = toy_batch(4, 3, 1);
    bad.y[2] = 0;
    REQUIRE_THROWS_AS(loss_and_grad(net, bad), InputError);

    auto batch = toy_batch(8, 3, 2);
    for (auto& l : net.layers) l.frozen = true;
    const auto [loss, grads] = loss_and_grad(net, batch);
    (void)loss;
    for (const auto& gw : grads.weight)
        for (double v : gw.data) REQUIRE(v == 0.0);
    for (const auto& gb : grads.bias)
        for (double v : gb) REQUIRE(v == 0.0);
}

TEST_CASE("sgd_step semantics") {
    auto net = build_mlp(3, {4}, 2, 3);
    auto batch = toy_batch(8, 3, 2);
    const auto [loss, grads] = loss_and_grad(net, batch);
    (void)loss;

    auto same = sgd_step(net, grads, 0.0);
    for (std::size_t li = 0; li < net.layers.size(); ++li)
        REQUIRE(same.layers[li].weight.data == net.layers[li].weight.data);

    // scalar case: w' = w − lr·g exactly
    NeuralNet tiny;
    DenseLayer l;
    l.weight = Matrix(1, 2);
    l.weight.data = {2.0, -1.0};
    l.bias = {0.25, 0.0};
    tiny.layers.push_back(l);
    GradientSet g = GradientSet::zeros_like(tiny);
    g.weight[0].data = {0.5, 1.0};
    g.bias[0] = {1.0, -2.0};
    auto stepped = sgd_step(tiny, g, 0.1);
    REQUIRE(stepped.layers[0].weight.data[0] == 2.0 - 0.1 * 0.5);
    REQUIRE(stepped.layers[0].weight.data[1] == -1.0 - 0.1 * 1.0);
    REQUIRE(stepped.layers[0].bias[0] == 0.25 - 0.1 * 1.0);

    REQUIRE_THROWS_AS(sgd_step(net, grads, -0.1), InputError);
}

TEST_CASE("training on separable data decreases loss over windows") {
    auto batch = toy_batch(60, 2, 4, 2.0);
    auto net = build_mlp(2, {}, 2, 17);
    std::vector<double> losses;
    for (int step = 0; step < 200; ++step) {
        auto [loss, grads] = loss_and_grad(net, batch);
        losses.push_back(loss);
        net = sgd_step(net, grads, 0.5);
    }
    for (std::size_t t = 0; t + 50 < losses.size(); ++t)
        REQUIRE(losses[t + 50] < losses[t]);
}

TEST_CASE("frozen layers are bit-identical after training") {
    auto net = build_mlp(3, {5, 4}, 2, 23);
    net.freeze_all_but_last(1);
    const auto w0 = net.layers[0].weight.data;
    const auto b0 = net.layers[0].bias;
    const auto w1 = net.layers[1].weight.data;
    auto batch = toy_batch(32, 3, 7);
    for (int step = 0; step < 50; ++step) {
        auto [loss, grads] = loss_and_grad(net, batch);
        (void)loss;
        net = sgd_step(net, grads, 0.05);
    }
    REQUIRE(net.layers[0].weight.data == w0);
    REQUIRE(net.layers[0].bias == b0);
    REQUIRE(net.layers[1].weight.data == w1);
    REQUIRE(net.layers[2].weight.data != std::vector<double>(
                                             net.layers[2].weight.data.size(),
                                             0.0));
}

TEST_CASE("training is deterministic") {
    auto batch = toy_batch(32, 3, 7);
    auto run = [&] {
        auto net = build_mlp(3, {4}, 2, 55);
        for (int step = 0; step < 40; ++step) {
            auto [loss, grads] = loss_and_grad(net, batch);
            (void)loss;
            net = sgd_step(net, grads, 0.05);
        }
        return net;
    };
    auto a = run();
    auto b = run();
    for (std::size_t li = 0; li < a.layers.size(); ++li) {
        REQUIRE(a.layers[li].weight.data == b.layers[li].weight.data);
        REQUIRE(a.layers[li].bias == b.layers[li].bias);
    }
}

TEST_CASE("per_sample_grad_final_layer") {
    auto net = build_mlp(3, {4}, 2, 31);

    // batch-of-one equivalence against loss_and_grad
    auto one = toy_batch(1, 3, 9);
    const auto [loss, grads] = loss_and_grad(net, one);
    (void)loss;
    Matrix row(1, 3);
    for (std::size_t j = 0; j < 3; ++j) row(0, j) = one.x(0, j);
    const auto [gw, gb] = per_sample_grad_final_layer(net, row, one.y[0]);
    const std::size_t head = net.layers.size() - 1;
    for (std::size_t e = 0; e < gw.data.size(); ++e)
        REQUIRE(gw.data[e] == Catch::Approx(grads.weight[head].data[e])
                                  .margin(1e-12));
    for (std::size_t j = 0; j < 2; ++j)
        REQUIRE(gb[j] == Catch::Approx(grads.bias[head][j]).margin(1e-12));

    // closed form against a by-hand softmax on a 2-feature single layer
    NeuralNet lin;
    DenseLayer l;
    l.weight = Matrix(2, 2);
    l.weight.data = {0.3, -0.2, 0.1, 0.4};
    l.bias = {0.05, -0.05};
    lin.layers.push_back(l);
    Matrix x(1, 2);
    x.data = {1.0, 2.0};
    // logits = [0.3+0.2+0.05, -0.2+0.8-0.05] = [0.55, 0.55]
    const auto [gw2, gb2] = per_sample_grad_final_layer(lin, x, +1);
    const double p = 0.5;  // equal logits
    REQUIRE(gb2[0] == Catch::Approx(p).margin(1e-12));
    REQUIRE(gb2[1] == Catch::Approx(p - 1.0).margin(1e-12));
    REQUIRE(gw2(1, 0) == Catch::Approx(2.0 * p).margin(1e-12));
    REQUIRE(gw2(1, 1) == Catch::Approx(2.0 * (p - 1.0)).margin(1e-12));

    // zero input: zero weight gradient, nonzero bias gradient
    Matrix zero(1, 2);
    const auto [gw3, gb3] = per_sample_grad_final_layer(lin, zero, +1);
    for (double v : gw3.data) REQUIRE(v == 0.0);
    REQUIRE(std::abs(gb3[0]) > 0.1);
}

TEST_CASE("checkpoint round-trip") {
    auto net = build_mlp(4, {5}, 2, 61);
    net.layers[0].frozen = true;
    const auto path = (std::filesystem::temp_directory_path() /
                       "fairtune_ckpt_test.json")
                          .string();
    save_checkpoint(net, path);
    auto back = load_checkpoint(path);
    REQUIRE(back.layers.size() == net.layers.size());
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        REQUIRE(back.layers[li].weight.data == net.layers[li].weight.data);
        REQUIRE(back.layers[li].bias == net.layers[li].bias);
        REQUIRE(back.layers[li].frozen == net.layers[li].frozen);
        REQUIRE(back.layers[li].activation == net.layers[li].activation);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint error paths") {
    REQUIRE_THROWS_AS(load_checkpoint("/nonexistent/ckpt.json"), FileError);

    const auto dir = std::filesystem::temp_directory_path();
    const auto bad_version = (dir / "fairtune_ckpt_badver.json").string();
    {
        std::ofstream out(bad_version);
        out << R"({"format_version": 99, "layers": []})";
    }
    REQUIRE_THROWS_AS(load_checkpoint(bad_version), ConfigError);
    std::remove(bad_version.c_str());

    const auto not_json = (dir / "fairtune_ckpt_notjson.json").string();
    {
        std::ofstream out(not_json);
        out << "definitely not json";
    }
    REQUIRE_THROWS_AS(load_checkpoint(not_json), FileError);
    std::remove(not_json.c_str());
}
