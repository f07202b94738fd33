#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "fairtune/data.hpp"

using namespace fairtune;

namespace {

struct TempCsv {
    std::string path;
    explicit TempCsv(const std::string& contents) {
        static int counter = 0;
        path = (std::filesystem::temp_directory_path() /
                ("fairtune_test_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter++) + ".csv"))
                   .string();
        std::ofstream out(path);
        out << contents;
    }
    ~TempCsv() { std::remove(path.c_str()); }
};

double pearson(const std::vector<int>& a, const std::vector<int>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    return cov / std::sqrt(va * vb);
}

ColumnSchema toy_schema() {
    ColumnSchema sc;
    sc.label_column = "outcome";
    sc.label_positive = "yes";
    sc.label_negative = "no";
    sc.sensitive_column = "grp";
    sc.sensitive_privileged = "a";
    sc.sensitive_protected = "b";
    sc.categorical_columns = {"color"};
    sc.numeric_columns = {"score"};
    return sc;
}

}  // namespace

TEST_CASE("load_csv one-hot and numeric column layout") {
    TempCsv csv(
        "color,score,grp,outcome\n"
        "red,1.0,a,yes\n"
        "blue,2.0,b,no\n"
        "red,3.0,a,yes\n");
    auto ds = load_csv(csv.path, toy_schema());
    REQUIRE(ds.size() == 3);
    REQUIRE(ds.x.cols == 3);  // 2 one-hot levels + 1 numeric
    REQUIRE(ds.y == std::vector<int>{1, -1, 1});
    REQUIRE(ds.s == std::vector<int>{1, 2, 1});
}

TEST_CASE("load_csv standardizes columns") {
    TempCsv csv(
        "color,score,grp,outcome\n"
        "red,1.0,a,yes\n"
        "blue,2.0,b,no\n"
        "red,3.0,a,yes\n"
        "blue,6.0,b,no\n");
    ColumnSchema sc = toy_schema();
    auto ds = load_csv(csv.path, sc);
    for (std::size_t j = 0; j < ds.x.cols; ++j) {
        double mean = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) mean += ds.x(i, j);
        mean /= static_cast<double>(ds.size());
        REQUIRE(std::abs(mean) < 1e-6);
    }
    // hand-standardized oracle for the numeric column (values 1,2,3,6):
    // mean 3, population std sqrt((4+1+0+9)/4) = sqrt(3.5)
    const double sd = std::sqrt(3.5);
    REQUIRE(ds.x(0, 2) == Catch::Approx((1.0 - 3.0) / sd).margin(1e-12));
    REQUIRE(ds.x(3, 2) == Catch::Approx((6.0 - 3.0) / sd).margin(1e-12));
}

TEST_CASE("load_csv embedding mode passthrough") {
    // all-numeric file, no categoricals
    TempCsv csv(
        "e0,e1,grp,outcome\n"
        "0.5,2.0,a,yes\n"
        "1.5,4.0,b,no\n"
        "2.5,6.0,a,no\n"
        "3.5,8.0,b,yes\n");
    ColumnSchema sc;
    sc.label_column = "outcome";
    sc.label_positive = "yes";
    sc.label_negative = "no";
    sc.sensitive_column = "grp";
    sc.sensitive_privileged = "a";
    sc.sensitive_protected = "b";
    sc.numeric_columns = {"e0", "e1"};
    auto ds = load_csv(csv.path, sc);
    REQUIRE(ds.x.cols == 2);
    // column e0: mean 2, population std sqrt(1.25); hand-computed entries
    const double sd0 = std::sqrt(1.25);
    REQUIRE(ds.x(0, 0) == Catch::Approx(-1.5 / sd0).margin(1e-12));
    REQUIRE(ds.x(2, 0) == Catch::Approx(0.5 / sd0).margin(1e-12));
}

TEST_CASE("load_csv error paths") {
    TempCsv csv(
        "color,score,grp,outcome\n"
        "red,1.0,a,maybe\n");
    REQUIRE_THROWS_WITH(load_csv(csv.path, toy_schema()),
                        Catch::Matchers::ContainsSubstring("row 2"));

    ColumnSchema missing_col = toy_schema();
    missing_col.label_column = "absent";
    TempCsv csv2("color,score,grp,outcome\nred,1.0,a,yes\n");
    REQUIRE_THROWS_AS(load_csv(csv2.path, missing_col), DataError);

    REQUIRE_THROWS_AS(load_csv("/nonexistent/file.csv", toy_schema()),
                      FileError);
}

TEST_CASE("load_csv drops rows with missing values") {
    TempCsv csv(
        "color,score,grp,outcome\n"
        "red,1.0,a,yes\n"
        "?,2.0,b,no\n"
        "blue,2.5,b,no\n"
        "red,?,a,yes\n");
    auto ds = load_csv(csv.path, toy_schema());
    REQUIRE(ds.size() == 2);
}

TEST_CASE("load_csv is deterministic") {
    TempCsv csv(
        "color,score,grp,outcome\n"
        "red,1.25,a,yes\n"
        "blue,-2.0,b,no\n"
        "green,3.5,a,no\n"
        "red,0.75,b,yes\n");
    auto d1 = load_csv(csv.path, toy_schema());
    auto d2 = load_csv(csv.path, toy_schema());
    REQUIRE(d1.x.data == d2.x.data);
    REQUIRE(d1.y == d2.y);
    REQUIRE(d1.s == d2.s);
}

TEST_CASE("synth_biased correlation levels") {
    auto ds0 = synth_biased(5000, 10, 0.0, 7);
    REQUIRE(std::abs(pearson(ds0.s, ds0.y)) < 0.1);

    auto ds6 = synth_biased(5000, 10, 0.6, 7);
    REQUIRE(pearson(ds6.s, ds6.y) == Catch::Approx(0.6).margin(0.08));
}

TEST_CASE("synth_biased determinism and balance") {
    auto a = synth_biased(200, 6, 0.4, 99);
    auto b = synth_biased(200, 6, 0.4, 99);
    REQUIRE(a.x.data == b.x.data);
    REQUIRE(a.y == b.y);
    REQUIRE(a.s == b.s);

    auto big = synth_biased(5000, 10, 0.6, 3);
    double pos = 0;
    for (int v : big.y) pos += v > 0 ? 1 : 0;
    pos /= static_cast<double>(big.size());
    REQUIRE(pos > 0.3);
    REQUIRE(pos < 0.7);
}

TEST_CASE("synth_biased rejects invalid parameters") {
    REQUIRE_THROWS_AS(synth_biased(10, 5, 0.5, 0), InputError);
    REQUIRE_THROWS_AS(synth_biased(100, 1, 0.5, 0), InputError);
    REQUIRE_THROWS_AS(synth_biased(100, 5, 1.5, 0), InputError);
}

TEST_CASE("split sizes and stratification") {
    // 4 strata of 25 rows each -> exact 60/20/20
    Dataset ds;
    ds.x = Matrix(100, 2);
    for (std::size_t i = 0; i < 100; ++i) {
        ds.x(i, 0) = static_cast<double>(i);  // unique marker per row
        ds.x(i, 1) = static_cast<double>(i % 7);
        ds.y.push_back(i % 2 == 0 ? +1 : -1);
        ds.s.push_back(i % 4 < 2 ? 1 : 2);
    }
    auto sp = split(ds, SplitSpec{0.6, 0.2, 0.2, 5});
    REQUIRE(sp.train.size() == 60);
    REQUIRE(sp.validation.size() == 20);
    REQUIRE(sp.test.size() == 20);

    // disjoint and exhaustive: the unique marker column survives
    // standardization as a strictly monotone map, so values stay distinct
    std::set<double> seen;
    for (const Dataset* d : {&sp.train, &sp.validation, &sp.test})
        for (std::size_t i = 0; i < d->size(); ++i) seen.insert(d->x(i, 0));
    REQUIRE(seen.size() == 100);

    // group proportions within 2% of the parent's
    for (const Dataset* d : {&sp.train, &sp.validation, &sp.test}) {
        double g1 = 0;
        for (int v : d->s) g1 += v == 1 ? 1 : 0;
        REQUIRE(g1 / static_cast<double>(d->size()) ==
                Catch::Approx(0.5).margin(0.02));
    }
}

TEST_CASE("split standardizes with training statistics") {
    auto ds = synth_biased(1000, 6, 0.3, 11);
    auto sp = split(ds, SplitSpec{0.6, 0.2, 0.2, 1});
    const auto st = column_stats(sp.train.x);
    for (std::size_t j = 0; j < sp.train.x.cols; ++j) {
        REQUIRE(std::abs(st.mean[j]) < 1e-6);
        REQUIRE(st.stddev[j] == Catch::Approx(1.0).margin(0.01));
    }
}

TEST_CASE("split determinism and error paths") {
    auto ds = synth_biased(500, 4, 0.2, 2);
    auto a = split(ds, SplitSpec{0.5, 0.25, 0.25, 9});
    auto b = split(ds, SplitSpec{0.5, 0.25, 0.25, 9});
    REQUIRE(a.train.x.data == b.train.x.data);
    REQUIRE(a.test.y == b.test.y);

    REQUIRE_THROWS_AS(split(ds, SplitSpec{0.5, 0.2, 0.2, 0}), InputError);

    // one lone protected-group row cannot reach every split
    Dataset tiny;
    tiny.x = Matrix(50, 2);
    for (std::size_t i = 0; i < 50; ++i) {
        tiny.x(i, 0) = static_cast<double>(i);
        tiny.y.push_back(i % 2 ? 1 : -1);
        tiny.s.push_back(i == 0 ? 2 : 1);
    }
    REQUIRE_THROWS_AS(split(tiny, SplitSpec{0.6, 0.2, 0.2, 0}),
                      StratificationError);
}

TEST_CASE("group_subset") {
    auto ds = synth_biased(300, 5, 0.5, 13);
    auto g1 = group_subset(ds, 1);
    auto g2 = group_subset(ds, 2);
    REQUIRE(g1.size() + g2.size() == ds.size());

    // counts match a linear scan
    std::size_t scan = 0;
    for (int v : ds.s) scan += v == 1 ? 1 : 0;
    REQUIRE(g1.size() == scan);

    // subset of subset with same s is identity
    auto g11 = group_subset(g1, 1);
    REQUIRE(g11.x.data == g1.x.data);
    REQUIRE(g11.y == g1.y);

    REQUIRE_THROWS_AS(group_subset(g1, 2), GroupEmptyError);
    REQUIRE_THROWS_AS(group_subset(ds, 3), InputError);
}

TEST_CASE("partition splits by fraction and keeps groups") {
    auto ds = synth_biased(1000, 5, 0.4, 21);
    auto [a, b] = partition(ds, 0.6, 3);
    REQUIRE(a.size() + b.size() == ds.size());
    REQUIRE(a.size() == Catch::Approx(600).margin(4));
    REQUIRE_THROWS_AS(partition(ds, 0.0, 1), InputError);
}
