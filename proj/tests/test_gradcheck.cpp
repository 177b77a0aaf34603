#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "gci/diffops.hpp"
#include "gci/errors.hpp"
#include "gci/gradcheck.hpp"

using namespace gci;

namespace {

DiffOp square_op() {
    DiffOp op;
    op.name = "square";
    op.param_names = {"w"};
    op.forward = [](const std::vector<Tensor>& p) { return p[0][0] * p[0][0]; };
    op.backward = [](const std::vector<Tensor>& p) {
        Tensor g({1});
        g[0] = 2.0 * p[0][0];
        return std::vector<Tensor>{g};
    };
    return op;
}

}  // namespace

TEST_CASE("finite differences recover the derivative of w^2 exactly") {
    Tensor w({1});
    w[0] = 3.0;
    GradReport rep = finite_diff_check(square_op(), {w}, 1e-5, 1e-6);
    CHECK(rep.pass);
    // Central differences are exact for quadratics up to rounding.
    CHECK(rep.max_abs_err[0] < 1e-9);
    CHECK(rep.op_name == "square");
}

TEST_CASE("a constant objective has zero gradient and passes") {
    DiffOp op;
    op.name = "constant";
    op.param_names = {"w"};
    op.forward = [](const std::vector<Tensor>&) { return 4.25; };
    op.backward = [](const std::vector<Tensor>& p) {
        return std::vector<Tensor>{Tensor::zeros(p[0].shape())};
    };
    Tensor w({3});
    w[0] = 1.0;
    w[1] = -2.0;
    w[2] = 0.5;
    GradReport rep = finite_diff_check(op, {w}, 1e-5, 1e-6);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err[0] == 0.0);
}

TEST_CASE("eps outside the supported bracket is rejected") {
    Tensor w({1});
    w[0] = 1.0;
    CHECK_THROWS_AS(finite_diff_check(square_op(), {w}, 1e-8, 1e-4), std::invalid_argument);
    CHECK_THROWS_AS(finite_diff_check(square_op(), {w}, 1e-3, 1e-4), std::invalid_argument);
    CHECK_NOTHROW(finite_diff_check(square_op(), {w}, 1e-7, 1e-4));
    CHECK_NOTHROW(finite_diff_check(square_op(), {w}, 1e-4, 1e-4));
}

TEST_CASE("a sign-flipped backward is detected") {
    DiffOp op = square_op();
    op.backward = [](const std::vector<Tensor>& p) {
        Tensor g({1});
        g[0] = -2.0 * p[0][0];
        return std::vector<Tensor>{g};
    };
    Tensor w({1});
    w[0] = 3.0;
    GradReport rep = finite_diff_check(op, {w}, 1e-5, 1e-4);
    CHECK_FALSE(rep.pass);
    CHECK(rep.summary_line().find("FAIL") != std::string::npos);
}

TEST_CASE("a non-finite forward names the offending parameter and coordinate") {
    DiffOp op;
    op.name = "explodes";
    op.param_names = {"w"};
    op.forward = [](const std::vector<Tensor>& p) {
        return p[0][1] > 2.0 ? std::numeric_limits<double>::infinity() : p[0][1];
    };
    op.backward = [](const std::vector<Tensor>& p) {
        Tensor g = Tensor::zeros(p[0].shape());
        g[1] = 1.0;
        return std::vector<Tensor>{g};
    };
    Tensor w({3});
    w[1] = 2.0;  // the +eps probe crosses into the non-finite region
    CHECK_THROWS_WITH_AS(finite_diff_check(op, {w}, 1e-5, 1e-4),
                         doctest::Contains("coordinate 1"), NumericError);
}

TEST_CASE("gradient shape mismatches are rejected") {
    DiffOp op = square_op();
    op.backward = [](const std::vector<Tensor>&) {
        return std::vector<Tensor>{Tensor::zeros({2})};
    };
    Tensor w({1});
    w[0] = 1.0;
    CHECK_THROWS_WITH_AS(finite_diff_check(op, {w}, 1e-5, 1e-4), doctest::Contains("shape"),
                         std::invalid_argument);
}

TEST_CASE("summary lines carry op name, verdict, and eps") {
    Tensor w({1});
    w[0] = 2.0;
    GradReport rep = finite_diff_check(square_op(), {w}, 1e-5, 1e-4);
    const std::string line = rep.summary_line();
    CHECK(line.find("square") != std::string::npos);
    CHECK(line.find("PASS") != std::string::npos);
    CHECK(line.find("eps=1.0e-05") != std::string::npos);
}

TEST_CASE("the registered op suite passes finite differences on three seeds") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        for (auto& reg : standard_diffops(seed)) {
            GradReport rep = finite_diff_check(reg.op, reg.params, 1e-5, 1e-4);
            INFO(rep.summary_line());
            CHECK(rep.pass);
        }
    }
}

TEST_CASE("the registry covers every differentiable building block") {
    auto ops = standard_diffops(1);
    std::vector<std::string> names;
    for (auto& reg : ops) names.push_back(reg.op.name);
    for (const char* expected :
         {"conv2d", "global_avg_pool", "affinity", "assemble_kernel", "nuclear_norm",
          "counterfactual_ce", "triplet_loss", "total_loss"}) {
        CHECK(std::find(names.begin(), names.end(), expected) != names.end());
    }
}
