#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "d2s/rng.hpp"
#include "d2s/tensor.hpp"

using namespace d2s;
using ad::Var;

namespace {

std::vector<double> random_values(Rng &rng, int n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (double &x : v) x = rng.uniform(lo, hi);
    return v;
}

void zero_grads(const std::vector<Var<double>> &params) {
    for (const auto &p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

// Runs forward(+backward) once, then compares analytic grads against central
// differences.
double check_gradients(const std::function<double(bool)> &eval,
                       const std::vector<Var<double>> &params) {
    zero_grads(params);
    eval(true);
    return ad::gradient_check([&] { return eval(false); }, params);
}

}  // namespace

TEST_CASE("matmul matches a hand-computed product") {
    ad::Tape<double> t;
    auto a = ad::make_const<double>(2, 3, {1, 2, 3, 4, 5, 6});
    auto b = ad::make_const<double>(3, 2, {7, 8, 9, 10, 11, 12});
    auto c = t.matmul(a, b);
    CHECK((*c->val) == ad::Buffer<double>{58, 64, 139, 154});
}

TEST_CASE("matmul_nt equals matmul against the explicit transpose") {
    Rng rng(7);
    ad::Tape<double> t;
    auto a = ad::make_const<double>(4, 5, random_values(rng, 20));
    std::vector<double> bv = random_values(rng, 15);
    auto b = ad::make_const<double>(3, 5, bv);
    std::vector<double> btv(15);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j) btv[j * 3 + i] = bv[i * 5 + j];
    auto bt = ad::make_const<double>(5, 3, btv);
    auto x = t.matmul_nt(a, b);
    auto y = t.matmul(a, bt);
    for (int i = 0; i < x->size(); ++i)
        CHECK((*x->val)[i] == doctest::Approx((*y->val)[i]).epsilon(1e-14));
}

TEST_CASE("shape mismatches throw") {
    ad::Tape<double> t;
    auto a = ad::make_const<double>(2, 3, std::vector<double>(6, 1.0));
    auto b = ad::make_const<double>(2, 3, std::vector<double>(6, 1.0));
    CHECK_THROWS_AS(t.matmul(a, b), ShapeMismatch);
    auto c = ad::make_const<double>(3, 3, std::vector<double>(9, 1.0));
    CHECK_THROWS_AS(t.add(a, c), ShapeMismatch);
    CHECK_THROWS_AS(t.sub(a, c), ShapeMismatch);
    CHECK_THROWS_AS(t.concat_cols(a, c), ShapeMismatch);
    CHECK_THROWS_AS(t.slice_cols(a, 2, 2), ShapeMismatch);
    CHECK_THROWS_AS(t.slice_cols(a, 0, 4), ShapeMismatch);
}

TEST_CASE("backward rejects non-scalar losses") {
    ad::Tape<double> t;
    auto a = ad::make_param<double>(2, 2, {1, 2, 3, 4});
    auto b = t.square(a);
    CHECK_THROWS_AS(t.backward(b), NonScalarLoss);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
    Rng rng(8);
    ad::Tape<double> t;
    std::vector<double> av = random_values(rng, 12, -5.0, 5.0);
    auto a = ad::make_const<double>(3, 4, av);
    auto s = t.softmax_rows(a);
    for (int i = 0; i < 3; ++i) {
        double row = 0.0;
        for (int j = 0; j < 4; ++j) row += (*s->val)[i * 4 + j];
        CHECK(row == doctest::Approx(1.0).epsilon(1e-14));
    }
    std::vector<double> shifted = av;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) shifted[i * 4 + j] += 100.0 + i;
    auto s2 = t.softmax_rows(ad::make_const<double>(3, 4, shifted));
    for (int i = 0; i < 12; ++i)
        CHECK((*s2->val)[i] == doctest::Approx((*s->val)[i]).epsilon(1e-12));
}

TEST_CASE("relu gradient is zero at the origin") {
    ad::Tape<double> t;
    auto a = ad::make_param<double>(1, 3, {-1.0, 0.0, 2.0});
    auto loss = t.sum(t.relu(a));
    t.backward(loss);
    CHECK(a->grad == ad::Buffer<double>{0.0, 0.0, 1.0});
}

TEST_CASE("abs_smooth approaches |x| and equals delta at zero") {
    ad::Tape<double> t;
    double delta = 1e-12;
    auto a = ad::make_const<double>(1, 3, {-2.0, 0.0, 3.0});
    auto y = t.abs_smooth(a, delta);
    CHECK((*y->val)[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK((*y->val)[1] == doctest::Approx(delta).epsilon(1e-12));
    CHECK((*y->val)[2] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("broadcast add and mul forward values") {
    ad::Tape<double> t;
    auto a = ad::make_const<double>(2, 3, {1, 2, 3, 4, 5, 6});
    auto row = ad::make_const<double>(1, 3, {10, 20, 30});
    auto s = t.add(a, row);
    CHECK((*s->val) == ad::Buffer<double>{11, 22, 33, 14, 25, 36});
    auto col = ad::make_const<double>(2, 1, {2, -1});
    auto m = t.mul(a, col);
    CHECK((*m->val) == ad::Buffer<double>{2, 4, 6, -4, -5, -6});
}

TEST_CASE("gradients of individual ops match central differences") {
    Rng rng(9);
    auto w = ad::make_param<double>(3, 4, random_values(rng, 12));
    auto b = ad::make_param<double>(1, 4, random_values(rng, 4));
    auto u = ad::make_param<double>(5, 3, random_values(rng, 15, 0.3, 1.5));
    std::vector<Var<double>> params{w, b, u};

    auto eval_for = [&](auto body) {
        return [&, body](bool backward) {
            ad::Tape<double> tape;
            auto loss = body(tape);
            if (backward) tape.backward(loss);
            return loss->scalar();
        };
    };

    SUBCASE("linear") {
        auto eval = eval_for([&](ad::Tape<double> &t) { return t.mean(t.linear(u, w, b)); });
        CHECK(check_gradients(eval, params) < 1e-7);
    }
    SUBCASE("matmul_nt") {
        auto eval = eval_for([&](ad::Tape<double> &t) {
            return t.sum(t.matmul_nt(t.matmul(u, w), t.linear(u, w, b)));
        });
        CHECK(check_gradients(eval, params) < 1e-7);
    }
    SUBCASE("softmax") {
        auto eval = eval_for(
            [&](ad::Tape<double> &t) { return t.mean(t.softmax_rows(t.linear(u, w, b))); });
        CHECK(check_gradients(eval, params) < 1e-7);
    }
    SUBCASE("square_sub_div") {
        auto eval = eval_for([&](ad::Tape<double> &t) {
            auto y = t.linear(u, w, b);
            auto q = t.square(y);
            auto d = t.div(q, t.add_scalar(t.square(y), 2.0));
            return t.mean(t.sub(d, y));
        });
        CHECK(check_gradients(eval, params) < 1e-7);
    }
    SUBCASE("reciprocal_scale") {
        auto eval = eval_for([&](ad::Tape<double> &t) {
            auto y = t.add_scalar(t.square(t.linear(u, w, b)), 1.5);
            return t.mean(t.scale(t.reciprocal(y), 3.0));
        });
        CHECK(check_gradients(eval, params) < 1e-7);
    }
    SUBCASE("abs_smooth") {
        auto eval = eval_for([&](ad::Tape<double> &t) {
            return t.mean(t.abs_smooth(t.linear(u, w, b), 1e-3));
        });
        CHECK(check_gradients(eval, params) < 1e-6);
    }
    SUBCASE("relu") {
        auto eval = eval_for(
            [&](ad::Tape<double> &t) { return t.mean(t.relu(t.linear(u, w, b))); });
        CHECK(check_gradients(eval, params) < 1e-6);
    }
    SUBCASE("concat_slice") {
        auto eval = eval_for([&](ad::Tape<double> &t) {
            auto y = t.linear(u, w, b);
            auto c = t.concat_cols(y, t.square(y));
            return t.mean(t.slice_cols(c, 1, 6));
        });
        CHECK(check_gradients(eval, params) < 1e-7);
    }
    SUBCASE("broadcast_mul_col") {
        auto col = ad::make_param<double>(5, 1, random_values(rng, 5));
        params.push_back(col);
        auto eval = eval_for([&](ad::Tape<double> &t) {
            return t.mean(t.mul(t.linear(u, w, b), col));
        });
        CHECK(check_gradients(eval, params) < 1e-7);
    }
    SUBCASE("broadcast_add_row") {
        auto eval = eval_for([&](ad::Tape<double> &t) {
            return t.mean(t.square(t.add(t.matmul(u, w), b)));
        });
        CHECK(check_gradients(eval, params) < 1e-7);
    }
}

TEST_CASE("gradient of a deep composite graph matches central differences") {
    // Attention-shaped computation: scores from dot products, softmax,
    // message aggregation, residual, pointwise nonlinearity.
    Rng rng(10);
    auto x = ad::make_const<double>(6, 4, random_values(rng, 24));
    auto wq = ad::make_param<double>(4, 4, random_values(rng, 16));
    auto wk = ad::make_param<double>(4, 4, random_values(rng, 16));
    auto wv = ad::make_param<double>(4, 4, random_values(rng, 16));
    auto bq = ad::make_param<double>(1, 4, random_values(rng, 4));
    std::vector<Var<double>> params{wq, wk, wv, bq};

    auto eval = [&](bool backward) {
        ad::Tape<double> t;
        auto q = t.linear(x, wq, bq);
        auto k = t.matmul(x, wk);
        auto v = t.matmul(x, wv);
        auto scores = t.scale(t.matmul_nt(q, k), 1.0 / 2.0);
        auto alpha = t.softmax_rows(scores);
        auto msg = t.matmul(alpha, v);
        auto res = t.add(x, msg);
        auto loss = t.mean(t.square(res));
        if (backward) t.backward(loss);
        return loss->scalar();
    };
    CHECK(check_gradients(eval, params) < 1e-7);
}

TEST_CASE("repeated graphs are bitwise deterministic") {
    auto run = [] {
        Rng rng(11);
        ad::Tape<float> t;
        std::vector<float> xv(64), wv(64);
        for (auto &v : xv) v = static_cast<float>(rng.normal());
        for (auto &v : wv) v = static_cast<float>(rng.normal());
        auto x = ad::make_const<float>(8, 8, xv);
        auto w = ad::make_param<float>(8, 8, wv);
        auto loss = t.mean(t.softmax_rows(t.matmul(x, w)));
        t.backward(loss);
        auto out = *loss->val;
        out.insert(out.end(), w->grad.begin(), w->grad.end());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("float and double paths agree to single precision") {
    Rng rng(12);
    std::vector<double> xd = random_values(rng, 24), wd = random_values(rng, 18);
    std::vector<float> xf(xd.begin(), xd.end()), wf(wd.begin(), wd.end());

    ad::Tape<double> td;
    auto yd = td.softmax_rows(td.matmul(ad::make_const<double>(4, 6, xd),
                                        ad::make_const<double>(6, 3, wd)));
    ad::Tape<float> tf;
    auto yf = tf.softmax_rows(tf.matmul(ad::make_const<float>(4, 6, xf),
                                        ad::make_const<float>(6, 3, wf)));
    for (int i = 0; i < yd->size(); ++i)
        CHECK(std::abs((*yd->val)[i] - static_cast<double>((*yf->val)[i])) < 1e-5);
}

TEST_CASE("adam first step size is the learning rate for any gradient scale") {
    // With bias correction, step 1 moves each weight by lr * g / (|g| + eps').
    for (double g : {1e-3, 1.0, 250.0}) {
        auto p = ad::make_param<double>(1, 1, {5.0});
        ad::Adam<double> opt({p});
        p->grad[0] = g;
        opt.step(0.01);
        CHECK((*p->val)[0] == doctest::Approx(5.0 - 0.01).epsilon(1e-4));
    }
}

TEST_CASE("adam trajectory matches a step-by-step reference") {
    auto p = ad::make_param<double>(1, 1, {1.0});
    ad::Adam<double> opt({p});
    double rm = 0.0, rv = 0.0, rp = 1.0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.1;
    for (int t = 1; t <= 25; ++t) {
        double g = 2.0 * rp;  // d/dp of p^2, evaluated at the reference point
        p->grad[0] = 2.0 * (*p->val)[0];
        opt.step(lr);
        rm = b1 * rm + (1 - b1) * g;
        rv = b2 * rv + (1 - b2) * g * g;
        rp -= lr * (rm / (1 - std::pow(b1, t))) / (std::sqrt(rv / (1 - std::pow(b2, t))) + eps);
        CHECK((*p->val)[0] == doctest::Approx(rp).epsilon(1e-12));
    }
}

TEST_CASE("adam minimizes a quadratic") {
    auto p = ad::make_param<double>(1, 2, {4.0, -3.0});
    ad::Adam<double> opt({p});
    for (int i = 0; i < 3000; ++i) {
        opt.zero_grad();
        ad::Tape<double> t;
        auto target = ad::make_const<double>(1, 2, {1.0, 2.0});
        auto loss = t.sum(t.square(t.sub(p, target)));
        t.backward(loss);
        opt.step(0.01);
    }
    CHECK((*p->val)[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK((*p->val)[1] == doctest::Approx(2.0).epsilon(1e-4));
}

TEST_CASE("sum and mean reduce correctly") {
    ad::Tape<double> t;
    auto a = ad::make_const<double>(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(t.sum(a)->scalar() == 21.0);
    CHECK(t.mean(a)->scalar() == doctest::Approx(3.5).epsilon(1e-15));
}
