#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "difflare/affm.hpp"
#include "difflare/diffusion.hpp"
#include "difflare/nn.hpp"
#include "difflare/rng.hpp"
#include "difflare/tensor.hpp"

using namespace difflare;
namespace ag = difflare::ag;

namespace {

ag::Tensor leaf(std::vector<int> shape, Rng& rng, double scale = 0.5) {
    ag::Tensor t = ag::make(shape, true);
    for (auto& v : t->v) v = scale * rng.normal();
    return t;
}

// central finite differences vs analytic gradient at `checks` random coords
void check_grads(const std::vector<ag::Tensor>& leaves,
                 const std::function<ag::Tensor()>& fwd, int checks, uint64_t seed,
                 double tol = 1e-2) {
    for (const auto& t : leaves) std::fill(t->g.begin(), t->g.end(), 0.0);
    ag::Tensor loss = fwd();
    REQUIRE(loss->shape == std::vector<int>{1});
    ag::backward(loss);
    Rng rng(seed);
    const double h = 1e-5;
    for (int k = 0; k < checks; ++k) {
        ag::Tensor t = leaves[rng.uniform_int(static_cast<int>(leaves.size()))];
        size_t i = rng.next_u64() % t->v.size();
        double keep = t->v[i];
        t->v[i] = keep + h;
        double fp = fwd()->v[0];
        t->v[i] = keep - h;
        double fm = fwd()->v[0];
        t->v[i] = keep;
        double num = (fp - fm) / (2 * h);
        double ana = t->g[i];
        double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6});
        CAPTURE(k);
        CAPTURE(ana);
        CAPTURE(num);
        CHECK(rel < tol);
    }
}

}  // namespace

TEST_CASE("elementwise and matmul gradients") {
    Rng rng(101);
    ag::Tensor a = leaf({3, 4}, rng), b = leaf({4, 5}, rng), c = leaf({3, 5}, rng);
    check_grads({a, b, c},
                [&] {
                    return ag::mse_loss(ag::silu(ag::matmul(a, b)), c);
                },
                40, 1);
    ag::Tensor d = leaf({6, 6}, rng);
    std::vector<double> mask(36);
    for (auto& v : mask) v = rng.uniform();
    check_grads({d},
                [&] {
                    return ag::mean_all(
                        ag::mul_mask(ag::softmax_rows(ag::scale(d, 2.0)), mask));
                },
                20, 2);
}

TEST_CASE("conv2d and group_norm gradients") {
    Rng rng(102);
    ag::Tensor x = leaf({3, 6, 6}, rng);
    ag::Tensor w = leaf({4, 3, 3, 3}, rng), b = leaf({4}, rng);
    ag::Tensor gm = leaf({4}, rng), bt = leaf({4}, rng);
    for (auto& v : gm->v) v = 1.0 + 0.1 * v;  // keep gamma away from zero
    check_grads({x, w, b, gm, bt},
                [&] {
                    return ag::mean_all(
                        ag::group_norm(ag::conv2d(x, w, b, 1, 1), gm, bt, 2));
                },
                50, 3);
}

TEST_CASE("strided conv, upsample, pooling gradients") {
    Rng rng(103);
    ag::Tensor x = leaf({2, 8, 8}, rng);
    ag::Tensor w = leaf({3, 2, 4, 4}, rng), b = leaf({3}, rng);
    check_grads({x, w, b},
                [&] {
                    return ag::mean_all(
                        ag::avg_pool2d(ag::upsample2x(ag::conv2d(x, w, b, 2, 1)), 2));
                },
                40, 4);
}

TEST_CASE("spade-modulated residual block gradient") {
    Rng init(201);
    nn::ParamStore ps;
    detail::ResBlock rb(ps, "rb", 8, 8, 16, init);
    nn::Conv2d gamma(ps, "spade.gamma", 8, 8, 3, 1, 1, init);
    nn::Conv2d beta(ps, "spade.beta", 8, 8, 3, 1, 1, init);
    ps.set_requires_grad();
    Rng rng(202);
    ag::Tensor x = leaf({8, 4, 4}, rng);
    ag::Tensor fea = leaf({8, 4, 4}, rng);
    ag::Tensor temb = leaf({16}, rng);
    SpadeLevel sp{&gamma, &beta, fea};
    std::vector<ag::Tensor> leaves{x, fea, temb, gamma.w, gamma.b, beta.w, beta.b};
    for (auto& p : ps.params()) leaves.push_back(p.t);
    check_grads(leaves, [&] { return ag::mean_all(rb.forward(x, temb, &sp)); }, 50, 5);
}

TEST_CASE("rrdb block gradient") {
    Rng init(301);
    nn::ParamStore ps;
    detail::Rrdb rrdb(ps, "rrdb", 8, 8, init);
    ps.set_requires_grad();
    Rng rng(302);
    ag::Tensor x = leaf({8, 4, 4}, rng);
    std::vector<ag::Tensor> leaves{x};
    for (auto& p : ps.params()) leaves.push_back(p.t);
    check_grads(leaves, [&] { return ag::mean_all(rrdb.forward(x)); }, 50, 6);
}

TEST_CASE("masked attention gradient") {
    Rng rng(401);
    int n = 6, width = 8;
    ag::Tensor q = leaf({n, width}, rng), wq = leaf({width, width}, rng),
               wk = leaf({width, width}, rng), wv = leaf({width, width}, rng);
    std::vector<double> row(n);
    for (auto& v : row) v = rng.uniform();
    check_grads({q, wq, wk, wv},
                [&] {
                    return ag::mean_all(masked_attention(q, q, q, row, wq, wk, wv, false));
                },
                50, 7);
}

TEST_CASE("losses and structure ops") {
    Rng rng(501);
    ag::Tensor a = leaf({2, 4, 4}, rng), b = leaf({2, 4, 4}, rng);
    std::vector<double> wts(32);
    for (auto& v : wts) v = rng.uniform();
    check_grads({a, b}, [&] { return ag::weighted_l1_loss(a, b, wts); }, 30, 8);
    Rng rng2(502);
    ag::Tensor target = leaf({4, 4, 4}, rng2);
    check_grads({a, b},
                [&] {
                    ag::Tensor cat = ag::concat_ch(a, b);
                    return ag::l1_loss(ag::nc_to_chw(ag::chw_to_nc(cat), 4, 4), target);
                },
                20, 9);
}

TEST_CASE("rg propagation prunes inference tapes") {
    ag::Tensor a = ag::constant({4}, {1, 2, 3, 4});
    ag::Tensor b = ag::silu(ag::scale(a, 2.0));
    CHECK_FALSE(b->rg);
    CHECK(b->parents.empty());  // no trainable leaf -> no tape retained
}
