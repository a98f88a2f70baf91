#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "doctest.h"
#include "flowdisagg/flow.hpp"
#include "flowdisagg/rng.hpp"
#include "flowdisagg/tensor.hpp"

using namespace flowdisagg;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, float lo, float hi) {
    Tensor t = Tensor::zeros(shape);
    for (auto& v : t.raw_data()) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

void fill_uniform(Tensor& t, Rng& rng, float bound) {
    for (auto& v : t.raw_data()) v = static_cast<float>(rng.uniform(-bound, bound));
}

// Nudges a freshly built (identity) model into a generic invertible map:
// couplings get small nonzero heads, actnorms get non-unit statistics.
void randomize_model(CnfModel& model, Rng& rng, float coupling_bound) {
    for (auto& block : model.blocks) {
        if (!block.actnorm.initialized()) block.actnorm.initialize_identity();
        for (auto& v : block.actnorm.scale.raw_data())
            v = static_cast<float>(rng.uniform(0.5, 1.6));
        for (auto& v : block.actnorm.bias.raw_data())
            v = static_cast<float>(rng.uniform(-0.5, 0.5));
        if (block.coupling) {
            fill_uniform(block.coupling->head.kernels, rng, coupling_bound);
            fill_uniform(block.coupling->head.bias, rng, coupling_bound);
        }
    }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    const auto da = a.data(), db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(da[i]) - static_cast<double>(db[i])));
    }
    return m;
}

// log|det| of the flow's Jacobian at z0, assembled column by column from
// central differences of the full forward map.
double fd_jacobian_log_det(const CnfModel& model, const Tensor& z0, const Tensor& h, double step) {
    NoGradGuard ng;
    const std::int64_t d = z0.size();
    std::vector<float> jac(static_cast<std::size_t>(d * d));
    for (std::int64_t j = 0; j < d; ++j) {
        Tensor zp = z0.detach();
        Tensor zm = z0.detach();
        const double base = zp.raw_data()[static_cast<std::size_t>(j)];
        const float vp = static_cast<float>(base + step);
        const float vm = static_cast<float>(base - step);
        zp.raw_data()[static_cast<std::size_t>(j)] = vp;
        zm.raw_data()[static_cast<std::size_t>(j)] = vm;
        const Tensor fp = model.forward(zp, h).code;
        const Tensor fm = model.forward(zm, h).code;
        const double span = static_cast<double>(vp) - static_cast<double>(vm);
        for (std::int64_t i = 0; i < d; ++i) {
            jac[static_cast<std::size_t>(i * d + j)] = static_cast<float>(
                (static_cast<double>(fp.data()[static_cast<std::size_t>(i)]) -
                 static_cast<double>(fm.data()[static_cast<std::size_t>(i)])) /
                span);
        }
    }
    return log_abs_det(Tensor::from_data({d, d}, std::move(jac))).item_f64();
}

}  // namespace

TEST_CASE("actnorm initialization") {
    SUBCASE("already-normalized data is a fixed point") {
        // channel values {-1, +1} repeated: mean 0, population std 1
        Tensor batch = Tensor::from_data({2, 1, 4}, {-1, 1, -1, 1, 1, -1, 1, -1});
        ActNorm an(1);
        an.initialize(batch);
        CHECK(an.scale.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(an.bias.at({0, 0}) == doctest::Approx(0.0).epsilon(1e-6));
    }
    SUBCASE("mean 5 std 2 gives s=0.5 b=-2.5") {
        Tensor batch = Tensor::from_data({1, 1, 4}, {3, 7, 3, 7});  // mean 5, std 2
        ActNorm an(1);
        an.initialize(batch);
        CHECK(an.scale.at({0, 0}) == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(an.bias.at({0, 0}) == doctest::Approx(-2.5).epsilon(1e-6));
    }
    SUBCASE("constant channel is degenerate") {
        Tensor batch = Tensor::full({2, 2, 3}, 4.0f);
        ActNorm an(2);
        CHECK_THROWS_AS(an.initialize(batch), DegenerateStatsError);
    }
    SUBCASE("double initialization is rejected") {
        Tensor batch = Tensor::from_data({1, 1, 4}, {3, 7, 3, 7});
        ActNorm an(1);
        an.initialize(batch);
        CHECK_THROWS_AS(an.initialize(batch), ContractError);
    }
    SUBCASE("too-small batch is rejected") {
        ActNorm an(1);
        CHECK_THROWS_AS(an.initialize(Tensor::from_data({1, 1, 1}, {3})), ContractError);
    }
    SUBCASE("post-activation statistics hit mean 0 std 1") {
        Rng rng(11);
        Tensor batch = Tensor::zeros({6, 3, 10});
        auto d = batch.raw_data();
        const float means[3] = {5.0f, -2.0f, 0.5f};
        const float stds[3] = {2.0f, 0.3f, 4.0f};
        for (std::int64_t b = 0; b < 6; ++b) {
            for (std::int64_t c = 0; c < 3; ++c) {
                for (std::int64_t t = 0; t < 10; ++t) {
                    d[static_cast<std::size_t>((b * 3 + c) * 10 + t)] =
                        means[c] + stds[c] * static_cast<float>(rng.normal());
                }
            }
        }
        ActNorm an(3);
        an.initialize(batch);
        for (std::int64_t c = 0; c < 3; ++c) {
            double acc = 0.0, acc2 = 0.0;
            for (std::int64_t b = 0; b < 6; ++b) {
                Tensor sample = slice_rows(reshape(batch, {18, 10}), b * 3, 3);
                Tensor out = an.forward(sample).code;
                for (std::int64_t t = 0; t < 10; ++t) {
                    const double v = out.at({c, t});
                    acc += v;
                    acc2 += v * v;
                }
            }
            const double n = 60.0;
            const double mean = acc / n;
            const double stddev = std::sqrt(acc2 / n - mean * mean);
            CHECK(std::abs(mean) < 1e-3);
            CHECK(std::abs(stddev - 1.0) < 1e-3);
        }
    }
}

TEST_CASE("actnorm forward and inverse") {
    SUBCASE("identity parameters") {
        ActNorm an(2);
        an.initialize_identity();
        Tensor z = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
        FlowResult r = an.forward(z);
        CHECK(max_abs_diff(r.code, z) == 0.0);
        CHECK(r.log_det.item() == 0.0f);
    }
    SUBCASE("closed-form log-det") {
        ActNorm an(2);
        an.initialize_identity();
        an.scale.raw_data()[0] = 2.0f;
        an.scale.raw_data()[1] = 2.0f;
        Tensor z = Tensor::zeros({2, 5});
        CHECK(an.forward(z).log_det.item() ==
              doctest::Approx(10.0 * std::log(2.0)).epsilon(1e-6));
    }
    SUBCASE("inverse round trip") {
        Rng rng(5);
        ActNorm an(3);
        an.initialize(rand_tensor({4, 3, 6}, rng, -2.0f, 2.0f));
        Tensor z = rand_tensor({3, 6}, rng, -3.0f, 3.0f);
        CHECK(max_abs_diff(an.inverse(an.forward(z).code), z) < 1e-5);
    }
    SUBCASE("uninitialized layer refuses to run") {
        ActNorm an(2);
        Tensor z = Tensor::zeros({2, 3});
        CHECK_THROWS_AS(an.forward(z), ContractError);
        CHECK_THROWS_AS(an.inverse(z), ContractError);
    }
}

TEST_CASE("invertible 1x1 convolution") {
    SUBCASE("identity weight") {
        Rng rng(1);
        InvConv1x1 conv(3, rng);
        auto w = conv.weight.raw_data();
        std::fill(w.begin(), w.end(), 0.0f);
        for (int i = 0; i < 3; ++i) w[static_cast<std::size_t>(i * 3 + i)] = 1.0f;
        Tensor z = rand_tensor({3, 4}, rng, -1.0f, 1.0f);
        FlowResult r = conv.forward(z);
        CHECK(max_abs_diff(r.code, z) == 0.0);
        CHECK(r.log_det.item() == 0.0f);
    }
    SUBCASE("2*identity has log_det T*ln(det)") {
        Rng rng(2);
        InvConv1x1 conv(3, rng);
        auto w = conv.weight.raw_data();
        std::fill(w.begin(), w.end(), 0.0f);
        for (int i = 0; i < 3; ++i) w[static_cast<std::size_t>(i * 3 + i)] = 2.0f;
        Tensor z = Tensor::zeros({3, 5});
        CHECK(conv.forward(z).log_det.item() ==
              doctest::Approx(5.0 * std::log(8.0)).epsilon(1e-5));
    }
    SUBCASE("orthogonal init: log_det 0 and norms preserved") {
        Rng rng(3);
        InvConv1x1 conv(6, rng);
        Tensor z = rand_tensor({6, 7}, rng, -2.0f, 2.0f);
        FlowResult r = conv.forward(z);
        CHECK(std::abs(r.log_det.item()) < 1e-4);
        for (std::int64_t t = 0; t < 7; ++t) {
            double n_in = 0.0, n_out = 0.0;
            for (std::int64_t c = 0; c < 6; ++c) {
                n_in += static_cast<double>(z.at({c, t})) * z.at({c, t});
                n_out += static_cast<double>(r.code.at({c, t})) * r.code.at({c, t});
            }
            CHECK(std::sqrt(n_out) == doctest::Approx(std::sqrt(n_in)).epsilon(1e-5));
        }
    }
    SUBCASE("inverse round trip") {
        Rng rng(4);
        InvConv1x1 conv(5, rng);
        Tensor z = rand_tensor({5, 9}, rng, -2.0f, 2.0f);
        CHECK(max_abs_diff(conv.inverse(conv.forward(z).code), z) < 1e-5);
    }
    SUBCASE("singular weight is rejected") {
        Rng rng(5);
        InvConv1x1 conv(2, rng);
        auto w = conv.weight.raw_data();
        w[0] = 1.0f;
        w[1] = 1.0f;
        w[2] = 1.0f;
        w[3] = 1.0f;
        Tensor z = Tensor::zeros({2, 3});
        CHECK_THROWS_AS(conv.forward(z), SingularMatrixError);
        CHECK_THROWS_AS(conv.inverse(z), SingularMatrixError);
    }
}

TEST_CASE("affine coupling") {
    SUBCASE("fresh layer is the identity") {
        Rng rng(6);
        AffineCoupling c(4, 2, 8, true, rng);
        Tensor z = rand_tensor({4, 5}, rng, -1.0f, 1.0f);
        Tensor h = rand_tensor({2, 5}, rng, -1.0f, 1.0f);
        FlowResult r = c.forward(z, h);
        CHECK(max_abs_diff(r.code, z) == 0.0);
        CHECK(r.log_det.item() == 0.0f);
    }
    SUBCASE("forced log-scale ln2 over 2 channels and T=3") {
        Rng rng(7);
        AffineCoupling c(4, 2, 8, true, rng);
        auto hb = c.head.bias.raw_data();
        hb[0] = std::log(2.0f);
        hb[1] = std::log(2.0f);
        Tensor z = rand_tensor({4, 3}, rng, -1.0f, 1.0f);
        Tensor h = rand_tensor({2, 3}, rng, -1.0f, 1.0f);
        FlowResult r = c.forward(z, h);
        CHECK(r.log_det.item() == doctest::Approx(6.0 * std::log(2.0)).epsilon(1e-5));
        // pass-through half untouched, transformed half scaled by 2
        CHECK(r.code.at({0, 0}) == z.at({0, 0}));
        CHECK(r.code.at({2, 1}) == doctest::Approx(2.0 * z.at({2, 1})).epsilon(1e-6));
    }
    SUBCASE("inverse round trip with random backbone") {
        Rng rng(8);
        AffineCoupling c(6, 3, 8, true, rng);
        fill_uniform(c.head.kernels, rng, 0.5f);
        fill_uniform(c.head.bias, rng, 0.5f);
        Tensor z = rand_tensor({6, 10}, rng, -2.0f, 2.0f);
        Tensor h = rand_tensor({3, 10}, rng, -1.0f, 1.0f);
        CHECK(max_abs_diff(c.inverse(c.forward(z, h).code, h), z) < 1e-5);
    }
    SUBCASE("conditioning resamples h along time") {
        Rng rng(9);
        AffineCoupling c(4, 2, 8, true, rng);
        fill_uniform(c.head.kernels, rng, 0.3f);
        Tensor z = rand_tensor({4, 8}, rng, -1.0f, 1.0f);
        Tensor h_short = rand_tensor({2, 4}, rng, -1.0f, 1.0f);
        FlowResult r = c.forward(z, h_short);  // must not throw
        CHECK(r.code.dim(1) == 8);
        CHECK(max_abs_diff(c.inverse(r.code, h_short), z) < 1e-5);
    }
    SUBCASE("conditional output responds to h") {
        Rng rng(10);
        AffineCoupling c(4, 2, 8, true, rng);
        fill_uniform(c.head.kernels, rng, 0.3f);
        Tensor z = rand_tensor({4, 5}, rng, -1.0f, 1.0f);
        Tensor h1 = rand_tensor({2, 5}, rng, -1.0f, 1.0f);
        Tensor h2 = rand_tensor({2, 5}, rng, -1.0f, 1.0f);
        CHECK(max_abs_diff(c.forward(z, h1).code, c.forward(z, h2).code) > 0.0);
    }
    SUBCASE("simple-affine variant ignores h bit-for-bit") {
        Rng rng(11);
        AffineCoupling c(4, 2, 8, false, rng);
        fill_uniform(c.head.kernels, rng, 0.3f);
        fill_uniform(c.head.bias, rng, 0.3f);
        Tensor z = rand_tensor({4, 5}, rng, -1.0f, 1.0f);
        Tensor h1 = rand_tensor({2, 5}, rng, -1.0f, 1.0f);
        Tensor h2 = rand_tensor({2, 5}, rng, -1.0f, 1.0f);
        Tensor o1 = c.forward(z, h1).code;
        Tensor o2 = c.forward(z, h2).code;
        CHECK(std::memcmp(o1.data().data(), o2.data().data(),
                          o1.data().size() * sizeof(float)) == 0);
    }
    SUBCASE("single channel cannot split") {
        Rng rng(12);
        CHECK_THROWS_AS(AffineCoupling(1, 2, 8, true, rng), DimensionError);
    }
}

TEST_CASE("step-flow block and CNF composition") {
    SUBCASE("identity parameters give the identity map") {
        Rng rng(13);
        CnfModel model(4, 2, 8, 2, true, rng);
        model.initialize_identity();
        for (auto& block : model.blocks) {
            auto w = block.perm.weight.raw_data();
            std::fill(w.begin(), w.end(), 0.0f);
            for (int i = 0; i < 4; ++i) w[static_cast<std::size_t>(i * 4 + i)] = 1.0f;
        }
        Tensor z = rand_tensor({4, 6}, rng, -1.0f, 1.0f);
        Tensor h = rand_tensor({2, 6}, rng, -1.0f, 1.0f);
        FlowResult r = model.forward(z, h);
        CHECK(max_abs_diff(r.code, z) == 0.0);
        CHECK(r.log_det.item() == 0.0f);
        CHECK(max_abs_diff(model.inverse(z, h), z) == 0.0);
    }
    SUBCASE("single-block model equals the block") {
        Rng rng(14);
        CnfModel model(4, 2, 8, 1, true, rng);
        model.initialize_identity();
        randomize_model(model, rng, 0.2f);
        Tensor z = rand_tensor({4, 6}, rng, -1.0f, 1.0f);
        Tensor h = rand_tensor({2, 6}, rng, -1.0f, 1.0f);
        FlowResult whole = model.forward(z, h);
        FlowResult part = model.blocks[0].forward(z, h);
        CHECK(max_abs_diff(whole.code, part.code) == 0.0);
        CHECK(whole.log_det.item() == part.log_det.item());
    }
    SUBCASE("log-det additivity") {
        Rng rng(15);
        CnfModel model(4, 2, 8, 3, true, rng);
        model.initialize_identity();
        randomize_model(model, rng, 0.2f);
        Tensor z = rand_tensor({4, 6}, rng, -1.0f, 1.0f);
        Tensor h = rand_tensor({2, 6}, rng, -1.0f, 1.0f);
        double per_block_sum = 0.0;
        Tensor current = z;
        for (const auto& block : model.blocks) {
            FlowResult r = block.forward(current, h);
            per_block_sum += r.log_det.item_f64();
            current = r.code;
        }
        CHECK(std::abs(model.forward(z, h).log_det.item_f64() - per_block_sum) < 1e-5);
    }
    SUBCASE("bijectivity over random shapes, parameters and inputs") {
        Rng rng(16);
        const std::int64_t channel_choices[] = {2, 4, 8};
        const std::int64_t time_choices[] = {4, 8, 16};
        int trial = 0;
        double worst = 0.0;
        while (trial < 100) {
            const std::int64_t c = channel_choices[trial % 3];
            const std::int64_t t = time_choices[(trial / 3) % 3];
            CnfModel model(c, 2, 8, 2, true, rng);
            model.initialize_identity();
            randomize_model(model, rng, 0.1f);
            Tensor z = rand_tensor({c, t}, rng, -2.0f, 2.0f);
            Tensor h = rand_tensor({2, t}, rng, -1.0f, 1.0f);
            Tensor back = model.inverse(model.forward(z, h).code, h);
            worst = std::max(worst, max_abs_diff(back, z));
            ++trial;
        }
        CHECK(worst < 1e-4);
    }
    SUBCASE("volume bookkeeping through the inverse") {
        Rng rng(17);
        CnfModel model(4, 2, 8, 2, true, rng);
        model.initialize_identity();
        randomize_model(model, rng, 0.1f);
        Tensor z = rand_tensor({4, 6}, rng, -1.0f, 1.0f);
        Tensor h = rand_tensor({2, 6}, rng, -1.0f, 1.0f);
        FlowResult fwd = model.forward(z, h);
        Tensor recovered = model.inverse(fwd.code, h);
        // the inverse map's log-det at z_k is minus the forward log-det at
        // the recovered point
        const double ld_back = -model.forward(recovered, h).log_det.item_f64();
        CHECK(std::abs(fwd.log_det.item_f64() + ld_back) < 1e-5);
    }
    SUBCASE("finite-difference Jacobian oracle") {
        Rng rng(18);
        struct Case {
            std::int64_t c, t;
        };
        for (const Case& cs : {Case{2, 4}, Case{4, 4}, Case{2, 8}}) {
            CnfModel model(cs.c, 2, 8, 2, true, rng);
            model.initialize_identity();
            randomize_model(model, rng, 0.1f);
            Tensor z = rand_tensor({cs.c, cs.t}, rng, -1.0f, 1.0f);
            Tensor h = rand_tensor({2, cs.t}, rng, -1.0f, 1.0f);
            const double analytic = model.forward(z, h).log_det.item_f64();
            const double numeric = fd_jacobian_log_det(model, z, h, 2e-2);
            const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
            CHECK(rel < 1e-3);
        }
    }
    SUBCASE("call order trace") {
        Rng rng(19);
        CnfModel model(4, 2, 8, 2, true, rng);
        model.initialize_identity();
        std::vector<std::string> calls;
        model.trace_hook = [&](const std::string& s) { calls.push_back(s); };
        Tensor z = rand_tensor({4, 6}, rng, -1.0f, 1.0f);
        Tensor h = rand_tensor({2, 6}, rng, -1.0f, 1.0f);
        model.forward(z, h);
        const std::vector<std::string> expect_fwd = {
            "block0.actnorm.forward", "block0.invconv.forward", "block0.coupling.forward",
            "block1.actnorm.forward", "block1.invconv.forward", "block1.coupling.forward"};
        CHECK(calls == expect_fwd);
        calls.clear();
        model.inverse(z, h);
        const std::vector<std::string> expect_inv = {
            "block1.coupling.inverse", "block1.invconv.inverse", "block1.actnorm.inverse",
            "block0.coupling.inverse", "block0.invconv.inverse", "block0.actnorm.inverse"};
        CHECK(calls == expect_inv);
    }
    SUBCASE("data-dependent initialization normalizes every depth") {
        Rng rng(20);
        CnfModel model(3, 2, 8, 2, true, rng);
        std::vector<Tensor> z0s, hs;
        for (int i = 0; i < 8; ++i) {
            Tensor z = Tensor::zeros({3, 10});
            auto d = z.raw_data();
            const float means[3] = {4.0f, -1.0f, 0.0f};
            const float stds[3] = {3.0f, 0.5f, 1.5f};
            for (std::int64_t c = 0; c < 3; ++c) {
                for (std::int64_t t = 0; t < 10; ++t) {
                    d[static_cast<std::size_t>(c * 10 + t)] =
                        means[c] + stds[c] * static_cast<float>(rng.normal());
                }
            }
            z0s.push_back(z);
            hs.push_back(rand_tensor({2, 10}, rng, -1.0f, 1.0f));
        }
        model.initialize(z0s, hs);
        CHECK(model.initialized());
        // each block's actnorm output on its own input batch is standardized
        std::vector<Tensor> current = z0s;
        for (const auto& block : model.blocks) {
            std::vector<Tensor> outs;
            for (std::size_t i = 0; i < current.size(); ++i) {
                outs.push_back(block.actnorm.forward(current[i]).code);
            }
            for (std::int64_t c = 0; c < 3; ++c) {
                double acc = 0.0, acc2 = 0.0;
                for (const auto& o : outs) {
                    for (std::int64_t t = 0; t < 10; ++t) {
                        const double v = o.at({c, t});
                        acc += v;
                        acc2 += v * v;
                    }
                }
                const double n = static_cast<double>(outs.size()) * 10.0;
                const double mean = acc / n;
                const double stddev = std::sqrt(acc2 / n - mean * mean);
                CHECK(std::abs(mean) < 1e-3);
                CHECK(std::abs(stddev - 1.0) < 1e-3);
            }
            for (std::size_t i = 0; i < current.size(); ++i) {
                current[i] = block.forward(current[i], hs[i]).code;
            }
        }
        SUBCASE("uninitialized model refuses forward") {
            Rng rng2(21);
            CnfModel fresh(3, 2, 8, 2, true, rng2);
            CHECK_THROWS_AS(fresh.forward(z0s[0], hs[0]), ContractError);
        }
    }
}

TEST_CASE("conditional base distribution") {
    SUBCASE("log prob at the mode, unit sigma") {
        Tensor z = Tensor::from_data({2, 2}, {1, 2, 3, 4});
        Tensor sigma = Tensor::full({2, 2}, 1.0f);
        const double expect = -2.0 * std::log(2.0 * 3.14159265358979323846);
        CHECK(base_log_prob(z, z, sigma).item_f64() == doctest::Approx(expect).epsilon(1e-6));
    }
    SUBCASE("one-dimensional density value") {
        Tensor z = Tensor::from_data({1}, {1.0f});
        Tensor mu = Tensor::zeros({1});
        Tensor sigma = Tensor::full({1}, 1.0f);
        CHECK(base_log_prob(z, mu, sigma).item_f64() == doctest::Approx(-1.41894).epsilon(1e-5));
    }
    SUBCASE("doubling sigma at the mode costs d*ln2") {
        Tensor z = Tensor::from_data({4}, {1, 2, 3, 4});
        Tensor s1 = Tensor::full({4}, 1.0f);
        Tensor s2 = Tensor::full({4}, 2.0f);
        const double drop = base_log_prob(z, z, s1).item_f64() -
                            base_log_prob(z, z, s2).item_f64();
        CHECK(drop == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-6));
    }
    SUBCASE("domain and shape errors") {
        Tensor z = Tensor::zeros({2});
        CHECK_THROWS_AS(base_log_prob(z, z, Tensor::zeros({2})), NumericError);
        CHECK_THROWS_AS(base_log_prob(z, z, Tensor::full({3}, 1.0f)), DimensionError);
    }
    SUBCASE("reparameterized sampling") {
        Tensor mu = Tensor::from_data({2, 2}, {1, 2, 3, 4});
        Tensor sigma = Tensor::full({2, 2}, 0.5f);
        CHECK(max_abs_diff(base_sample(mu, sigma, Tensor::zeros({2, 2})), mu) == 0.0);

        Rng rng(22);
        Tensor noise = Tensor::randn({2, 2}, rng);
        Tensor unit = base_sample(Tensor::zeros({2, 2}), Tensor::full({2, 2}, 1.0f), noise);
        CHECK(max_abs_diff(unit, noise) == 0.0);

        CHECK_THROWS_AS(base_sample(mu, Tensor::zeros({2, 2}), noise), NumericError);
        CHECK_THROWS_AS(base_sample(mu, sigma, Tensor::zeros({4})), DimensionError);

        // CLT bound: mean of 1e4 draws within 4*sigma/100 of mu
        double acc[4] = {0, 0, 0, 0};
        const int n = 10000;
        for (int i = 0; i < n; ++i) {
            Tensor s = base_sample(mu, sigma, Tensor::randn({2, 2}, rng));
            for (int j = 0; j < 4; ++j) acc[j] += s.data()[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < 4; ++j) {
            CHECK(std::abs(acc[j] / n - mu.data()[static_cast<std::size_t>(j)]) <
                  4.0 * 0.5 / 100.0);
        }
    }
    SUBCASE("conditional heads produce positive sigma at the latent length") {
        Rng rng(23);
        ConditionalBase base(3, 2, rng);
        Tensor h = rand_tensor({3, 12}, rng, -2.0f, 2.0f);
        auto [mu, sigma] = base.params_for(h, 6);
        CHECK(mu.shape() == Shape{2, 6});
        CHECK(sigma.shape() == Shape{2, 6});
        for (const float s : sigma.data()) CHECK(s > 0.0f);
    }
}

TEST_CASE("cnf log probability") {
    SUBCASE("identity flow reduces to the standard normal") {
        Rng rng(24);
        CnfModel model(2, 2, 8, 2, true, rng);
        model.initialize_identity();
        for (auto& block : model.blocks) {
            auto w = block.perm.weight.raw_data();
            std::fill(w.begin(), w.end(), 0.0f);
            w[0] = 1.0f;
            w[3] = 1.0f;
        }
        Tensor z = rand_tensor({2, 3}, rng, -1.5f, 1.5f);
        Tensor h = rand_tensor({2, 3}, rng, -1.0f, 1.0f);
        Tensor mu = Tensor::zeros({2, 3});
        Tensor sigma = Tensor::full({2, 3}, 1.0f);
        double expect = -0.5 * 6.0 * std::log(2.0 * 3.14159265358979323846);
        for (const float v : z.data()) expect -= 0.5 * static_cast<double>(v) * v;
        CHECK(model.log_prob(z, h, mu, sigma).item_f64() ==
              doctest::Approx(expect).epsilon(1e-5));
    }
    SUBCASE("one actnorm layer change of variables by hand") {
        Rng rng(25);
        CnfModel model(1, 2, 8, 1, true, rng);  // C=1: actnorm + 1x1 conv only
        model.initialize_identity();
        model.blocks[0].perm.weight.raw_data()[0] = 1.0f;
        model.blocks[0].actnorm.scale.raw_data()[0] = 2.0f;
        model.blocks[0].actnorm.bias.raw_data()[0] = 0.3f;
        Tensor z = Tensor::from_data({1, 4}, {0.1f, -0.7f, 1.2f, 0.4f});
        Tensor h = Tensor::zeros({2, 4});
        Tensor mu = Tensor::zeros({1, 4});
        Tensor sigma = Tensor::full({1, 4}, 1.0f);
        double expect = 4.0 * std::log(2.0);  // T*C*ln2
        expect += -0.5 * 4.0 * std::log(2.0 * 3.14159265358979323846);
        for (const float v : z.data()) {
            const double y = 2.0 * v + 0.3;
            expect -= 0.5 * y * y;
        }
        CHECK(model.log_prob(z, h, mu, sigma).item_f64() ==
              doctest::Approx(expect).epsilon(1e-5));
    }
    SUBCASE("density integrates to one") {
        Rng rng(26);
        CnfModel model(1, 2, 8, 2, true, rng);
        model.initialize_identity();
        model.blocks[0].actnorm.scale.raw_data()[0] = 1.2f;
        model.blocks[0].actnorm.bias.raw_data()[0] = 0.1f;
        model.blocks[1].actnorm.scale.raw_data()[0] = 0.9f;
        model.blocks[1].actnorm.bias.raw_data()[0] = -0.2f;
        Tensor h = Tensor::zeros({2, 2});
        Tensor mu = Tensor::zeros({1, 2});
        Tensor sigma = Tensor::full({1, 2}, 1.0f);
        NoGradGuard ng;
        const int n = 121;
        const double lo = -6.0, hi = 6.0;
        const double step = (hi - lo) / (n - 1);
        double integral = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                Tensor z = Tensor::from_data({1, 2}, {static_cast<float>(lo + i * step),
                                                      static_cast<float>(lo + j * step)});
                double w = 1.0;
                if (i == 0 || i == n - 1) w *= 0.5;
                if (j == 0 || j == n - 1) w *= 0.5;
                integral += w * std::exp(model.log_prob(z, h, mu, sigma).item_f64());
            }
        }
        integral *= step * step;
        CHECK(std::abs(integral - 1.0) < 1e-2);
    }
}
