#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "doctest.h"
#include "flowdisagg/adam.hpp"
#include "flowdisagg/exceptions.hpp"
#include "flowdisagg/gradcheck.hpp"
#include "flowdisagg/model.hpp"

using namespace flowdisagg;

namespace {

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.window_len = 16;
    cfg.n_input_channels = 3;
    cfg.n_appliances = 2;
    cfg.latent_channels = 4;
    cfg.latent_len = 8;
    cfg.n_encoder_blocks = 1;
    cfg.n_decoder_blocks = 1;
    cfg.n_flow_blocks = 2;
    cfg.hidden_channels = 8;
    return cfg;
}

WindowSample random_window(const ModelConfig& cfg, Rng& rng) {
    WindowSample w;
    w.x = Tensor::randn({cfg.n_appliances, cfg.window_len}, rng);
    w.y = Tensor::randn({cfg.n_input_channels, cfg.window_len}, rng);
    return w;
}

std::vector<WindowSample> random_batch(const ModelConfig& cfg, std::int64_t n, Rng& rng) {
    std::vector<WindowSample> batch;
    for (std::int64_t i = 0; i < n; ++i) batch.push_back(random_window(cfg, rng));
    return batch;
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

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

void force_identity_flow(PfvaeModel& model) {
    model.cnf.initialize_identity();
    const std::int64_t c = model.config().latent_channels;
    for (auto& block : model.cnf.blocks) {
        auto w = block.perm.weight.raw_data();
        std::fill(w.begin(), w.end(), 0.0f);
        for (std::int64_t i = 0; i < c; ++i) w[static_cast<std::size_t>(i * c + i)] = 1.0f;
    }
}

}  // namespace

TEST_CASE("model config validation") {
    SUBCASE("defaults are consistent") {
        ModelConfig cfg;
        std::vector<std::string> warnings;
        cfg.validate(&warnings);
        CHECK(warnings.empty());
        CHECK(cfg.window_len == 256);
        CHECK(cfg.latent_len == 32);
    }
    SUBCASE("divisibility violations") {
        ModelConfig cfg = toy_config();
        cfg.window_len = 18;
        CHECK_THROWS_AS(cfg.validate(), ContractError);
        cfg = toy_config();
        cfg.latent_len = 4;
        CHECK_THROWS_AS(cfg.validate(), ContractError);
        cfg = toy_config();
        cfg.n_decoder_blocks = 2;
        CHECK_THROWS_AS(cfg.validate(), ContractError);
    }
    SUBCASE("unusual flow depth warns but passes") {
        ModelConfig cfg = toy_config();
        cfg.n_flow_blocks = 5;
        std::vector<std::string> warnings;
        cfg.validate(&warnings);
        REQUIRE(warnings.size() == 1);
        CHECK(warnings[0].find("5") != std::string::npos);
        Rng rng(0);
        PfvaeModel model(cfg, rng);  // construction still works
        CHECK(model.cnf.blocks.size() == 5);
    }
}

TEST_CASE("encoder") {
    Rng rng(1);
    const ModelConfig cfg = toy_config();
    PfvaeModel model(cfg, rng);
    SUBCASE("latent shape contract") {
        WindowSample w = random_window(cfg, rng);
        Tensor z0 = model.encode(w.x, w.y);
        CHECK(z0.shape() == Shape{4, 8});
    }
    SUBCASE("shape mismatch rejected") {
        CHECK_THROWS_AS(model.encode(Tensor::zeros({2, 8}), Tensor::zeros({3, 16})),
                        DimensionError);
        CHECK_THROWS_AS(model.encode(Tensor::zeros({2, 16}), Tensor::zeros({2, 16})),
                        DimensionError);
    }
    SUBCASE("sensitive to x under fixed y") {
        WindowSample a = random_window(cfg, rng);
        WindowSample b = random_window(cfg, rng);
        CHECK(max_abs_diff(model.encode(a.x, a.y), model.encode(b.x, a.y)) > 0.0);
    }
    SUBCASE("zero final conv collapses z0 to the bias map") {
        auto k = model.encoder_head.kernels.raw_data();
        std::fill(k.begin(), k.end(), 0.0f);
        auto b = model.encoder_head.bias.raw_data();
        for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<float>(i) + 0.5f;
        WindowSample w1 = random_window(cfg, rng);
        WindowSample w2 = random_window(cfg, rng);
        Tensor z1 = model.encode(w1.x, w1.y);
        CHECK(bitwise_equal(z1, model.encode(w2.x, w2.y)));
        for (std::int64_t c = 0; c < 4; ++c) {
            for (std::int64_t t = 0; t < 8; ++t) {
                CHECK(z1.at({c, t}) == static_cast<float>(c) + 0.5f);
            }
        }
    }
}

TEST_CASE("conditioning network") {
    Rng rng(2);
    const ModelConfig cfg = toy_config();
    PfvaeModel model(cfg, rng);
    SUBCASE("shapes and positivity") {
        WindowSample w = random_window(cfg, rng);
        ConditioningOutput co = model.condition(w.y);
        CHECK(co.h.shape() == Shape{8, 8});
        CHECK(co.mu.shape() == Shape{4, 8});
        CHECK(co.sigma.shape() == Shape{4, 8});
        for (const float s : co.sigma.data()) CHECK(s > 0.0f);
        CHECK_THROWS_AS(model.condition(Tensor::zeros({2, 16})), DimensionError);
    }
    SUBCASE("h responds to y perturbations") {
        WindowSample w = random_window(cfg, rng);
        Tensor y2 = w.y.detach();
        y2.raw_data()[0] += 0.1f;
        CHECK(max_abs_diff(model.condition(w.y).h, model.condition(y2).h) > 0.0);
    }
}

TEST_CASE("decoder") {
    Rng rng(3);
    const ModelConfig cfg = toy_config();
    PfvaeModel model(cfg, rng);
    SUBCASE("output shape and determinism") {
        Tensor z0 = Tensor::randn({4, 8}, rng);
        Tensor h = Tensor::randn({8, 8}, rng);
        Tensor a = model.decode(z0, h);
        CHECK(a.shape() == Shape{2, 16});
        CHECK(bitwise_equal(a, model.decode(z0, h)));
        CHECK_THROWS_AS(model.decode(Tensor::zeros({4, 4}), h), DimensionError);
        CHECK_THROWS_AS(model.decode(z0, Tensor::zeros({4, 8})), DimensionError);
    }
    SUBCASE("decoder parameter gradients pass finite differences") {
        Tensor z0 = Tensor::randn({4, 8}, rng);
        Tensor h = Tensor::randn({8, 8}, rng);
        Tensor target = Tensor::randn({2, 16}, rng);
        ParamMap decoder_params;
        for (std::size_t i = 0; i < model.decoder_blocks.size(); ++i)
            model.decoder_blocks[i].collect_params(decoder_params, "block" + std::to_string(i));
        model.decoder_head0.collect_params(decoder_params, "head0");
        model.decoder_head1.collect_params(decoder_params, "head1");
        const auto loss_fn = [&]() { return mse(model.decode(z0, h), target); };
        const ParamCheckResult r =
            finite_difference_check_params(loss_fn, decoder_params, 1e-4, 4, rng);
        INFO("worst parameter: ", r.worst_param);
        CHECK(r.max_rel_err < 1e-3);
    }
}

TEST_CASE("training step") {
    SUBCASE("loss decomposition") {
        Rng rng(4);
        const ModelConfig cfg = toy_config();
        PfvaeModel model(cfg, rng);
        auto batch = random_batch(cfg, 3, rng);
        LossBreakdown loss = model.training_step(batch);
        CHECK(std::abs(loss.total.item_f64() -
                       (loss.reconstruction.item_f64() + loss.prior.item_f64())) < 1e-6);
        CHECK(model.cnf.initialized());  // primed by the first call
    }
    SUBCASE("perfect reconstruction with identity flow hits d/2 ln(2pi)") {
        Rng rng(5);
        ModelConfig cfg = toy_config();
        cfg.ablation_standard_normal_base = true;
        PfvaeModel model(cfg, rng);
        force_identity_flow(model);
        auto zk = model.encoder_head.kernels.raw_data();
        std::fill(zk.begin(), zk.end(), 0.0f);
        auto zb = model.encoder_head.bias.raw_data();
        std::fill(zb.begin(), zb.end(), 0.0f);

        WindowSample w = random_window(cfg, rng);
        const ConditioningOutput co = model.condition(w.y);
        const Tensor z0 = model.encode(w.x, w.y);
        w.x = model.decode(z0, co.h).detach();

        const std::vector<WindowSample> batch = {w};
        LossBreakdown loss = model.training_step(batch);
        CHECK(loss.reconstruction.item_f64() == 0.0);
        const double d = 4.0 * 8.0;
        const double expect = 0.5 * d * std::log(2.0 * 3.14159265358979323846);
        CHECK(loss.total.item_f64() == doctest::Approx(expect).epsilon(1e-5));
    }
    SUBCASE("reconstruction term moves by exactly the mse delta") {
        Rng rng(6);
        const ModelConfig cfg = toy_config();
        PfvaeModel model(cfg, rng);
        auto batch = random_batch(cfg, 1, rng);
        model.training_step(batch);  // prime
        const Tensor z0 = model.encode(batch[0].x, batch[0].y);
        const ConditioningOutput co = model.condition(batch[0].y);
        const Tensor x_hat = model.decode(z0, co.h);

        LossBreakdown l1 = model.training_step(batch);
        const double m1 = mse(x_hat, batch[0].x).item_f64();
        CHECK(l1.reconstruction.item_f64() == m1);

        std::vector<WindowSample> shifted = batch;
        Tensor x2 = batch[0].x.detach();
        for (auto& v : x2.raw_data()) v += 1.0f;
        shifted[0].x = x2;
        // x changes the encoder input too, so recompute the full term
        const Tensor z0b = model.encode(x2, batch[0].y);
        const double m2 = mse(model.decode(z0b, co.h), x2).item_f64();
        LossBreakdown l2 = model.training_step(shifted);
        CHECK(l2.reconstruction.item_f64() == m2);
        CHECK(l2.reconstruction.item_f64() - l1.reconstruction.item_f64() ==
              doctest::Approx(m2 - m1).epsilon(1e-9));
    }
    SUBCASE("ten optimizer steps strictly decrease the loss") {
        Rng rng(7);
        const ModelConfig cfg = toy_config();
        PfvaeModel model(cfg, rng);
        auto batch = random_batch(cfg, 4, rng);
        model.training_step(batch);  // prime actnorms
        Adam adam(model.parameters(), {.lr = 1e-3});
        double prev = 1e300;
        for (int i = 0; i < 10; ++i) {
            adam.zero_grad();
            LossBreakdown loss = model.training_step(batch);
            const double value = loss.total.item_f64();
            CHECK(value < prev);
            prev = value;
            loss.total.backward();
            adam.step();
        }
    }
    SUBCASE("non-finite loss is reported with the offending term") {
        Rng rng(8);
        const ModelConfig cfg = toy_config();
        PfvaeModel model(cfg, rng);
        auto batch = random_batch(cfg, 1, rng);
        model.training_step(batch);
        auto b = model.decoder_head1.bias.raw_data();
        std::fill(b.begin(), b.end(), 1e25f);  // mse overflows f32
        CHECK_THROWS_WITH_AS(model.training_step(batch), doctest::Contains("reconstruction"),
                             NumericError);
    }
    SUBCASE("empty batch rejected") {
        Rng rng(9);
        PfvaeModel model(toy_config(), rng);
        std::vector<WindowSample> empty;
        CHECK_THROWS_AS(model.training_step(empty), ContractError);
    }
}

TEST_CASE("sampling and prediction") {
    Rng rng(10);
    const ModelConfig cfg = toy_config();
    PfvaeModel model(cfg, rng);
    auto batch = random_batch(cfg, 2, rng);
    model.training_step(batch);  // prime
    const Tensor y = batch[0].y;

    SUBCASE("fixed seed gives bitwise identical draws") {
        Rng r1(99), r2(99);
        const auto a = model.sample(y, 3, r1);
        const auto b = model.sample(y, 3, r2);
        REQUIRE(a.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(a[i].shape() == Shape{2, 16});
            CHECK(bitwise_equal(a[i], b[i]));
        }
    }
    SUBCASE("n_samples zero is an empty result") {
        Rng r(1);
        CHECK(model.sample(y, 0, r).empty());
        CHECK_THROWS_AS(model.sample(y, -1, r), ContractError);
    }
    SUBCASE("draws replicate the documented pipeline") {
        Rng r1(7), r2(7);
        const auto drawn = model.sample(y, 2, r1);
        const ConditioningOutput co = model.condition(y);
        NoGradGuard ng;
        for (int i = 0; i < 2; ++i) {
            const Tensor noise = Tensor::randn({cfg.latent_channels, cfg.latent_len}, r2);
            const Tensor z_k = base_sample(co.mu, co.sigma, noise);
            const Tensor expect = model.decode(model.cnf.inverse(z_k, co.h), co.h);
            CHECK(bitwise_equal(drawn[static_cast<std::size_t>(i)], expect));
        }
    }
    SUBCASE("zero noise rides the mode path") {
        const ConditioningOutput co = model.condition(y);
        NoGradGuard ng;
        const Tensor z_k = base_sample(co.mu, co.sigma,
                                       Tensor::zeros({cfg.latent_channels, cfg.latent_len}));
        CHECK(bitwise_equal(z_k, co.mu));
        const Tensor mode = model.decode(model.cnf.inverse(co.mu, co.h), co.h);
        CHECK(bitwise_equal(model.decode(model.cnf.inverse(z_k, co.h), co.h), mode));
    }
    SUBCASE("predict_mean arithmetic matches its samples") {
        Rng r1(31), r2(31);
        PredictSummary summary = model.predict_mean(y, 2, r1);
        const auto s = model.sample(y, 2, r2);
        const auto a = s[0].data(), b = s[1].data();
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double mean = 0.5 * (static_cast<double>(a[i]) + b[i]);
            // sample std of two values is |a-b|/sqrt(2); half-width 1.96*std/sqrt(2)
            const double half = 1.96 * std::abs(a[i] - b[i]) / 2.0;
            CHECK(summary.mean.data()[i] == doctest::Approx(mean).epsilon(1e-6));
            CHECK(summary.half_width.data()[i] ==
                  doctest::Approx(half).epsilon(1e-5).scale(1.0));
        }
        CHECK_THROWS_AS(model.predict_mean(y, 1, r1), ContractError);
    }
    SUBCASE("identical samples give zero-width intervals") {
        Rng r(11);
        PfvaeModel frozen(cfg, r);
        std::vector<WindowSample> b2 = random_batch(cfg, 2, r);
        frozen.training_step(b2);
        // decode ignores its inputs once every decoder weight is zero
        ParamMap dec;
        for (std::size_t i = 0; i < frozen.decoder_blocks.size(); ++i)
            frozen.decoder_blocks[i].collect_params(dec, "b" + std::to_string(i));
        frozen.decoder_head0.collect_params(dec, "h0");
        frozen.decoder_head1.collect_params(dec, "h1");
        for (auto& [name, p] : dec) {
            auto d = p.raw_data();
            std::fill(d.begin(), d.end(), 0.0f);
        }
        Rng rs(5);
        PredictSummary summary = frozen.predict_mean(b2[0].y, 5, rs);
        for (const float v : summary.half_width.data()) CHECK(v == 0.0f);
    }
    SUBCASE("uninitialized model refuses to sample") {
        Rng r(12);
        PfvaeModel fresh(cfg, r);
        CHECK_THROWS_AS(fresh.sample(y, 1, r), ContractError);
    }
}

TEST_CASE("scheme consistency") {
    Rng rng(13);
    const ModelConfig cfg = toy_config();
    PfvaeModel model(cfg, rng);
    auto batch = random_batch(cfg, 2, rng);
    model.training_step(batch);
    NoGradGuard ng;
    const Tensor z0 = model.encode(batch[0].x, batch[0].y);
    const ConditioningOutput co = model.condition(batch[0].y);
    const Tensor z_k = model.cnf.forward(z0, co.h).code;
    const Tensor z0_back = model.cnf.inverse(z_k, co.h);
    CHECK(max_abs_diff(model.decode(z0_back, co.h), model.decode(z0, co.h)) < 1e-4);
}

TEST_CASE("ablation variants") {
    SUBCASE("simple affine couplings ignore h inside the flow") {
        Rng rng(14);
        ModelConfig cfg = toy_config();
        cfg.ablation_simple_affine = true;
        PfvaeModel model(cfg, rng);
        auto batch = random_batch(cfg, 2, rng);
        model.training_step(batch);
        for (const auto& block : model.cnf.blocks) {
            REQUIRE(block.coupling.has_value());
            CHECK(!block.coupling->conditional());
        }
        NoGradGuard ng;
        const Tensor z0 = model.encode(batch[0].x, batch[0].y);
        const ConditioningOutput co = model.condition(batch[0].y);
        const Tensor h_sub = Tensor::randn({cfg.hidden_channels, cfg.latent_len}, rng);
        const double lp_a = model.cnf.log_prob(z0, co.h, co.mu, co.sigma).item_f64();
        const double lp_b = model.cnf.log_prob(z0, h_sub, co.mu, co.sigma).item_f64();
        CHECK(lp_a == lp_b);
        // the decoder still sees h: substituting there must matter
        CHECK(max_abs_diff(model.decode(z0, co.h), model.decode(z0, h_sub)) > 0.0);
    }
    SUBCASE("standard normal base pins mu and sigma without gradients") {
        Rng rng(15);
        ModelConfig cfg = toy_config();
        cfg.ablation_standard_normal_base = true;
        PfvaeModel model(cfg, rng);
        auto batch = random_batch(cfg, 2, rng);
        LossBreakdown loss = model.training_step(batch);
        loss.total.backward();
        const ConditioningOutput co = model.condition(batch[0].y);
        for (const float v : co.mu.data()) CHECK(v == 0.0f);
        for (const float v : co.sigma.data()) CHECK(v == 1.0f);
        CHECK(!co.mu.requires_grad());
        CHECK(!co.sigma.requires_grad());
        CHECK(!co.mu.has_grad());
        for (const auto& [name, p] : model.parameters()) {
            CHECK(name.find("cnf.base") == std::string::npos);
        }
    }
    SUBCASE("parameter counts order as expected") {
        Rng rng(16);
        ModelConfig cfg = toy_config();
        PfvaeModel complete(cfg, rng);

        ModelConfig std_cfg = cfg;
        std_cfg.ablation_standard_normal_base = true;
        PfvaeModel standard(std_cfg, rng);

        ModelConfig aff_cfg = cfg;
        aff_cfg.ablation_simple_affine = true;
        PfvaeModel affine(aff_cfg, rng);

        CHECK(standard.parameter_count() < complete.parameter_count());
        CHECK(affine.parameter_count() < complete.parameter_count());

        ModelConfig wide = cfg;
        wide.hidden_channels *= 2;
        PfvaeModel wider(wide, rng);
        CHECK(wider.parameter_count() > complete.parameter_count());
    }
    SUBCASE("hand-computed count for a minimal config") {
        Rng rng(17);
        ModelConfig cfg;
        cfg.window_len = 4;
        cfg.n_input_channels = 1;
        cfg.n_appliances = 1;
        cfg.latent_channels = 1;
        cfg.latent_len = 2;
        cfg.n_encoder_blocks = 1;
        cfg.n_decoder_blocks = 1;
        cfg.n_flow_blocks = 1;
        cfg.hidden_channels = 2;
        PfvaeModel model(cfg, rng);
        // encoder block 64 + encoder head 7 + conditioning block 52
        // + cnf (actnorm 2, invconv 1, mu/sigma heads 14) + decoder block 40
        // + decoder heads 14 and 3
        CHECK(model.parameter_count() == 64 + 7 + 52 + 17 + 40 + 14 + 3);
    }
}

TEST_CASE("end-to-end gradients on the toy config") {
    Rng rng(18);
    const ModelConfig cfg = toy_config();
    PfvaeModel model(cfg, rng);
    auto batch = random_batch(cfg, 2, rng);
    model.training_step(batch);  // prime actnorms before differentiating
    ParamMap params = model.parameters();
    const auto loss_fn = [&]() { return model.training_step(batch).total; };
    // deep f32 graphs leave ~1e-6 rounding noise in the FD numerator, so the
    // step is larger here than in the per-op checks
    const ParamCheckResult r = finite_difference_check_params(loss_fn, params, 5e-3, 2, rng);
    INFO("worst parameter: ", r.worst_param);
    CHECK(r.max_rel_err < 1e-3);
}
