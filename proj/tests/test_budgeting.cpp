// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "maskkv/budgeting.hpp"
#include "maskkv/harness/calibration.hpp"
#include "maskkv/harness/compare.hpp"

namespace maskkv {
namespace {

using Sizes = std::vector<std::size_t>;

std::size_t sum(const Sizes& v) { return std::accumulate(v.begin(), v.end(), std::size_t{0}); }

CalibrationProfile random_profile(std::mt19937_64& gen, std::size_t layers, std::size_t heads) {
    std::uniform_real_distribution<double> imp(0.0, 2.0);
    std::uniform_real_distribution<double> pref(0.0, 1.0);
    CalibrationProfile p;
    p.samples = 1;
    for (std::size_t l = 0; l < layers; ++l) {
        p.layer_importance.push_back(imp(gen));
        p.head_preference.emplace_back();
        for (std::size_t h = 0; h < heads; ++h) p.head_preference.back().push_back(pref(gen));
    }
    return p;
}

void expect_conserved(const BudgetPlan& plan, std::size_t kp, std::size_t heads) {
    ASSERT_EQ(sum(plan.layer_budgets), kp);
    ASSERT_EQ(plan.head_budgets.size(), plan.layer_budgets.size());
    for (std::size_t l = 0; l < plan.layer_budgets.size(); ++l) {
        ASSERT_EQ(plan.head_budgets[l].size(), heads);
        ASSERT_EQ(sum(plan.head_budgets[l]), heads * plan.layer_budgets[l]) << "layer " << l;
    }
}

// ---- allocate_layers ----

TEST(AllocateLayers, PureBase) {
    EXPECT_EQ(allocate_layers(64, 1.0, {0.3, 0.1, 0.1, 0.3}, {0, 3}), (Sizes{16, 16, 16, 16}));
}

TEST(AllocateLayers, AllImportanceOnBoundary) {
    EXPECT_EQ(allocate_layers(64, 0.0, {0.5, 0.0, 0.0, 0.5}, {0, 3}), (Sizes{32, 0, 0, 32}));
}

TEST(AllocateLayers, HandExampleWithRemainder) {
    std::vector<BudgetAdjustment> audit;
    const Sizes k = allocate_layers(100, 0.4, {0.3, 0.1, 0.1, 0.3}, {0, 3}, nullptr, &audit);
    EXPECT_EQ(k, (Sizes{33, 17, 17, 33}));
    // Two shortfall units, both boundary layers, lower index first.
    ASSERT_EQ(audit.size(), 2u);
    EXPECT_EQ(audit[0], (BudgetAdjustment{0, std::nullopt, 1}));
    EXPECT_EQ(audit[1], (BudgetAdjustment{3, std::nullopt, 1}));
}

TEST(AllocateLayers, ZeroImportanceFallsBackAndLogs) {
    RunLog log;
    const Sizes k = allocate_layers(10, 0.0, {0.0, 0.0, 0.0}, {0, 2}, &log);
    EXPECT_EQ(sum(k), 10u);
    EXPECT_EQ(k, (Sizes{4, 3, 3}));
    ASSERT_FALSE(log.entries.empty());
    EXPECT_NE(log.entries.front().find("importance is zero"), std::string::npos);
}

TEST(AllocateLayers, Errors) {
    EXPECT_THROW(allocate_layers(10, 1.5, {1.0}, {0}), ConfigError);
    EXPECT_THROW(allocate_layers(10, 0.5, {}, {0}), ConfigError);
    EXPECT_THROW(allocate_layers(10, 0.5, {1.0, 1.0}, {}), ConfigError);
    EXPECT_THROW(allocate_layers(10, 0.5, {1.0, 1.0}, {2}), ConfigError);
    EXPECT_THROW(allocate_layers(10, 0.5, {1.0, 1.0}, {0, 0}), ConfigError);
    EXPECT_THROW(allocate_layers(10, 0.5, {1.0, -1.0}, {0}), ConfigError);
}

// ---- allocate_heads ----

TEST(AllocateHeads, Examples) {
    EXPECT_EQ(allocate_heads(8, 1.0, {0.1, 0.2, 0.3, 0.4}), (Sizes{8, 8, 8, 8}));
    EXPECT_EQ(allocate_heads(8, 0.0, {1.0, 0.0, 0.0, 0.0}), (Sizes{32, 0, 0, 0}));
    EXPECT_EQ(allocate_heads(10, 0.5, {0.7, 0.3}), (Sizes{12, 8}));
}

TEST(AllocateHeads, UnnormalizedInputIsNormalized) {
    EXPECT_EQ(allocate_heads(10, 0.5, {7.0, 3.0}), allocate_heads(10, 0.5, {0.7, 0.3}));
}

TEST(AllocateHeads, ZeroPreferenceUsesUniformSharesAndLogs) {
    RunLog log;
    EXPECT_EQ(allocate_heads(5, 0.2, {0.0, 0.0, 0.0}, &log, nullptr, 3), (Sizes{5, 5, 5}));
    ASSERT_EQ(log.entries.size(), 1u);
    EXPECT_NE(log.entries[0].find("layer 3"), std::string::npos);
}

TEST(AllocateHeads, Errors) {
    EXPECT_THROW(allocate_heads(4, -0.1, {1.0}), ConfigError);
    EXPECT_THROW(allocate_heads(4, 0.5, {}), ConfigError);
    EXPECT_THROW(allocate_heads(4, 0.5, {1.0, std::nan("")}), ConfigError);
}

// ---- properties ----

TEST(BudgetProperties, ExactConservation) {
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> rate(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t layers = 1 + gen() % 16;
        const std::size_t heads = 1 + gen() % 16;
        const CalibrationProfile profile = random_profile(gen, layers, heads);
        BudgetConfig bc;
        bc.total_budget = gen() % 4097;
        bc.alpha = rate(gen);
        bc.beta = rate(gen);
        if (gen() % 3 == 0 && layers > 2) bc.boundary_layers = {gen() % layers};
        const BudgetPlan plan = plan_budget(bc, profile);
        expect_conserved(plan, bc.total_budget, heads);
        if (::testing::Test::HasFatalFailure()) return;
    }
}

TEST(BudgetProperties, ConservationSurvivesExtremeRates) {
    std::mt19937_64 gen(12);
    for (double alpha : {0.0, 1.0}) {
        for (double beta : {0.0, 1.0}) {
            for (int trial = 0; trial < 50; ++trial) {
                const std::size_t layers = 1 + gen() % 16;
                const std::size_t heads = 1 + gen() % 16;
                CalibrationProfile profile = random_profile(gen, layers, heads);
                if (trial % 5 == 0) std::fill(profile.layer_importance.begin(), profile.layer_importance.end(), 0.0);
                if (trial % 7 == 0) {
                    for (auto& row : profile.head_preference) std::fill(row.begin(), row.end(), 0.0);
                }
                BudgetConfig bc;
                bc.total_budget = gen() % 4097;
                bc.alpha = alpha;
                bc.beta = beta;
                expect_conserved(plan_budget(bc, profile), bc.total_budget, heads);
            }
        }
    }
}

TEST(BudgetProperties, FullBaseRatesEqualUniformWhenDivisible) {
    std::mt19937_64 gen(13);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t layers = 1 + gen() % 16;
        const std::size_t heads = 1 + gen() % 16;
        BudgetConfig bc;
        bc.alpha = 1.0;
        bc.beta = 1.0;
        bc.total_budget = layers * (gen() % 257);
        const BudgetPlan plan = plan_budget(bc, random_profile(gen, layers, heads));
        EXPECT_TRUE(plan.same_budgets(baseline_allocate(Policy::uniform, bc.total_budget, layers, heads)));
    }
}

TEST(BudgetProperties, ZeroBudgetGivesZeroPlan) {
    std::mt19937_64 gen(14);
    BudgetConfig bc;
    bc.total_budget = 0;
    const BudgetPlan plan = plan_budget(bc, random_profile(gen, 5, 3));
    EXPECT_TRUE(plan.same_budgets(BudgetPlan::keep_all(5, 3, 0)));
}

TEST(BudgetProperties, BoundaryConcentrationFamily) {
    // beta = 0 and zero middle importance: every unit beyond the base lands on
    // the boundary layers.
    std::mt19937_64 gen(15);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t layers = 3 + gen() % 14;
        std::vector<double> imp(layers, 0.0);
        imp.front() = 0.01 + static_cast<double>(gen() % 100) / 100.0;
        imp.back() = 0.01 + static_cast<double>(gen() % 100) / 100.0;
        const std::size_t kp = gen() % 4097;
        const Sizes k = allocate_layers(kp, 0.0, imp, {0, layers - 1});
        EXPECT_EQ(k.front() + k.back(), kp);
        for (std::size_t l = 1; l + 1 < layers; ++l) EXPECT_EQ(k[l], 0u);
    }
}

TEST(BudgetProperties, MonotoneInPreference) {
    std::mt19937_64 gen(16);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t heads = 1 + gen() % 16;
        std::vector<double> pref(heads);
        for (double& p : pref) p = u(gen);
        const double alpha = u(gen) * 0.999;
        const std::size_t kl = gen() % 300;
        const Sizes k = allocate_heads(kl, alpha, pref);
        for (std::size_t a = 0; a < heads; ++a) {
            for (std::size_t b = 0; b < heads; ++b) {
                if (pref[a] > pref[b]) {
                    EXPECT_GE(k[a], k[b]) << "trial " << trial;
                }
            }
        }
    }
}

TEST(BudgetProperties, BoundaryDominanceUnderBimodalProfiles) {
    std::mt19937_64 gen(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t layers = 3 + gen() % 14;
        std::vector<double> imp(layers);
        for (double& v : imp) v = 0.5 * u(gen);
        imp.front() = 0.5 + u(gen);
        imp.back() = 0.5 + u(gen);
        const double beta = u(gen) * 0.999;
        const std::size_t kp = gen() % 4097;
        const Sizes k = allocate_layers(kp, beta, imp, {0, layers - 1});
        const std::size_t min_b = std::min(k.front(), k.back());
        const std::size_t max_m = *std::max_element(k.begin() + 1, k.end() - 1);
        EXPECT_GE(min_b, max_m) << "trial " << trial << " kp " << kp << " beta " << beta << " D " << layers;
    }
}

// ---- baselines ----

TEST(Baselines, Uniform) {
    const BudgetPlan plan = baseline_allocate(Policy::uniform, 40, 4, 3);
    EXPECT_EQ(plan.layer_budgets, (Sizes{10, 10, 10, 10}));
    for (const auto& row : plan.head_budgets) EXPECT_EQ(row, (Sizes{10, 10, 10}));
    EXPECT_EQ(baseline_allocate(Policy::uniform, 42, 4, 1).layer_budgets, (Sizes{11, 11, 10, 10}));
    EXPECT_TRUE(baseline_allocate(Policy::snap, 42, 4, 2).same_budgets(baseline_allocate(Policy::uniform, 42, 4, 2)));
}

TEST(Baselines, PyramidFollowsProgression) {
    const BudgetPlan plan = baseline_allocate(Policy::pyramid, 40, 4, 2);
    // Arithmetic progression from 2*10 - 10/20 down to 10/20, floored, then
    // the two-unit shortfall to the shallowest layers.
    std::vector<double> real;
    for (int l = 0; l < 4; ++l) real.push_back(19.5 - l * (19.0 / 3.0));
    EXPECT_DOUBLE_EQ(std::accumulate(real.begin(), real.end(), 0.0), 40.0);
    Sizes expected;
    for (double r : real) expected.push_back(static_cast<std::size_t>(std::floor(r)));
    expected[0] += 1;
    expected[1] += 1;
    EXPECT_EQ(plan.layer_budgets, expected);
    EXPECT_EQ(plan.layer_budgets, (Sizes{20, 14, 6, 0}));
}

TEST(Baselines, PyramidNonIncreasing) {
    std::mt19937_64 gen(18);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t layers = 1 + gen() % 16;
        const std::size_t kp = gen() % 4097;
        const BudgetPlan plan = baseline_allocate(Policy::pyramid, kp, layers, 2);
        expect_conserved(plan, kp, 2);
        for (std::size_t l = 1; l < layers; ++l) EXPECT_LE(plan.layer_budgets[l], plan.layer_budgets[l - 1]);
    }
}

TEST(Baselines, SqueezeRule) {
    BaselineExtras extras;
    extras.layer_importance = {0.2, 0.5, 0.9};
    // avg 10: the least important layer gets 40% of it, the six saved units
    // split over the other two.
    EXPECT_EQ(baseline_allocate(Policy::squeeze, 30, 3, 2, extras).layer_budgets, (Sizes{4, 13, 13}));
    extras.layer_importance = {0.9, 0.1, 0.5, 0.3, 0.7, 0.8};
    // D = 6: layers 1 and 3 are least important; avg 10 -> 4 each, +3 for the rest.
    EXPECT_EQ(baseline_allocate(Policy::squeeze, 60, 6, 1, extras).layer_budgets, (Sizes{13, 4, 13, 4, 13, 13}));
    extras.layer_importance = {0.1};
    EXPECT_THROW(baseline_allocate(Policy::squeeze, 30, 3, 2, extras), ConfigError);
}

TEST(Baselines, AdaReservesAndConserves) {
    std::mt19937_64 gen(19);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t layers = 1 + gen() % 6;
        const std::size_t heads = 1 + gen() % 6;
        const std::size_t np = 1 + gen() % 40;
        BaselineExtras extras;
        extras.head_scores.assign(layers, std::vector<std::vector<double>>(heads, std::vector<double>(np)));
        for (auto& layer : extras.head_scores) {
            for (auto& head : layer) {
                for (double& v : head) v = u(gen);
            }
        }
        const std::size_t kp = gen() % 200;
        const BudgetPlan plan = baseline_allocate(Policy::ada, kp, layers, heads, extras);
        expect_conserved(plan, kp, heads);
        for (std::size_t l = 0; l < layers; ++l) {
            const auto reserve = static_cast<std::size_t>(std::floor(0.2 * static_cast<double>(plan.layer_budgets[l])));
            for (std::size_t h = 0; h < heads; ++h) EXPECT_GE(plan.head_budgets[l][h], reserve);
        }
    }
}

TEST(Baselines, AdaFavorsConcentratedHead) {
    BaselineExtras extras;
    // Head 0 puts all its mass on one position, head 1 is flat.
    extras.head_scores = {{{1.0, 0.0, 0.0, 0.0}, {0.25, 0.25, 0.25, 0.25}}};
    const BudgetPlan plan = baseline_allocate(Policy::ada, 2, 1, 2, extras);
    // k_l = 2, reserve 0, pool 4: the 1.0 entry plus three 0.25 entries -> (1, 3).
    EXPECT_EQ(plan.head_budgets[0], (Sizes{1, 3}));
}

TEST(Baselines, RejectsMaskKVAndEmptyShapes) {
    EXPECT_THROW(baseline_allocate(Policy::maskkv, 10, 2, 2), ConfigError);
    EXPECT_THROW(baseline_allocate(Policy::uniform, 10, 0, 2), ConfigError);
    EXPECT_THROW(parse_policy("h2o"), ConfigError);
    EXPECT_EQ(parse_policy("pyramid"), Policy::pyramid);
}

// ---- calibration averaging ----

struct Sample {
    std::vector<double> imp;
    std::vector<std::vector<double>> pref;
};

Sample sample_for(const ModelParams& params, const std::vector<TokenId>& prompt) {
    Sample s;
    first_step_signals(params, prompt, 8, RemaskPolicy{}, s.imp, s.pref, nullptr);
    return s;
}

std::vector<TokenId> prompt_for(std::uint64_t seed, const ModelParams& params) {
    return random_prompt(seed, 24, task_vocab(params));
}

TEST(Calibration, SingleSampleEqualsItsScores) {
    const ModelParams params = init_model(ModelConfig{});
    const auto prompt = prompt_for(1, params);
    const Sample s = sample_for(params, prompt);
    const CalibrationProfile p = calibrate(params, {prompt}, 8);
    EXPECT_EQ(p.layer_importance, s.imp);
    EXPECT_EQ(p.head_preference, s.pref);
    EXPECT_EQ(p.samples, 1u);
}

TEST(Calibration, DuplicateIsIdempotent) {
    const ModelParams params = init_model(ModelConfig{});
    const auto prompt = prompt_for(2, params);
    const CalibrationProfile once = calibrate(params, {prompt}, 8);
    const CalibrationProfile twice = calibrate(params, {prompt, prompt}, 8);
    EXPECT_EQ(once.layer_importance, twice.layer_importance);
    EXPECT_EQ(once.head_preference, twice.head_preference);
}

TEST(Calibration, TwoSamplesAverage) {
    const ModelParams params = init_model(ModelConfig{});
    const auto a = prompt_for(3, params);
    const auto b = prompt_for(4, params);
    const Sample sa = sample_for(params, a);
    const Sample sb = sample_for(params, b);
    const CalibrationProfile p = calibrate(params, {a, b}, 8);
    for (std::size_t l = 0; l < sa.imp.size(); ++l) {
        EXPECT_NEAR(p.layer_importance[l], (sa.imp[l] + sb.imp[l]) / 2.0, 1e-15);
        for (std::size_t h = 0; h < sa.pref[l].size(); ++h) {
            EXPECT_NEAR(p.head_preference[l][h], (sa.pref[l][h] + sb.pref[l][h]) / 2.0, 1e-15);
        }
    }
}

TEST(Calibration, EmptySetIsConfigError) {
    const ModelParams params = init_model(ModelConfig{});
    EXPECT_THROW(calibrate(params, {}, 8), ConfigError);
    EXPECT_THROW(calibrate(std::vector<AttentionTrace>{}), ConfigError);
}

TEST(Calibration, DefaultRatesOnSeededProfile) {
    const ModelParams params = init_model(harness_model());
    std::vector<std::vector<TokenId>> prompts;
    for (std::uint64_t s = 0; s < 4; ++s) prompts.push_back(prompt_for(100 + s, params));
    const CalibrationProfile profile = calibrate(params, prompts, 8);
    for (std::size_t kp : {0u, 1u, 7u, 64u, 255u, 1024u}) {
        BudgetConfig bc;
        bc.total_budget = kp;
        expect_conserved(plan_budget(bc, profile), kp, params.config.num_heads);
    }
}

TEST(Calibration, OfflineAndOnlinePlanningAgree) {
    const ModelParams params = init_model(harness_model());
    std::vector<std::vector<TokenId>> prompts;
    for (std::uint64_t s = 0; s < 3; ++s) prompts.push_back(prompt_for(200 + s, params));
    const CalibrationProfile stored = calibrate(params, prompts, 8);

    // Recompute the same signals step by step, then plan from them.
    std::vector<double> imp(params.config.num_layers, 0.0);
    std::vector<std::vector<double>> pref(params.config.num_layers,
                                          std::vector<double>(params.config.num_heads, 0.0));
    for (const auto& prompt : prompts) {
        const Sample s = sample_for(params, prompt);
        for (std::size_t l = 0; l < imp.size(); ++l) {
            imp[l] += s.imp[l];
            for (std::size_t h = 0; h < pref[l].size(); ++h) pref[l][h] += s.pref[l][h];
        }
    }
    CalibrationProfile fresh;
    fresh.samples = prompts.size();
    for (std::size_t l = 0; l < imp.size(); ++l) {
        fresh.layer_importance.push_back(imp[l] / 3.0);
        fresh.head_preference.emplace_back();
        for (double v : pref[l]) fresh.head_preference.back().push_back(v / 3.0);
    }
    for (std::size_t kp : {4u, 16u, 40u, 100u}) {
        BudgetConfig bc;
        bc.total_budget = kp;
        EXPECT_TRUE(plan_budget(bc, stored).same_budgets(plan_budget(bc, fresh))) << "k_p " << kp;
    }
}

TEST(Calibration, ProfileValidation) {
    CalibrationProfile p;
    EXPECT_THROW(p.validate(), ConfigError);
    p.samples = 1;
    p.layer_importance = {0.5};
    p.head_preference = {{0.5, 1.5}};
    EXPECT_THROW(p.validate(), ConfigError);
    p.head_preference = {{0.5, 0.5}};
    EXPECT_NO_THROW(p.validate());
}

}  // namespace
}  // namespace maskkv
