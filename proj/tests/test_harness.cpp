// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "maskkv/maskkv.hpp"

namespace maskkv {
namespace {

namespace fs = std::filesystem;

std::string temp_path(const std::string& name) {
    return (fs::temp_directory_path() / ("maskkv_test_" + std::to_string(::getpid()) + "_" + name)).string();
}

// ---- memory ----

TEST(Memory, FormulaExamples) {
    EXPECT_EQ(kv_memory_bytes(1, 1, 1, 2, 1), 4u);
    EXPECT_EQ(kv_memory_bytes(1024, 32, 128, 2, 1), 16777216u);
    EXPECT_EQ(kv_memory_bytes_per_layer(1024, 32, 128, 2), 16777216u);
    EXPECT_EQ(kv_memory_bytes(1024, 32, 128, 2, 32), 536870912u);
    static_assert(kv_memory_bytes(1, 1, 1) == 4);
}

// ---- agreement ----

TEST(Agreement, Examples) {
    const std::vector<TokenId> a = {1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<TokenId> b = a;
    EXPECT_DOUBLE_EQ(agreement_rate(a, b), 1.0);
    b[3] = 99;
    EXPECT_DOUBLE_EQ(agreement_rate(a, b), 0.875);
    EXPECT_DOUBLE_EQ(agreement_rate(a, {9, 9, 9, 9, 9, 9, 9, 9}), 0.0);
    EXPECT_THROW(agreement_rate(a, {1, 2}), ComparisonError);
}

// ---- spearman ----

TEST(Spearman, ReferenceValues) {
    const std::vector<double> x = {1, 2, 3, 4, 5};
    EXPECT_DOUBLE_EQ(*spearman(x, std::vector<double>{10, 20, 30, 40, 50}), 1.0);
    EXPECT_DOUBLE_EQ(*spearman(x, std::vector<double>{5, 4, 3, 2, 1}), -1.0);
    // d = (0,0,-1,1,0)... ranks of y: 1,2,4,3,5 -> 1 - 6*2/(5*24) = 0.9
    EXPECT_NEAR(*spearman(x, std::vector<double>{1, 2, 4, 3, 5}), 0.9, 1e-15);
    EXPECT_FALSE(spearman(x, std::vector<double>{1, 1, 1, 1, 1}).has_value());
    EXPECT_FALSE(spearman(std::vector<double>{1}, std::vector<double>{2}).has_value());
    EXPECT_THROW(spearman(x, std::vector<double>{1}), ComparisonError);
}

TEST(Spearman, TiesShareAverageRank) {
    EXPECT_EQ(average_ranks(std::vector<double>{3, 1, 2, 2}), (std::vector<double>{4, 1, 2.5, 2.5}));
}

// ---- needle ----

TEST(Needle, DepthEndpoints) {
    const ModelParams p = init_model(harness_model());
    const TaskVocab v = task_vocab(p);
    const NeedleTask first = needle_task(1, 64, 0.0, v);
    EXPECT_EQ(first.needle_pos, 0u);
    EXPECT_EQ(first.prompt[0], v.needle);
    const NeedleTask last = needle_task(1, 64, 1.0, v);
    EXPECT_EQ(last.needle_pos, 63u);
    EXPECT_EQ(last.prompt[63], v.needle);
    EXPECT_EQ(needle_task(1, 64, 0.5, v).needle_pos, 32u);
}

TEST(Needle, DeterministicAndWellFormed) {
    const ModelParams p = init_model(harness_model());
    const TaskVocab v = task_vocab(p);
    const NeedleTask a = needle_task(42, 64, 0.3, v);
    const NeedleTask b = needle_task(42, 64, 0.3, v);
    EXPECT_EQ(a.prompt, b.prompt);
    EXPECT_NE(a.prompt, needle_task(43, 64, 0.3, v).prompt);
    EXPECT_EQ(a.answer, v.needle);
    std::size_t needles = 0;
    for (TokenId t : a.prompt) {
        EXPECT_NE(t, v.mask_id);
        needles += t == v.needle ? 1 : 0;
    }
    EXPECT_EQ(needles, 1u);
}

TEST(Needle, Errors) {
    const ModelParams p = init_model(harness_model());
    const TaskVocab v = task_vocab(p);
    EXPECT_THROW(needle_task(1, 64, 1.5, v), ConfigError);
    EXPECT_THROW(needle_task(1, 64, -0.1, v), ConfigError);
    EXPECT_THROW(needle_task(1, 0, 0.5, v), ConfigError);
}

TEST(Needle, DepthSchedule) {
    EXPECT_DOUBLE_EQ(needle_depth(0), 0.0);
    EXPECT_DOUBLE_EQ(needle_depth(10), 1.0);
    EXPECT_DOUBLE_EQ(needle_depth(11), 0.0);
}

// ---- trace round trip ----

AttentionTrace sample_trace(std::uint64_t seed = 7, std::size_t prompt_len = 10) {
    ModelConfig c;
    c.seed = seed;
    const ModelParams p = init_model(c);
    return capture_trace(p, random_prompt(seed, prompt_len, task_vocab(p)), 6);
}

TEST(Trace, SaveLoadRoundTripIsExact) {
    const AttentionTrace t = sample_trace();
    const std::string path = temp_path("trace.bin");
    save_trace(t, path);
    const AttentionTrace back = load_trace(path);
    fs::remove(path);
    EXPECT_TRUE(back == t);
    EXPECT_EQ(serialize_trace(back), serialize_trace(t));
    EXPECT_EQ(back.manifest.at("model_seed"), "7");
}

TEST(Trace, LayoutMatchesDeclaredFormat) {
    const AttentionTrace t = sample_trace();
    const auto bytes = serialize_trace(t);
    ASSERT_GE(bytes.size(), 28u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "MKVTRC01");
    auto u32 = [&](std::size_t off) {
        return std::uint32_t{bytes[off]} | std::uint32_t{bytes[off + 1]} << 8 | std::uint32_t{bytes[off + 2]} << 16 |
               std::uint32_t{bytes[off + 3]} << 24;
    };
    EXPECT_EQ(u32(8), 4u);
    EXPECT_EQ(u32(12), 4u);
    EXPECT_EQ(u32(16), 10u);
    EXPECT_EQ(u32(20), 6u);
    EXPECT_EQ(u32(24), 8u);
    // First payload float is q_mask[0], little-endian.
    EXPECT_EQ(std::bit_cast<float>(u32(28)), t.q_mask[0]);
    const std::size_t floats = t.q_mask.size() + t.k_full.size() + t.h_in.size() + t.h_out.size();
    const std::size_t manifest_off = 28 + 4 * floats;
    EXPECT_EQ(bytes.size(), manifest_off + 4 + u32(manifest_off));
}

TEST(Trace, CorruptMagicFailsAtOffsetZero) {
    auto bytes = serialize_trace(sample_trace());
    bytes[3] ^= 0xFF;
    try {
        parse_trace(bytes);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
}

TEST(Trace, TruncatedByOneByteReportsLengths) {
    const AttentionTrace t = sample_trace();
    auto bytes = serialize_trace(t);
    // Cut inside the float payload: drop the manifest and one payload byte.
    const std::size_t floats = t.q_mask.size() + t.k_full.size() + t.h_in.size() + t.h_out.size();
    const std::size_t payload_end = 28 + 4 * floats;
    bytes.resize(payload_end + 4 - 1);
    try {
        parse_trace(bytes);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("expected at least " + std::to_string(payload_end + 4)), std::string::npos) << msg;
        EXPECT_NE(msg.find("got " + std::to_string(payload_end + 3)), std::string::npos) << msg;
        EXPECT_EQ(e.offset(), payload_end + 3);
    }
    // Whole file minus its final byte: the manifest is short.
    auto whole = serialize_trace(t);
    whole.pop_back();
    EXPECT_THROW(parse_trace(whole), ParseError);
}

TEST(Trace, OtherCorruptions) {
    const auto good = serialize_trace(sample_trace());
    {
        auto b = good;
        b[12] = b[13] = b[14] = b[15] = 0;  // heads = 0
        try {
            parse_trace(b);
            FAIL();
        } catch (const ParseError& e) {
            EXPECT_EQ(e.offset(), 12u);
        }
    }
    {
        auto b = good;
        const float inf = INFINITY;
        std::memcpy(b.data() + 28 + 4 * 5, &inf, 4);
        try {
            parse_trace(b);
            FAIL();
        } catch (const ParseError& e) {
            EXPECT_EQ(e.offset(), 28u + 20u);
        }
    }
    {
        auto b = good;
        b.push_back('x');
        EXPECT_THROW(parse_trace(b), ParseError);
    }
    {
        auto b = good;
        for (int i = 8; i < 28; ++i) b[i] = 0xFF;  // absurd dims
        EXPECT_THROW(parse_trace(b), ParseError);
    }
    EXPECT_THROW(parse_trace(std::vector<std::uint8_t>(good.begin(), good.begin() + 20)), ParseError);
    EXPECT_THROW(load_trace(temp_path("does_not_exist.bin")), InputError);
}

TEST(Trace, DrivenScoringMatchesModel) {
    ModelConfig c;
    c.seed = 21;
    const ModelParams p = init_model(c);
    const auto prompt = random_prompt(3, 12, task_vocab(p));
    const DenoisingState s = initial_state(c, prompt, 6, RemaskPolicy{});
    const StepOutput out = forward_step(p, s);
    const ImportanceGrid model_grid = mask_voting_grid(out, s);
    const std::string path = temp_path("trace_scoring.bin");
    save_trace(capture_trace(p, prompt, 6), path);
    const AttentionTrace t = load_trace(path);
    fs::remove(path);

    const std::size_t dk = c.head_dim();
    const std::size_t n = s.size();
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        for (std::size_t h = 0; h < c.num_heads; ++h) {
            const ImportanceVector from_trace = mask_voting(trace_mask_attention(t, l, h));
            // Same float-rounded tensors, taken straight from the model.
            Matrix q(s.gen_len, dk);
            Matrix k(n, dk);
            for (std::size_t i = 0; i < s.gen_len; ++i) {
                for (std::size_t j = 0; j < dk; ++j) {
                    q(i, j) = static_cast<float>(out.layers[l].queries(s.prompt_len + i, h * dk + j));
                }
            }
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < dk; ++j) k(i, j) = static_cast<float>(out.layers[l].keys(i, h * dk + j));
            }
            const ImportanceVector rounded = mask_voting(mask_attention(q, k, s.prompt_len));
            ASSERT_EQ(from_trace.scores.size(), s.prompt_len);
            for (std::size_t j = 0; j < s.prompt_len; ++j) {
                EXPECT_NEAR(from_trace.scores[j], rounded.scores[j], 1e-9);
                EXPECT_NEAR(from_trace.scores[j], model_grid[l][h].scores[j], 1e-5);
            }
        }
    }
}

TEST(Trace, CalibrationFromTracesMatchesModel) {
    ModelConfig c;
    c.seed = 22;
    const ModelParams p = init_model(c);
    std::vector<std::vector<TokenId>> prompts;
    std::vector<AttentionTrace> traces;
    for (std::uint64_t s = 0; s < 3; ++s) {
        prompts.push_back(random_prompt(s, 12, task_vocab(p)));
        traces.push_back(capture_trace(p, prompts.back(), 6));
    }
    const CalibrationProfile a = calibrate(p, prompts, 6);
    const CalibrationProfile b = calibrate(traces);
    EXPECT_EQ(b.samples, 3u);
    EXPECT_EQ(b.source, "traces=3");
    for (std::size_t l = 0; l < a.num_layers(); ++l) {
        EXPECT_NEAR(a.layer_importance[l], b.layer_importance[l], 1e-5);
        for (std::size_t h = 0; h < a.num_heads(); ++h) EXPECT_NEAR(a.head_preference[l][h], b.head_preference[l][h], 1e-5);
    }
}

// ---- profile round trip ----

CalibrationProfile sample_profile() {
    const ModelParams p = init_model(harness_model());
    std::vector<std::vector<TokenId>> prompts;
    for (std::uint64_t s = 0; s < 2; ++s) prompts.push_back(random_prompt(s, 16, task_vocab(p)));
    return calibrate(p, prompts, 8);
}

TEST(Profile, TextRoundTrip) {
    const CalibrationProfile p = sample_profile();
    const std::string text = profile_to_text(p);
    const CalibrationProfile back = parse_profile(text);
    EXPECT_EQ(profile_to_text(back), text);
    EXPECT_EQ(back.samples, p.samples);
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
        EXPECT_NEAR(back.layer_importance[l], p.layer_importance[l], 5e-9 * std::abs(p.layer_importance[l]) + 1e-300);
        for (std::size_t h = 0; h < p.num_heads(); ++h) {
            EXPECT_NEAR(back.head_preference[l][h], p.head_preference[l][h], 5e-9 * std::abs(p.head_preference[l][h]));
        }
    }
    // A second pass is exact.
    const CalibrationProfile again = parse_profile(profile_to_text(back));
    EXPECT_EQ(again.layer_importance, back.layer_importance);
    EXPECT_EQ(again.head_preference, back.head_preference);
}

TEST(Profile, FileRoundTrip) {
    const CalibrationProfile p = sample_profile();
    const std::string path = temp_path("profile.txt");
    save_profile(p, path);
    const CalibrationProfile back = load_profile(path);
    fs::remove(path);
    EXPECT_EQ(back.source, path);
    EXPECT_EQ(profile_to_text(back), profile_to_text(p));
    EXPECT_THROW(load_profile(temp_path("missing.txt")), InputError);
}

TEST(Profile, HeaderFormat) {
    CalibrationProfile p;
    p.samples = 3;
    p.layer_importance = {0.25, 1.5};
    p.head_preference = {{0.5, 0.125}, {1.0, 0.0}};
    EXPECT_EQ(profile_to_text(p),
              "maskkv-profile v1 D=2 H=2 samples=3\n"
              "layer 0 importance 0.25\n"
              "layer 1 importance 1.5\n"
              "heads 0 0.5 0.125\n"
              "heads 1 1 0\n");
}

TEST(Profile, CorruptionsAreLocated) {
    const std::string good =
        "maskkv-profile v1 D=2 H=2 samples=3\n"
        "layer 0 importance 0.25\n"
        "layer 1 importance 1.5\n"
        "heads 0 0.5 0.125\n"
        "heads 1 1 0\n";
    ASSERT_NO_THROW(parse_profile(good));
    auto offset_of = [](const std::string& text) -> std::size_t {
        try {
            parse_profile(text);
        } catch (const ParseError& e) {
            return e.offset();
        }
        return static_cast<std::size_t>(-1);
    };
    std::string bad = good;
    bad.replace(bad.find("1.5"), 3, "abc");
    EXPECT_EQ(offset_of(bad), good.find("layer 1"));
    bad = good;
    bad.replace(bad.find("heads 1 1 0"), 11, "heads 1 1");
    EXPECT_EQ(offset_of(bad), good.find("heads 1"));
    EXPECT_EQ(offset_of("maskkv-profile v2 D=2 H=2 samples=3\n"), 0u);
    EXPECT_EQ(offset_of(good.substr(0, good.find("heads 1"))), good.find("heads 1"));
    EXPECT_EQ(offset_of(good + "junk\n"), good.size());
    bad = good;
    bad.replace(bad.find("1.5"), 3, "2.5");  // outside [0, 2]
    EXPECT_EQ(offset_of(bad), 0u);
}

// ---- report ----

TEST(Report, TextRoundTrip) {
    Report r;
    auto& a = r.section("alpha");
    a.add("x", "1");
    a.add("y", "two words");
    r.section("empty");
    r.section("beta").add("z", "");
    const std::string text = report_to_text(r);
    EXPECT_EQ(text, "[alpha]\nx\t1\ny\ttwo words\n\n[empty]\n\n[beta]\nz\t\n");
    EXPECT_TRUE(parse_report(text) == r);
    EXPECT_THROW(parse_report("x\t1\n"), ParseError);
    EXPECT_THROW(parse_report("[a]\nnotab\n"), ParseError);
}

HarnessConfig small_harness() {
    HarnessConfig cfg;
    cfg.prompt_len = 16;
    cfg.gen_len = 8;
    cfg.snap_window = 8;
    cfg.task_seeds = {0, 1, 2, 3};
    cfg.calibration_seeds = {1000, 1001};
    cfg.policies = {Policy::maskkv, Policy::uniform, Policy::snap, Policy::pyramid, Policy::squeeze, Policy::ada};
    cfg.budgets = {2, 4};
    return cfg;
}

TEST(Compare, ReportIsByteIdenticalAcrossRuns) {
    const HarnessConfig cfg = small_harness();
    const std::string a = report_to_text(compare_report(cfg, run_compare(cfg)));
    const std::string b = report_to_text(compare_report(cfg, run_compare(cfg)));
    EXPECT_EQ(a, b);
    EXPECT_TRUE(parse_report(a) == compare_report(cfg, run_compare(cfg)));
}

TEST(Compare, FullBudgetAgreesEverywhere) {
    HarnessConfig cfg = small_harness();
    cfg.budgets = {cfg.prompt_len};
    const CompareResult res = run_compare(cfg);
    ASSERT_EQ(res.results.size(), cfg.policies.size());
    for (const PolicyResult& pr : res.results) {
        EXPECT_TRUE(pr.keep_all);
        EXPECT_DOUBLE_EQ(pr.agreement, 1.0) << to_string(pr.policy);
        EXPECT_DOUBLE_EQ(pr.needle_accuracy, res.reference_needle_accuracy);
    }
}

TEST(Compare, EmptyPolicyListGivesReferenceOnly) {
    HarnessConfig cfg = small_harness();
    cfg.policies.clear();
    const CompareResult res = run_compare(cfg);
    EXPECT_TRUE(res.results.empty());
    const Report rep = compare_report(cfg, res);
    ASSERT_NE(rep.find("reference"), nullptr);
    for (const auto& s : rep.sections) EXPECT_NE(s.name.rfind("policy", 0), 0u) << s.name;
    EXPECT_EQ(res.reference_responses.size(), cfg.task_seeds.size());
}

TEST(Compare, StatisticsInRange) {
    const HarnessConfig cfg = small_harness();
    const CompareResult res = run_compare(cfg);
    for (const PolicyResult& pr : res.results) {
        EXPECT_GE(pr.agreement, 0.0);
        EXPECT_LE(pr.agreement, 1.0);
        EXPECT_GE(pr.kv_bytes, 0.0);
        EXPECT_LE(pr.kv_bytes, res.reference_kv_bytes);
        EXPECT_EQ(pr.plan.total_head_budget(), pr.budget * cfg.model.num_layers * cfg.model.num_heads)
            << to_string(pr.policy);
    }
    ASSERT_NE(res.find(Policy::maskkv, 2), nullptr);
    EXPECT_EQ(res.find(Policy::maskkv, 3), nullptr);
}

TEST(Compare, ProfileShapeMismatchIsConfigError) {
    HarnessConfig cfg = small_harness();
    CalibrationProfile p;
    p.samples = 1;
    p.layer_importance = {0.5};
    p.head_preference = {{0.5}};
    cfg.profile = p;
    EXPECT_THROW(run_compare(cfg), ConfigError);
    cfg.profile.reset();
    cfg.task_seeds.clear();
    EXPECT_THROW(run_compare(cfg), ConfigError);
}

TEST(Compare, SuppliedProfileIsUsed) {
    HarnessConfig cfg = small_harness();
    cfg.policies = {Policy::maskkv};
    CalibrationProfile p = run_compare(cfg).profile;
    p.source = "given";
    cfg.profile = p;
    EXPECT_EQ(run_compare(cfg).profile.source, "given");
}

}  // namespace
}  // namespace maskkv
