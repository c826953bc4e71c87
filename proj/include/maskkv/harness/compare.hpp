// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "maskkv/budgeting.hpp"
#include "maskkv/common.hpp"
#include "maskkv/decode.hpp"
#include "maskkv/harness/calibration.hpp"
#include "maskkv/harness/memory.hpp"
#include "maskkv/harness/metrics.hpp"
#include "maskkv/harness/needle.hpp"
#include "maskkv/harness/profile_io.hpp"
#include "maskkv/harness/report.hpp"
#include "maskkv/kv_cache.hpp"
#include "maskkv/model.hpp"
#include "maskkv/step_scores.hpp"

namespace maskkv {

/// Model used by the retrieval harness: seeded init plus a residual copy path
/// and sharper attention logits so a planted token can be retrieved at all.
inline ModelConfig harness_model(std::uint64_t seed = 7) {
    ModelConfig c;
    c.seed = seed;
    c.copy_gain = 1.0;
    c.qk_gain = 5.0;
    return c;
}

struct HarnessConfig {
    ModelConfig model = harness_model();
    std::size_t prompt_len = 64;
    std::size_t gen_len = 8;
    RemaskPolicy remask;
    CacheConfig cache;
    std::vector<std::uint64_t> task_seeds;
    std::vector<std::uint64_t> calibration_seeds;
    double alpha = 0.1;
    double beta = 0.4;
    std::vector<std::size_t> boundary_layers;  // empty: first and last layer
    MaskSegment segment = MaskSegment::all;
    std::size_t snap_window = 32;
    BaselineExtras extras;
    std::optional<CalibrationProfile> profile;
    std::vector<Policy> policies;
    std::vector<std::size_t> budgets;  // average prompt KV pairs per head
};

/// Needle depth for a task seed, cycling through 0, 0.1, ..., 1.
inline double needle_depth(std::uint64_t seed) { return static_cast<double>(seed % 11) / 10.0; }

inline std::vector<std::vector<TokenId>> calibration_prompts(const HarnessConfig& cfg, const TaskVocab& vocab) {
    std::vector<std::vector<TokenId>> prompts;
    for (std::uint64_t s : cfg.calibration_seeds) prompts.push_back(needle_task(s, cfg.prompt_len, needle_depth(s), vocab).prompt);
    return prompts;
}

/// Eviction settings for a policy at an average per-head budget. Budgets at
/// or above the prompt length keep everything.
inline EvictionConfig eviction_for(Policy policy, std::size_t budget, const HarnessConfig& cfg,
                                   const CalibrationProfile& profile, RunLog* log = nullptr) {
    const std::size_t layers = cfg.model.num_layers;
    const std::size_t heads = cfg.model.num_heads;
    EvictionConfig ev;
    ev.segment = cfg.segment;
    ev.snap_window = cfg.snap_window;
    ev.selection = policy == Policy::maskkv || policy == Policy::uniform ? Selection::mask_voting : Selection::snap;
    if (budget >= cfg.prompt_len) {
        log_note(log, "budget " + std::to_string(budget) + " >= prompt length, keeping every prompt KV pair");
        ev.plan = BudgetPlan::keep_all(layers, heads, cfg.prompt_len);
        return ev;
    }
    const std::size_t total = budget * layers;
    switch (policy) {
        case Policy::maskkv: {
            BudgetConfig bc;
            bc.total_budget = total;
            bc.alpha = cfg.alpha;
            bc.beta = cfg.beta;
            bc.boundary_layers = cfg.boundary_layers;
            ev.plan = plan_budget(bc, profile, log);
            break;
        }
        case Policy::ada: {
            BaselineExtras extras = cfg.extras;
            ev.planner = [=](const FirstStepSignals& sig) {
                BaselineExtras e = extras;
                e.head_scores.assign(layers, {});
                for (std::size_t l = 0; l < layers; ++l) {
                    for (const ImportanceVector& iv : sig.selection[l]) e.head_scores[l].push_back(iv.scores);
                }
                return baseline_allocate(Policy::ada, total, layers, heads, e);
            };
            break;
        }
        case Policy::squeeze: {
            BaselineExtras extras = cfg.extras;
            extras.layer_importance = profile.layer_importance;
            ev.plan = baseline_allocate(policy, total, layers, heads, extras);
            break;
        }
        default:
            ev.plan = baseline_allocate(policy, total, layers, heads, cfg.extras);
    }
    return ev;
}

/// Mean Spearman correlation of per-head Mask-Voting importance between the
/// first two denoising steps of a cache-free decode; nullopt if undefined.
inline std::optional<double> importance_stability(const ModelParams& params, const std::vector<TokenId>& prompt,
                                                  std::size_t gen_len, const RemaskPolicy& policy) {
    DenoisingState s0 = initial_state(params.config, prompt, gen_len, policy);
    const StepOutput o0 = forward_step(params, s0);
    const ImportanceGrid g0 = mask_voting_grid(o0, s0);
    const DenoisingState s1 = remask(s0, o0.logits, policy);
    if (s1.step == 0) return std::nullopt;
    const StepOutput o1 = forward_step(params, s1);
    const ImportanceGrid g1 = mask_voting_grid(o1, s1);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t l = 0; l < g0.size(); ++l) {
        for (std::size_t h = 0; h < g0[l].size(); ++h) {
            if (const auto r = spearman(g0[l][h].scores, g1[l][h].scores)) {
                sum += *r;
                ++n;
            }
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

struct PolicyResult {
    Policy policy = Policy::maskkv;
    std::size_t budget = 0;
    bool keep_all = false;
    BudgetPlan plan;  // of the first seed (online planners may differ per seed)
    double agreement = 0.0;
    double needle_accuracy = 0.0;
    double retained_mass = 0.0;   // under the policy's own selection importance
    double mask_vote_mass = 0.0;  // under Mask-Voting importance
    double kv_bytes = 0.0;        // modeled prompt+response K/V after eviction
    double peak_bytes = 0.0;
    double prompt_refreshes = 0.0;
    double response_refreshes = 0.0;
    std::vector<std::vector<TokenId>> responses;  // per task seed
};

struct CompareResult {
    CalibrationProfile profile;
    TokenId needle = 0;
    double reference_needle_accuracy = 0.0;
    double reference_kv_bytes = 0.0;
    double reference_peak_bytes = 0.0;
    double reference_prompt_refreshes = 0.0;
    double reference_response_refreshes = 0.0;
    std::optional<double> stability;
    std::vector<std::vector<TokenId>> reference_responses;
    std::vector<PolicyResult> results;
    RunLog log;

    const PolicyResult* find(Policy p, std::size_t budget) const {
        for (const auto& r : results) {
            if (r.policy == p && r.budget == budget) return &r;
        }
        return nullptr;
    }
};

inline CalibrationProfile harness_profile(const HarnessConfig& cfg, const ModelParams& params, const TaskVocab& vocab,
                                          RunLog* log) {
    if (cfg.profile) {
        if (cfg.profile->num_layers() != cfg.model.num_layers || cfg.profile->num_heads() != cfg.model.num_heads) {
            throw ConfigError("profile shape (D=" + std::to_string(cfg.profile->num_layers()) +
                              ", H=" + std::to_string(cfg.profile->num_heads()) + ") does not match the model");
        }
        return *cfg.profile;
    }
    return calibrate(params, calibration_prompts(cfg, vocab), cfg.gen_len, cfg.remask, log);
}

inline CompareResult run_compare(const HarnessConfig& cfg) {
    if (cfg.task_seeds.empty()) throw ConfigError("compare needs at least one task seed");
    const ModelParams params = init_model(cfg.model);
    const TaskVocab vocab = task_vocab(params);
    CompareResult res;
    res.needle = vocab.needle;
    res.profile = harness_profile(cfg, params, vocab, &res.log);
    const double n = static_cast<double>(cfg.task_seeds.size());

    for (Policy p : cfg.policies) {
        for (std::size_t b : cfg.budgets) {
            PolicyResult pr;
            pr.policy = p;
            pr.budget = b;
            pr.keep_all = b >= cfg.prompt_len;
            res.results.push_back(std::move(pr));
        }
    }

    double stability_sum = 0.0;
    std::size_t stability_n = 0;
    bool first_seed = true;
    for (std::uint64_t seed : cfg.task_seeds) {
        const NeedleTask task = needle_task(seed, cfg.prompt_len, needle_depth(seed), vocab);
        const DecodeResult ref = decode(params, task.prompt, cfg.gen_len, cfg.remask, cfg.cache);
        const std::vector<TokenId> ref_response = ref.response();
        res.reference_responses.push_back(ref_response);
        res.reference_needle_accuracy += contains_token(ref_response, task.answer) ? 1.0 / n : 0.0;
        res.reference_kv_bytes += static_cast<double>(ref.cache->final_kv_bytes) / n;
        res.reference_peak_bytes += static_cast<double>(ref.peak_modeled_bytes) / n;
        res.reference_prompt_refreshes += static_cast<double>(ref.cache->prompt_refreshes) / n;
        res.reference_response_refreshes += static_cast<double>(ref.cache->response_refreshes) / n;
        if (const auto s = importance_stability(params, task.prompt, cfg.gen_len, cfg.remask)) {
            stability_sum += *s;
            ++stability_n;
        }

        for (PolicyResult& pr : res.results) {
            const EvictionConfig ev = eviction_for(pr.policy, pr.budget, cfg, res.profile, first_seed ? &res.log : nullptr);
            const DecodeResult r = decode(params, task.prompt, cfg.gen_len, cfg.remask, cfg.cache, ev);
            const std::vector<TokenId> response = r.response();
            if (first_seed) pr.plan = *r.plan;
            pr.agreement += agreement_rate(response, ref_response) / n;
            pr.needle_accuracy += contains_token(response, task.answer) ? 1.0 / n : 0.0;
            pr.retained_mass += r.eviction->mean_retained_mass() / n;
            pr.mask_vote_mass += r.eviction->mean_reference_mass() / n;
            pr.kv_bytes += static_cast<double>(r.eviction->kv_bytes_after) / n;
            pr.peak_bytes += static_cast<double>(r.peak_modeled_bytes) / n;
            pr.prompt_refreshes += static_cast<double>(r.cache->prompt_refreshes) / n;
            pr.response_refreshes += static_cast<double>(r.cache->response_refreshes) / n;
            pr.responses.push_back(response);
        }
        first_seed = false;
    }
    if (stability_n > 0) res.stability = stability_sum / static_cast<double>(stability_n);
    return res;
}

namespace detail {

inline std::string join_tokens(const std::vector<TokenId>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + std::to_string(v[i]);
    return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + std::to_string(v[i]);
    return out;
}

inline std::string f6(double v) { return format_fixed(v, 6); }

}  // namespace detail

inline Report compare_report(const HarnessConfig& cfg, const CompareResult& res) {
    Report rep;
    ReportSection& c = rep.section("config");
    c.add("model_seed", std::to_string(cfg.model.seed));
    c.add("layers", std::to_string(cfg.model.num_layers));
    c.add("heads", std::to_string(cfg.model.num_heads));
    c.add("model_dim", std::to_string(cfg.model.model_dim));
    c.add("vocab_size", std::to_string(cfg.model.vocab_size));
    c.add("copy_gain", format_g(cfg.model.copy_gain, 9));
    c.add("qk_gain", format_g(cfg.model.qk_gain, 9));
    c.add("prompt_len", std::to_string(cfg.prompt_len));
    c.add("gen_len", std::to_string(cfg.gen_len));
    c.add("transfer_ratio", format_g(cfg.remask.transfer_ratio, 9));
    c.add("block_len", std::to_string(cfg.remask.block_length));
    c.add("tp", std::to_string(cfg.cache.prompt_interval));
    c.add("tr", std::to_string(cfg.cache.response_interval));
    c.add("delta", format_g(cfg.cache.shift_threshold, 9));
    c.add("alpha", format_g(cfg.alpha, 9));
    c.add("beta", format_g(cfg.beta, 9));
    c.add("boundary_layers", cfg.boundary_layers.empty() ? "default" : detail::join_sizes(cfg.boundary_layers));
    c.add("mask_segment", std::string(to_string(cfg.segment)));
    c.add("task_seeds", std::to_string(cfg.task_seeds.size()));
    c.add("needle_token", std::to_string(res.needle));

    ReportSection& pf = rep.section("profile");
    pf.add("source", res.profile.source);
    pf.add("samples", std::to_string(res.profile.samples));
    for (std::size_t l = 0; l < res.profile.num_layers(); ++l) {
        pf.add("layer." + std::to_string(l) + ".importance", format_g(res.profile.layer_importance[l], 9));
        std::string heads;
        for (double v : res.profile.head_preference[l]) heads += (heads.empty() ? "" : " ") + format_g(v, 9);
        pf.add("layer." + std::to_string(l) + ".head_preference", heads);
    }

    ReportSection& r = rep.section("reference");
    r.add("needle_accuracy", detail::f6(res.reference_needle_accuracy));
    r.add("kv_bytes", detail::f6(res.reference_kv_bytes));
    r.add("peak_bytes", detail::f6(res.reference_peak_bytes));
    r.add("prompt_refreshes", detail::f6(res.reference_prompt_refreshes));
    r.add("response_refreshes", detail::f6(res.reference_response_refreshes));
    r.add("importance_stability", res.stability ? detail::f6(*res.stability) : "undefined");

    for (const PolicyResult& pr : res.results) {
        ReportSection& s = rep.section("policy " + std::string(to_string(pr.policy)) + " budget " + std::to_string(pr.budget));
        s.add("keep_all", pr.keep_all ? "yes" : "no");
        s.add("layer_budgets", detail::join_sizes(pr.plan.layer_budgets));
        s.add("agreement", detail::f6(pr.agreement));
        s.add("needle_accuracy", detail::f6(pr.needle_accuracy));
        s.add("retained_mass", detail::f6(pr.retained_mass));
        s.add("mask_vote_mass", detail::f6(pr.mask_vote_mass));
        s.add("kv_bytes", detail::f6(pr.kv_bytes));
        s.add("peak_bytes", detail::f6(pr.peak_bytes));
        s.add("prompt_refreshes", detail::f6(pr.prompt_refreshes));
        s.add("response_refreshes", detail::f6(pr.response_refreshes));
    }

    ReportSection& t = rep.section("responses");
    for (std::size_t i = 0; i < cfg.task_seeds.size(); ++i) {
        const std::string seed = "seed." + std::to_string(cfg.task_seeds[i]);
        t.add(seed + ".reference", detail::join_tokens(res.reference_responses[i]));
        for (const PolicyResult& pr : res.results) {
            t.add(seed + "." + std::string(to_string(pr.policy)) + "." + std::to_string(pr.budget),
                  detail::join_tokens(pr.responses[i]));
        }
    }

    ReportSection& lg = rep.section("log");
    for (std::size_t i = 0; i < res.log.entries.size(); ++i) lg.add("note." + std::to_string(i), res.log.entries[i]);
    return rep;
}

}  // namespace maskkv
