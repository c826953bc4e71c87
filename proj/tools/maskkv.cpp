// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "maskkv/maskkv.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitInput = 3;

struct Options {
    std::uint64_t seed = 7;
    double alpha = 0.1;
    double beta = 0.4;
    std::vector<std::size_t> budgets;
    std::size_t tp = 50;
    std::size_t tr = 5;
    double delta = 0.5;
    std::vector<std::string> policies;
    std::size_t block_len = 8;
    double transfer_ratio = 0.25;
    std::vector<std::size_t> boundary_layers;
    std::string profile;
    std::string mask_segment = "all";
    std::size_t prompt_len = 64;
    std::size_t gen_len = 8;
    std::size_t num_seeds = 50;
    std::uint64_t first_seed = 0;
    std::size_t calib_seeds = 8;
    std::uint64_t task_seed = 0;
    std::vector<std::string> traces;
    std::string out;
    std::string report_path;
};

void add_model_flags(CLI::App* app, Options& o) {
    app->add_option("--seed", o.seed, "Model weight seed")->capture_default_str();
    app->add_option("--prompt-len", o.prompt_len, "Prompt length of generated tasks")->capture_default_str();
    app->add_option("--gen-len", o.gen_len, "Response length")->capture_default_str();
    app->add_option("--block-len", o.block_len, "Semi-autoregressive block length")->capture_default_str();
    app->add_option("--transfer-ratio", o.transfer_ratio, "Fraction of block masks committed per step")
        ->capture_default_str();
}

void add_eviction_flags(CLI::App* app, Options& o) {
    app->add_option("--alpha", o.alpha, "Head-level uniform rate")->capture_default_str();
    app->add_option("--beta", o.beta, "Layer-level uniform rate")->capture_default_str();
    app->add_option("--budget", o.budgets, "Average prompt KV pairs per head (repeatable)");
    app->add_option("--tp", o.tp, "Prompt refresh interval")->capture_default_str();
    app->add_option("--tr", o.tr, "Response refresh interval")->capture_default_str();
    app->add_option("--delta", o.delta, "Value-shift refresh threshold")->capture_default_str();
    app->add_option("--policy", o.policies, "maskkv, uniform, snap, pyramid, squeeze or ada (repeatable)");
    app->add_option("--boundary-layers", o.boundary_layers, "Boundary layer indices (default: first and last)");
    app->add_option("--profile", o.profile, "Calibration profile file (default: calibrate from seeds)");
    app->add_option("--mask-segment", o.mask_segment, "Mask rows that vote: all, front, middle or back")
        ->capture_default_str();
    app->add_option("--calib-seeds", o.calib_seeds, "Calibration prompts when no profile is given")
        ->capture_default_str();
}

void check_rate(double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) {
        throw maskkv::ConfigError(std::string(name) + " must lie in [0, 1]");
    }
}

maskkv::HarnessConfig harness_config(const Options& o) {
    check_rate(o.alpha, "alpha");
    check_rate(o.beta, "beta");
    maskkv::HarnessConfig c;
    c.model = maskkv::harness_model(o.seed);
    c.model.validate();
    if (o.prompt_len == 0) throw maskkv::ConfigError("prompt length must be positive");
    if (o.gen_len == 0) throw maskkv::ConfigError("response length must be positive");
    c.prompt_len = o.prompt_len;
    c.gen_len = o.gen_len;
    c.remask.block_length = o.block_len;
    c.remask.transfer_ratio = o.transfer_ratio;
    c.remask.validate();
    c.cache.prompt_interval = o.tp;
    c.cache.response_interval = o.tr;
    c.cache.shift_threshold = o.delta;
    c.cache.validate();
    c.alpha = o.alpha;
    c.beta = o.beta;
    for (std::size_t l : o.boundary_layers) {
        if (l >= c.model.num_layers) throw maskkv::ConfigError("boundary layer " + std::to_string(l) + " outside the model");
    }
    c.boundary_layers = o.boundary_layers;
    c.segment = maskkv::parse_mask_segment(o.mask_segment);
    for (const auto& p : o.policies) c.policies.push_back(maskkv::parse_policy(p));
    c.budgets = o.budgets;
    for (std::size_t i = 0; i < o.calib_seeds; ++i) c.calibration_seeds.push_back(1000 + i);
    for (std::size_t i = 0; i < o.num_seeds; ++i) c.task_seeds.push_back(o.first_seed + i);
    if (!o.profile.empty()) c.profile = maskkv::load_profile(o.profile);
    return c;
}

void emit(const std::string& text, const std::string& path) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out || !(out << text)) throw maskkv::InputError("cannot write '" + path + "'");
}

int run_calibrate(const Options& o) {
    maskkv::CalibrationProfile profile;
    if (!o.traces.empty()) {
        std::vector<maskkv::AttentionTrace> traces;
        for (const auto& path : o.traces) {
            try {
                traces.push_back(maskkv::load_trace(path));
            } catch (const maskkv::ParseError&) {
                std::cerr << path << ": ";
                throw;
            }
        }
        profile = maskkv::calibrate(traces);
    } else {
        maskkv::HarnessConfig c = harness_config(o);
        if (o.calib_seeds == 0) throw maskkv::ConfigError("calibration needs at least one seed");
        const maskkv::ModelParams params = maskkv::init_model(c.model);
        profile = maskkv::calibrate(params, maskkv::calibration_prompts(c, maskkv::task_vocab(params)), c.gen_len,
                                    c.remask);
    }
    emit(maskkv::profile_to_text(profile), o.out);
    return 0;
}

int run_decode(const Options& o) {
    maskkv::HarnessConfig c = harness_config(o);
    if (c.policies.size() > 1 || c.budgets.size() > 1) {
        throw maskkv::ConfigError("decode takes at most one --policy and one --budget");
    }
    const maskkv::ModelParams params = maskkv::init_model(c.model);
    const maskkv::TaskVocab vocab = maskkv::task_vocab(params);
    const maskkv::NeedleTask task = maskkv::needle_task(o.task_seed, c.prompt_len, maskkv::needle_depth(o.task_seed), vocab);

    std::optional<maskkv::EvictionConfig> ev;
    maskkv::RunLog log;
    const maskkv::Policy policy = c.policies.empty() ? maskkv::Policy::maskkv : c.policies.front();
    if (!c.budgets.empty()) {
        const maskkv::CalibrationProfile profile = maskkv::harness_profile(c, params, vocab, &log);
        ev = maskkv::eviction_for(policy, c.budgets.front(), c, profile, &log);
    }
    const maskkv::DecodeResult r = maskkv::decode(params, task.prompt, c.gen_len, c.remask, c.cache, ev);

    maskkv::Report rep;
    auto& s = rep.section("decode");
    s.add("task_seed", std::to_string(o.task_seed));
    s.add("needle_token", std::to_string(task.answer));
    s.add("needle_position", std::to_string(task.needle_pos));
    s.add("policy", ev ? std::string(maskkv::to_string(policy)) : "full");
    s.add("budget", ev ? std::to_string(c.budgets.front()) : "all");
    s.add("prompt", maskkv::detail::join_tokens(task.prompt));
    s.add("response", maskkv::detail::join_tokens(r.response()));
    s.add("needle_found", maskkv::contains_token(r.response(), task.answer) ? "yes" : "no");
    s.add("steps", std::to_string(r.steps.size()));
    s.add("prompt_refreshes", std::to_string(r.cache->prompt_refreshes));
    s.add("response_refreshes", std::to_string(r.cache->response_refreshes));
    s.add("final_kv_bytes", std::to_string(r.cache->final_kv_bytes));
    s.add("peak_bytes", std::to_string(r.peak_modeled_bytes));
    if (r.plan) {
        auto& p = rep.section("plan");
        p.add("layer_budgets", maskkv::detail::join_sizes(r.plan->layer_budgets));
        for (std::size_t l = 0; l < r.plan->head_budgets.size(); ++l) {
            p.add("layer." + std::to_string(l) + ".heads", maskkv::detail::join_sizes(r.plan->head_budgets[l]));
        }
        p.add("retained_mass", maskkv::detail::f6(r.eviction->mean_retained_mass()));
        p.add("mask_vote_mass", maskkv::detail::f6(r.eviction->mean_reference_mass()));
        p.add("kv_bytes_before", std::to_string(r.eviction->kv_bytes_before));
        p.add("kv_bytes_after", std::to_string(r.eviction->kv_bytes_after));
    }
    auto& lg = rep.section("log");
    std::vector<std::string> notes = log.entries;
    notes.insert(notes.end(), r.log.entries.begin(), r.log.entries.end());
    for (std::size_t i = 0; i < notes.size(); ++i) lg.add("note." + std::to_string(i), notes[i]);
    emit(maskkv::report_to_text(rep), o.out);
    return 0;
}

int run_compare_cmd(const Options& o) {
    const maskkv::HarnessConfig c = harness_config(o);
    if (!c.policies.empty() && c.budgets.empty()) throw maskkv::ConfigError("compare needs at least one --budget");
    const maskkv::CompareResult res = maskkv::run_compare(c);
    emit(maskkv::report_to_text(maskkv::compare_report(c, res)), o.out);
    return 0;
}

int run_trace_dump(const Options& o) {
    const maskkv::HarnessConfig c = harness_config(o);
    const maskkv::ModelParams params = maskkv::init_model(c.model);
    const maskkv::NeedleTask task =
        maskkv::needle_task(o.task_seed, c.prompt_len, maskkv::needle_depth(o.task_seed), maskkv::task_vocab(params));
    maskkv::AttentionTrace t = maskkv::capture_trace(params, task.prompt, c.gen_len, c.remask);
    t.manifest["source"] = "toy-model";
    t.manifest["task_seed"] = std::to_string(o.task_seed);
    maskkv::save_trace(t, o.out);
    std::cout << "wrote " << o.out << " (D=" << t.dims.layers << " H=" << t.dims.heads << " n_p=" << t.dims.prompt_len
              << " n_m=" << t.dims.mask_len << " d_k=" << t.dims.head_dim << ")\n";
    return 0;
}

int run_report(const Options& o) {
    std::ifstream in(o.report_path);
    if (!in) throw maskkv::InputError("cannot open '" + o.report_path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    std::cout << maskkv::pretty_report(maskkv::parse_report(ss.str()));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache eviction for a toy masked diffusion language model"};
    app.require_subcommand(1);
    Options o;

    auto* calibrate = app.add_subcommand("calibrate", "Build a calibration profile from seeds or trace files");
    add_model_flags(calibrate, o);
    add_eviction_flags(calibrate, o);
    calibrate->add_option("--trace", o.traces, "Trace file (repeatable); replaces seeded calibration");
    calibrate->add_option("--out", o.out, "Profile output path (default: stdout)");

    auto* decode = app.add_subcommand("decode", "Decode one needle task");
    add_model_flags(decode, o);
    add_eviction_flags(decode, o);
    decode->add_option("--task-seed", o.task_seed, "Needle task seed")->capture_default_str();
    decode->add_option("--out", o.out, "Report output path (default: stdout)");

    auto* compare = app.add_subcommand("compare", "Sweep policies and budgets against the full cache");
    add_model_flags(compare, o);
    add_eviction_flags(compare, o);
    compare->add_option("--seeds", o.num_seeds, "Number of task seeds")->capture_default_str();
    compare->add_option("--first-seed", o.first_seed, "First task seed")->capture_default_str();
    compare->add_option("--out", o.out, "Report output path (default: stdout)");

    auto* dump = app.add_subcommand("trace-dump", "Write the first-step attention trace of a needle task");
    add_model_flags(dump, o);
    dump->add_option("--task-seed", o.task_seed, "Needle task seed")->capture_default_str();
    dump->add_option("--out", o.out, "Trace output path")->required();

    auto* report = app.add_subcommand("report", "Pretty-print a report file");
    report->add_option("file", o.report_path, "Report file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*calibrate) return run_calibrate(o);
        if (*decode) return run_decode(o);
        if (*compare) return run_compare_cmd(o);
        if (*dump) return run_trace_dump(o);
        return run_report(o);
    } catch (const maskkv::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const maskkv::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kExitInput;
    } catch (const maskkv::InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitInput;
    } catch (const maskkv::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
