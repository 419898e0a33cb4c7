#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mera/clmethods.hpp"
#include "mera/error.hpp"
#include "mera/harness.hpp"
#include "mera/metrics.hpp"

namespace fs = std::filesystem;

namespace mera {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Every config key doubles as a flag, so a run is reproducible from either
// a file, a command line, or any mix with the command line winning.
struct OverrideSet {
    std::map<std::string, std::string> values;
    std::vector<std::pair<std::string, CLI::Option*>> opts;

    void attach(CLI::App* sub, const std::set<std::string>& exclude = {}) {
        for (const auto& [key, def] : config_echo(default_config())) {
            (void)def;
            if (exclude.count(key)) continue;
            auto& slot = values[key];
            opts.push_back({key, sub->add_option("--" + key, slot, "config key " + key)
                                     ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)});
        }
    }

    void apply(RunConfig& cfg) const {
        for (const auto& [key, opt] : opts)
            if (opt->count() > 0) apply_override(cfg, key, values.at(key));
    }
};

RunConfig load_config(const std::string& config_path, const OverrideSet& overrides) {
    RunConfig cfg = config_path.empty() ? default_config() : parse_config_file(config_path);
    overrides.apply(cfg);
    return cfg;
}

std::vector<const ModalityDataset*> history_view(const std::vector<ModalityDataset>& data,
                                                 int stages) {
    std::vector<const ModalityDataset*> h;
    for (int i = 0; i < stages; ++i) h.push_back(&data[static_cast<std::size_t>(i)]);
    return h;
}

int cmd_run(const RunConfig& cfg) {
    auto result = run_experiment(cfg);
    std::cout << "bw_mean=" << fmt_double(result.report.bw_mean)
              << " bw_std=" << fmt_double(result.report.bw_std)
              << " fw_mean=" << fmt_double(result.report.fw_mean)
              << " fw_std=" << fmt_double(result.report.fw_std) << '\n'
              << "artifacts: " << cfg.out_dir << '\n';
    return 0;
}

int cmd_experts(const RunConfig& cfg) {
    validate_config(cfg);
    auto data = build_datasets(cfg);
    auto scores = ensure_experts(cfg, data);
    for (const auto& [mod, tasks] : scores)
        for (const auto& [task, score] : tasks)
            std::cout << mod << ',' << task << ',' << fmt_double(score) << '\n';
    std::cout << "experts: " << cfg.resolved_experts_dir() << '\n';
    return 0;
}

int cmd_merge(const std::string& prev_path, const std::string& vanilla_path, int stage,
              const std::string& out_path) {
    auto prev = load_checkpoint(prev_path);
    auto vanilla = load_checkpoint(vanilla_path);
    MergeRecord rec;
    auto merged = merge(prev.model, vanilla.model, stage, &rec);
    nlohmann::json meta;
    meta["role"] = "merged";
    meta["merge"] = {{"stage", rec.stage},
                     {"keep_coeff", rec.keep_coeff},
                     {"new_coeff", rec.new_coeff},
                     {"prev", prev_path},
                     {"vanilla", vanilla_path}};
    save_checkpoint(merged, meta, out_path);
    std::cout << "merged stage " << stage << ": keep=" << fmt_double(rec.keep_coeff)
              << " new=" << fmt_double(rec.new_coeff) << " -> " << out_path << '\n';
    return 0;
}

int cmd_realign(const RunConfig& cfg, const std::string& ckpt_path, int stage,
                const std::string& out_path) {
    validate_config(cfg);
    auto order = resolve_order(cfg);
    if (stage < 1 || stage > static_cast<int>(order.size()))
        throw ConfigError("realign stage " + std::to_string(stage) +
                          " is outside the configured order");
    auto data = build_datasets(cfg);
    auto ckpt = load_checkpoint(ckpt_path);
    auto ctx = stage_context(cfg, stage);
    auto replay = stage_replay(history_view(data, stage), ctx, true);
    auto out = realign(ckpt.model, replay, ctx);
    nlohmann::json meta;
    meta["role"] = "realigned";
    meta["stage"] = stage;
    meta["source"] = ckpt_path;
    meta["replay_items"] = replay.items.size();
    save_checkpoint(out, meta, out_path);
    std::cout << "realigned stage " << stage << " over " << replay.items.size()
              << " replay items -> " << out_path << '\n';
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt_path, const std::string& mods_arg,
             const std::string& out_path) {
    auto ckpt = load_checkpoint(ckpt_path);
    std::vector<std::string> mods;
    if (mods_arg.empty()) {
        for (const auto& info : ckpt.model.modalities) mods.push_back(info.id);
    } else {
        std::string cur;
        std::stringstream ss(mods_arg);
        while (std::getline(ss, cur, ','))
            if (!cur.empty()) mods.push_back(cur);
    }
    if (mods.empty()) throw ArgumentError("no modalities to evaluate");

    std::string csv = "modality,task,score\n";
    for (const auto& mod : mods) {
        if (!has_modality(ckpt.model, mod))
            throw ArgumentError("checkpoint has no modality '" + mod + "'");
        bool on_roster = false;
        for (const auto& s : cfg.roster) on_roster = on_roster || s.id == mod;
        if (!on_roster) throw ConfigError("config roster has no modality '" + mod + "'");
        RunConfig one = cfg;
        one.order = mod;
        auto ds = build_datasets(one).front();
        for (const auto& t : ds.tasks)
            csv += mod + "," + t.task + "," +
                   fmt_double(score_accuracy(ckpt.model, mod, t.task, t.test)) + "\n";
    }
    std::cout << csv;
    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::trunc);
        if (!out) throw Error("cannot open '" + out_path + "' for writing");
        out << csv;
    }
    return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    std::string summary = "run,stages,bw_mean,bw_std,fw_mean,fw_std\n";
    std::string curves = "run,stage,bw_rg,fw_rg\n";
    for (const auto& dir : run_dirs) {
        auto result = recompute_from_csv(dir);
        auto label = fs::path(dir).filename().string();
        if (label.empty()) label = dir;
        summary += label + "," + std::to_string(result.order.size()) + "," +
                   fmt_double(result.report.bw_mean) + "," + fmt_double(result.report.bw_std) +
                   "," + fmt_double(result.report.fw_mean) + "," +
                   fmt_double(result.report.fw_std) + "\n";
        for (std::size_t i = 0; i < result.report.bw.size(); ++i)
            curves += label + "," + std::to_string(i + 1) + "," +
                      fmt_double(result.report.bw[i]) + "," + fmt_double(result.report.fw[i]) +
                      "\n";
    }
    if (out_dir.empty()) {
        std::cout << summary << curves;
    } else {
        fs::create_directories(out_dir);
        for (auto [name, text] :
             {std::pair{std::string("report_summary.csv"), summary},
              std::pair{std::string("report_curves.csv"), curves}}) {
            auto path = out_dir + "/" + name;
            std::ofstream out(path, std::ios::trunc);
            if (!out) throw Error("cannot open '" + path + "' for writing");
            out << text;
        }
        std::cout << "report: " << out_dir << '\n';
    }
    return 0;
}

} // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"meralab: a desk-scale lab for modality-incremental continual learning"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "execute a full continual run from a config");
    std::string run_config;
    run->add_option("--config", run_config, "config file of key = value lines");
    OverrideSet run_over;
    run_over.attach(run);

    auto* experts = app.add_subcommand("experts", "train and cache the expert reference models");
    std::string experts_config;
    experts->add_option("--config", experts_config, "config file of key = value lines");
    OverrideSet experts_over;
    experts_over.attach(experts);

    auto* merge_cmd = app.add_subcommand("merge", "merge two checkpoints with stage-indexed coefficients");
    std::string merge_prev, merge_vanilla, merge_out;
    int merge_stage = 0;
    merge_cmd->add_option("--prev", merge_prev, "previous-stage checkpoint")->required();
    merge_cmd->add_option("--vanilla", merge_vanilla, "freshly trained checkpoint")->required();
    merge_cmd->add_option("--stage", merge_stage, "1-based stage index")->required();
    merge_cmd->add_option("--out", merge_out, "output checkpoint path")->required();

    auto* realign_cmd = app.add_subcommand("realign", "realign a checkpoint's connectors on a replay mix");
    std::string realign_config, realign_ckpt, realign_out;
    int realign_stage = 0;
    realign_cmd->add_option("--config", realign_config, "config file of key = value lines");
    realign_cmd->add_option("--checkpoint", realign_ckpt, "checkpoint to realign")->required();
    realign_cmd->add_option("--stage", realign_stage, "1-based stage index")->required();
    realign_cmd->add_option("--out", realign_out, "output checkpoint path")->required();
    OverrideSet realign_over;
    realign_over.attach(realign_cmd, {"out", "experts.dir"});

    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on modality test splits");
    std::string eval_config, eval_ckpt, eval_mods, eval_out;
    eval_cmd->add_option("--config", eval_config, "config file of key = value lines");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint to score")->required();
    eval_cmd->add_option("--modalities", eval_mods, "comma-separated ids; default: all on the checkpoint");
    eval_cmd->add_option("--out", eval_out, "also write the CSV here");
    OverrideSet eval_over;
    eval_over.attach(eval_cmd, {"out", "experts.dir"});

    auto* report_cmd = app.add_subcommand("report", "summarize run directories from their raw scores");
    std::vector<std::string> report_dirs;
    std::string report_out;
    report_cmd->add_option("dirs", report_dirs, "run directories holding scores.csv")
        ->required()
        ->expected(-1);
    report_cmd->add_option("--out", report_out, "write report CSVs into this directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (run->parsed()) return cmd_run(load_config(run_config, run_over));
        if (experts->parsed()) return cmd_experts(load_config(experts_config, experts_over));
        if (merge_cmd->parsed())
            return cmd_merge(merge_prev, merge_vanilla, merge_stage, merge_out);
        if (realign_cmd->parsed())
            return cmd_realign(load_config(realign_config, realign_over), realign_ckpt,
                               realign_stage, realign_out);
        if (eval_cmd->parsed())
            return cmd_eval(load_config(eval_config, eval_over), eval_ckpt, eval_mods, eval_out);
        if (report_cmd->parsed()) return cmd_report(report_dirs, report_out);
    } catch (const Error& e) {
        std::cerr << "meralab: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "meralab: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

} // namespace mera
