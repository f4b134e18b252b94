// SPDX-License-Identifier: Apache-2.0
//
// ptsctl: post-training sparsity pipeline driver.
//
//   ptsctl run     --config exp.cfg [--override key=value]...
//   ptsctl teacher --config exp.cfg
//   ptsctl search  --config exp.cfg --seed 0
//   ptsctl train   --config exp.cfg --seed 0
//   ptsctl prune   --config exp.cfg --seed 0
//   ptsctl eval    --config exp.cfg --seed 0
//   ptsctl report  runs/a runs/b [--csv table.csv]
//
// Exit codes: 0 success, 1 configuration error, 2 stage failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "pts/checkpoint.hpp"
#include "pts/experiment.hpp"

namespace fs = std::filesystem;
using namespace pts;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
};

ExperimentConfig load(const Common& c) {
    ConfigMap map = c.config.empty() ? ConfigMap{} : read_config_file(c.config);
    apply_overrides(map, c.overrides);
    return build_config(map);
}

std::string teacher_path(const ExperimentConfig& cfg) { return cfg.resolved_output_dir() + "/teacher.ckpt"; }

// Later stages reuse the teacher written by `ptsctl teacher` when present.
Network stage_teacher(ExperimentConfig& cfg, const DatasetSplits& splits) {
    if (cfg.teacher_checkpoint.empty() && fs::exists(teacher_path(cfg))) cfg.teacher_checkpoint = teacher_path(cfg);
    return prepare_teacher(cfg, splits);
}

void ensure(const std::string& dir) { fs::create_directories(dir); }

int cmd_teacher(const Common& c) {
    ExperimentConfig cfg = load(c);
    const DatasetSplits splits = load_splits(cfg);
    const Network teacher = prepare_teacher(cfg, splits);
    ensure(cfg.resolved_output_dir());
    save_network(teacher, teacher_path(cfg));
    const double acc = accuracy(predict_logits(teacher, to_labeled(splits.test).inputs), to_labeled(splits.test).labels);
    std::cout << "teacher " << teacher_path(cfg) << " test top1 " << acc << "\n";
    return 0;
}

int cmd_search(const Common& c) {
    ExperimentConfig cfg = load(c);
    const DatasetSplits splits = load_splits(cfg);
    const Network teacher = stage_teacher(cfg, splits);
    const CalibrationSet calib = make_calibration(cfg, splits, c.seed);
    if (cfg.distribution == "auto") cfg.distribution = "search";
    const DistributionChoice choice = choose_distribution(cfg, teacher, calib, c.seed);
    const std::string dir = seed_dir(cfg, c.seed);
    ensure(dir);
    save_distribution(teacher, choice.policy.distribution, dir + "/distribution.txt");
    if (choice.search) {
        std::ofstream log(dir + "/search_log.txt");
        write_search_log(*choice.search, log);
        std::cout << "best calibration fitness " << choice.search->best.fitness << "\n";
    }
    std::cout << distribution_summary(teacher, choice.policy.distribution);
    return 0;
}

int cmd_train(const Common& c, bool one_shot) {
    ExperimentConfig cfg = load(c);
    if (one_shot) cfg.method = Method::OneShot;
    const DatasetSplits splits = load_splits(cfg);
    const Network teacher = stage_teacher(cfg, splits);
    const CalibrationSet calib = make_calibration(cfg, splits, c.seed);
    const std::string dir = seed_dir(cfg, c.seed);
    if (cfg.distribution == "auto" && fs::exists(dir + "/distribution.txt") && !cfg.nm)
        cfg.distribution = "file:" + dir + "/distribution.txt";
    const DistributionChoice choice = choose_distribution(cfg, teacher, calib, c.seed);
    const TrainResult r = train_student(cfg, teacher, choice.policy, calib, c.seed);
    ensure(dir);
    save_network(r.student, dir + "/student.ckpt");
    save_masks(r.student, r.masks, dir + "/masks");
    save_distribution(teacher, choice.policy.distribution, dir + "/distribution.txt");
    std::ofstream tm(dir + "/train_metrics.csv");
    write_train_metrics(r.history, tm);
    std::cout << "student " << dir << "/student.ckpt sparsity " << global_sparsity(r.student, r.masks) << "\n";
    return 0;
}

int cmd_eval(const Common& c) {
    ExperimentConfig cfg = load(c);
    const DatasetSplits splits = load_splits(cfg);
    const std::string dir = seed_dir(cfg, c.seed);
    const Network student = load_network(dir + "/student.ckpt");
    const SparseMask masks = load_masks(dir + "/masks");
    const CalibrationSet calib = make_calibration(cfg, splits, c.seed);
    const MetricsRow row = evaluate_student(cfg, student, masks, splits, calib, c.seed, 0.0);
    std::ofstream mc(dir + "/metrics.csv");
    write_metrics_csv({row}, mc);
    write_metrics_csv({row}, std::cout);
    return 0;
}

int cmd_run(const Common& c) {
    const ExperimentConfig cfg = load(c);
    const auto rows = run_experiment(cfg);
    write_metrics_csv(rows, std::cout);
    return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& csv_path) {
    const ReportTable table = report(dirs);
    std::cout << table.aligned();
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        out << table.csv();
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Post-training sparsity toolkit"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub, bool with_seed) {
        sub->add_option("-c,--config", common.config, "Experiment config file (key = value lines)");
        sub->add_option("-o,--override", common.overrides, "Override a config key: key=value");
        if (with_seed) sub->add_option("-s,--seed", common.seed, "Run seed");
    };
    auto* run = app.add_subcommand("run", "Teacher, distribution, training and evaluation for every seed");
    add_common(run, false);
    auto* teacher = app.add_subcommand("teacher", "Train or load the dense teacher");
    add_common(teacher, false);
    auto* search = app.add_subcommand("search", "Evolutionary sparsity-distribution search");
    add_common(search, true);
    auto* train = app.add_subcommand("train", "Sparse training against the frozen teacher");
    add_common(train, true);
    auto* prune = app.add_subcommand("prune", "One-shot magnitude pruning without training");
    add_common(prune, true);
    auto* eval = app.add_subcommand("eval", "Evaluate a trained student on the test split");
    add_common(eval, true);
    auto* defaults = app.add_subcommand("defaults", "Print every config key with its default");
    std::vector<std::string> report_dirs;
    std::string report_csv;
    auto* rep = app.add_subcommand("report", "Median top-1 table over run directories");
    rep->add_option("dirs", report_dirs, "Run directories holding metrics.csv")->required();
    rep->add_option("--csv", report_csv, "Also write the table as CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*run) return cmd_run(common);
        if (*teacher) return cmd_teacher(common);
        if (*search) return cmd_search(common);
        if (*train) return cmd_train(common, false);
        if (*prune) return cmd_train(common, true);
        if (*eval) return cmd_eval(common);
        if (*rep) return cmd_report(report_dirs, report_csv);
        if (*defaults) {
            std::cout << default_config_text();
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
