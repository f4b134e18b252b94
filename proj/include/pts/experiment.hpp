// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pts/data.hpp"
#include "pts/network.hpp"
#include "pts/search.hpp"
#include "pts/sparsity.hpp"
#include "pts/trainer.hpp"

namespace pts {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A pipeline stage failed; `stage()` names it (teacher, calibration, search, train, eval, report).
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

enum class Method { UniPTS, PotBaseline, ErkDst, UniformDst, OneShot };

std::string to_string(Method method);
Method parse_method(const std::string& name);

/// Environment variable that roots relative output directories.
inline constexpr const char* kOutputRootEnv = "PTS_OUTPUT_ROOT";

struct ExperimentConfig {
    std::string dataset = "synthetic";  // synthetic | idx
    std::string train_images, train_labels, test_images, test_labels;
    std::optional<std::uint64_t> train_images_checksum, train_labels_checksum, test_images_checksum, test_labels_checksum;
    SyntheticSpec synthetic;

    std::string teacher_checkpoint;  // empty: train `preset` from scratch
    std::string preset = "convnet-small";
    std::size_t teacher_epochs = 6;
    double teacher_lr = 0.05;
    double teacher_momentum = 0.9;
    std::size_t teacher_batch = 64;
    std::uint64_t teacher_seed = 1;

    std::size_t calib_size = 1024;
    CalibrationSampling calib_sampling = CalibrationSampling::Balanced;

    std::optional<double> sparsity;
    std::optional<NMPattern> nm;
    Method method = Method::UniPTS;
    std::string distribution = "auto";  // auto | search | erk | uniform | file:<path>
    std::vector<std::size_t> exclude_layers;  // prunable-layer ordinals kept dense
    std::vector<std::uint64_t> seeds{0};
    std::string output_dir = "runs/default";
    bool report_wall_time = false;
    bool oneshot_recalibrate_bn = true;

    TrainConfig train;
    bool objective_set = false;  // train.objective given explicitly
    SearchConfig search;
    bool excessive_set = false;

    /// Output directory with kOutputRootEnv applied to relative paths.
    std::string resolved_output_dir() const;
    double target_sparsity() const;
    std::string method_label() const;
    Objective objective() const;
};

using ConfigMap = std::map<std::string, std::string>;

/// Flat "key = value" lines; '#' starts a comment. Unknown keys and malformed
/// values raise ConfigError.
ConfigMap read_config_file(const std::string& path);
ConfigMap parse_config_text(const std::string& text);
/// "key=value" overrides, applied on top of `base`.
void apply_overrides(ConfigMap& base, const std::vector<std::string>& overrides);
ExperimentConfig build_config(const ConfigMap& map);
/// Every known key with its default value, one per line.
std::string default_config_text();

struct MetricsRow {
    std::string method;
    double target_sparsity = 0.0;
    double realized_sparsity = 0.0;
    double top1 = 0.0;
    std::uint64_t seed = 0;
    double wall_time_s = 0.0;
};

inline constexpr const char* kMetricsHeader = "method,target_sparsity,realized_sparsity,top1,seed,wall_time_s";

void write_metrics_csv(const std::vector<MetricsRow>& rows, std::ostream& out);
std::vector<MetricsRow> read_metrics_csv(const std::string& path);

// Pipeline stages. Each throws StageError tagged with its name.
DatasetSplits load_splits(const ExperimentConfig& cfg);
/// Cross-entropy SGD training of a preset on the full training split.
Network train_teacher(const ExperimentConfig& cfg, const DatasetSplits& splits);
Network prepare_teacher(const ExperimentConfig& cfg, const DatasetSplits& splits);
CalibrationSet make_calibration(const ExperimentConfig& cfg, const DatasetSplits& splits, std::uint64_t seed);

struct DistributionChoice {
    MaskPolicy policy;
    std::optional<SearchResult> search;
};

DistributionChoice choose_distribution(const ExperimentConfig& cfg, const Network& teacher, const CalibrationSet& calib,
                                       std::uint64_t seed);

/// DST / baseline training, or one-shot pruning for Method::OneShot.
TrainResult train_student(const ExperimentConfig& cfg, const Network& teacher, const MaskPolicy& policy,
                          const CalibrationSet& calib, std::uint64_t seed);

MetricsRow evaluate_student(const ExperimentConfig& cfg, const Network& student, const SparseMask& masks,
                            const DatasetSplits& splits, const CalibrationSet& calib, std::uint64_t seed,
                            double wall_time_s);

struct SeedArtifacts {
    MetricsRow row;
    TrainResult training;
    DistributionChoice choice;
};

/// Full pipeline for one seed; writes its artifacts under `<out>/seed_<seed>/`.
SeedArtifacts run_seed(const ExperimentConfig& cfg, const Network& teacher, const DatasetSplits& splits,
                       std::uint64_t seed);

/// Teacher preparation once, then run_seed for every configured seed. Writes
/// `<out>/teacher.ckpt`, `<out>/metrics.csv` and `<out>/timings.csv`.
std::vector<MetricsRow> run_experiment(const ExperimentConfig& cfg);

std::string seed_dir(const ExperimentConfig& cfg, std::uint64_t seed);

/// Rows = methods, columns = target sparsities, cells = median top-1 over seeds.
struct ReportTable {
    std::vector<std::string> methods;
    std::vector<double> targets;
    std::vector<std::vector<std::optional<double>>> cells;

    std::string aligned() const;
    std::string csv() const;
};

ReportTable build_report(const std::vector<MetricsRow>& rows);
ReportTable report(const std::vector<std::string>& run_dirs);

double median(std::vector<double> values);

} // namespace pts
