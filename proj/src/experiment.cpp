// SPDX-License-Identifier: Apache-2.0
#include "pts/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include "pts/checkpoint.hpp"

namespace pts {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] != '-') {
            const unsigned long long u = std::stoull(v, &used, 0);
            if (used == v.size()) return u;
        }
    } catch (const std::exception&) {
    }
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, ',');)
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

std::optional<std::uint64_t> to_checksum(const std::string& key, const std::string& v) {
    if (v.empty()) return std::nullopt;
    return to_uint(key, v);
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

struct KeySpec {
    const char* key;
    const char* fallback;
    Setter set;
};

const std::vector<KeySpec>& key_table() {
    static const std::vector<KeySpec> table = {
        {"dataset", "synthetic", [](auto& c, auto& k, auto& v) {
             if (v != "synthetic" && v != "idx") throw ConfigError("config: '" + k + "' must be synthetic or idx");
             c.dataset = v;
         }},
        {"idx.train_images", "", [](auto& c, auto&, auto& v) { c.train_images = v; }},
        {"idx.train_labels", "", [](auto& c, auto&, auto& v) { c.train_labels = v; }},
        {"idx.test_images", "", [](auto& c, auto&, auto& v) { c.test_images = v; }},
        {"idx.test_labels", "", [](auto& c, auto&, auto& v) { c.test_labels = v; }},
        {"idx.train_images_checksum", "", [](auto& c, auto& k, auto& v) { c.train_images_checksum = to_checksum(k, v); }},
        {"idx.train_labels_checksum", "", [](auto& c, auto& k, auto& v) { c.train_labels_checksum = to_checksum(k, v); }},
        {"idx.test_images_checksum", "", [](auto& c, auto& k, auto& v) { c.test_images_checksum = to_checksum(k, v); }},
        {"idx.test_labels_checksum", "", [](auto& c, auto& k, auto& v) { c.test_labels_checksum = to_checksum(k, v); }},
        {"synthetic.classes", "10", [](auto& c, auto& k, auto& v) { c.synthetic.classes = to_uint(k, v); }},
        {"synthetic.height", "16", [](auto& c, auto& k, auto& v) { c.synthetic.height = to_uint(k, v); }},
        {"synthetic.width", "16", [](auto& c, auto& k, auto& v) { c.synthetic.width = to_uint(k, v); }},
        {"synthetic.train", "6000", [](auto& c, auto& k, auto& v) { c.synthetic.train = to_uint(k, v); }},
        {"synthetic.test", "2000", [](auto& c, auto& k, auto& v) { c.synthetic.test = to_uint(k, v); }},
        {"synthetic.blobs", "3", [](auto& c, auto& k, auto& v) { c.synthetic.blobs = to_uint(k, v); }},
        {"synthetic.noise", "0.25", [](auto& c, auto& k, auto& v) { c.synthetic.noise = to_double(k, v); }},
        {"synthetic.jitter", "2", [](auto& c, auto& k, auto& v) { c.synthetic.jitter = static_cast<int>(to_uint(k, v)); }},
        {"synthetic.seed", "7", [](auto& c, auto& k, auto& v) { c.synthetic.seed = to_uint(k, v); }},
        {"teacher.checkpoint", "", [](auto& c, auto&, auto& v) { c.teacher_checkpoint = v; }},
        {"teacher.preset", "convnet-small", [](auto& c, auto& k, auto& v) {
             if (v != "mlp3" && v != "convnet-small") throw ConfigError("config: '" + k + "' must be mlp3 or convnet-small");
             c.preset = v;
         }},
        {"teacher.epochs", "6", [](auto& c, auto& k, auto& v) { c.teacher_epochs = to_uint(k, v); }},
        {"teacher.lr", "0.05", [](auto& c, auto& k, auto& v) { c.teacher_lr = to_double(k, v); }},
        {"teacher.momentum", "0.9", [](auto& c, auto& k, auto& v) { c.teacher_momentum = to_double(k, v); }},
        {"teacher.batch_size", "64", [](auto& c, auto& k, auto& v) { c.teacher_batch = to_uint(k, v); }},
        {"teacher.seed", "1", [](auto& c, auto& k, auto& v) { c.teacher_seed = to_uint(k, v); }},
        {"calib.size", "1024", [](auto& c, auto& k, auto& v) { c.calib_size = to_uint(k, v); }},
        {"calib.sampling", "balanced", [](auto& c, auto& k, auto& v) {
             if (v == "balanced") c.calib_sampling = CalibrationSampling::Balanced;
             else if (v == "uniform") c.calib_sampling = CalibrationSampling::Uniform;
             else throw ConfigError("config: '" + k + "' must be balanced or uniform");
         }},
        {"sparsity", "0.9", [](auto& c, auto& k, auto& v) {
             if (v.empty()) c.sparsity.reset();
             else c.sparsity = to_double(k, v);
         }},
        {"nm", "", [](auto& c, auto& k, auto& v) {
             if (v.empty()) {
                 c.nm.reset();
                 return;
             }
             try {
                 c.nm = NMPattern::parse(v);
             } catch (const std::invalid_argument& e) {
                 throw ConfigError("config: '" + k + "': " + e.what());
             }
         }},
        {"method", "unipts", [](auto& c, auto& k, auto& v) {
             try {
                 c.method = parse_method(v);
             } catch (const std::invalid_argument& e) {
                 throw ConfigError("config: '" + k + "': " + e.what());
             }
         }},
        {"distribution", "auto", [](auto& c, auto& k, auto& v) {
             if (v != "auto" && v != "search" && v != "erk" && v != "uniform" && v.rfind("file:", 0) != 0)
                 throw ConfigError("config: '" + k + "' must be auto, search, erk, uniform or file:<path>");
             c.distribution = v;
         }},
        {"exclude_layers", "", [](auto& c, auto& k, auto& v) {
             c.exclude_layers.clear();
             for (const auto& item : split_list(v)) c.exclude_layers.push_back(to_uint(k, item));
         }},
        {"seeds", "0", [](auto& c, auto& k, auto& v) {
             c.seeds.clear();
             for (const auto& item : split_list(v)) c.seeds.push_back(to_uint(k, item));
             if (c.seeds.empty()) throw ConfigError("config: '" + k + "' needs at least one seed");
         }},
        {"output_dir", "runs/default", [](auto& c, auto&, auto& v) { c.output_dir = v; }},
        {"report_wall_time", "false", [](auto& c, auto& k, auto& v) { c.report_wall_time = to_bool(k, v); }},
        {"oneshot.recalibrate_bn", "true", [](auto& c, auto& k, auto& v) { c.oneshot_recalibrate_bn = to_bool(k, v); }},
        {"train.iterations", "16000", [](auto& c, auto& k, auto& v) { c.train.iterations = to_uint(k, v); }},
        {"train.batch_size", "64", [](auto& c, auto& k, auto& v) { c.train.batch_size = to_uint(k, v); }},
        {"train.lr", "0.01", [](auto& c, auto& k, auto& v) { c.train.lr = to_double(k, v); }},
        {"train.alpha", "3e-5", [](auto& c, auto& k, auto& v) { c.train.alpha = to_double(k, v); }},
        {"train.weight_decay", "1e-4", [](auto& c, auto& k, auto& v) { c.train.weight_decay = to_double(k, v); }},
        {"train.momentum", "0", [](auto& c, auto& k, auto& v) { c.train.momentum = to_double(k, v); }},
        {"train.delta_t", "1", [](auto& c, auto& k, auto& v) { c.train.delta_t = to_uint(k, v); }},
        {"train.gamma", "0.99", [](auto& c, auto& k, auto& v) { c.train.decay.gamma = to_double(k, v); }},
        {"train.decay_unit", "epoch", [](auto& c, auto& k, auto& v) {
             if (v == "epoch") c.train.decay.unit = DecayUnit::Epoch;
             else if (v == "iteration") c.train.decay.unit = DecayUnit::Iteration;
             else throw ConfigError("config: '" + k + "' must be epoch or iteration");
         }},
        {"train.decay_clamp", "0.05", [](auto& c, auto& k, auto& v) { c.train.decay.min_denominator = to_double(k, v); }},
        {"train.objective", "", [](auto& c, auto& k, auto& v) {
             if (v.empty()) {
                 c.objective_set = false;
                 return;
             }
             try {
                 c.train.objective = parse_objective(v);
                 c.objective_set = true;
             } catch (const std::invalid_argument& e) {
                 throw ConfigError("config: '" + k + "': " + e.what());
             }
         }},
        {"train.bn_momentum", "0.1", [](auto& c, auto& k, auto& v) { c.train.bn_momentum = to_double(k, v); }},
        {"train.log_every", "100", [](auto& c, auto& k, auto& v) { c.train.log_every = to_uint(k, v); }},
        {"search.excessive", "", [](auto& c, auto& k, auto& v) {
             c.excessive_set = !v.empty();
             if (c.excessive_set) c.search.excessive = to_double(k, v);
         }},
        {"search.population", "32", [](auto& c, auto& k, auto& v) { c.search.population = to_uint(k, v); }},
        {"search.generations", "20", [](auto& c, auto& k, auto& v) { c.search.generations = to_uint(k, v); }},
        {"search.tournament", "4", [](auto& c, auto& k, auto& v) { c.search.tournament = to_uint(k, v); }},
        {"search.elites", "2", [](auto& c, auto& k, auto& v) { c.search.elites = to_uint(k, v); }},
        {"search.crossover_rate", "0.5", [](auto& c, auto& k, auto& v) { c.search.crossover_rate = to_double(k, v); }},
        {"search.mutation_std", "0.5", [](auto& c, auto& k, auto& v) { c.search.mutation_std = to_double(k, v); }},
        {"search.noise_std", "0.1", [](auto& c, auto& k, auto& v) { c.search.noise_std = to_double(k, v); }},
        {"search.threads", "1", [](auto& c, auto& k, auto& v) { c.search.threads = to_uint(k, v); }},
    };
    return table;
}

std::string fixed(double v, int digits = 6) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(digits) << v;
    return out.str();
}

template <typename F>
auto stage(const std::string& name, F&& body) -> decltype(body()) {
    try {
        return body();
    } catch (const StageError&) {
        throw;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

} // namespace

std::string to_string(Method method) {
    switch (method) {
    case Method::UniPTS: return "unipts";
    case Method::PotBaseline: return "pot-baseline";
    case Method::ErkDst: return "erk+dst";
    case Method::UniformDst: return "uniform+dst";
    case Method::OneShot: return "oneshot";
    }
    return "?";
}

Method parse_method(const std::string& name) {
    for (auto m : {Method::UniPTS, Method::PotBaseline, Method::ErkDst, Method::UniformDst, Method::OneShot})
        if (to_string(m) == name) return m;
    throw std::invalid_argument("unknown method '" + name + "'");
}

std::string ExperimentConfig::resolved_output_dir() const {
    const char* root = std::getenv(kOutputRootEnv);
    if (root && *root && fs::path(output_dir).is_relative()) return (fs::path(root) / output_dir).string();
    return output_dir;
}

double ExperimentConfig::target_sparsity() const {
    if (nm) return 1.0 - static_cast<double>(nm->n) / static_cast<double>(nm->m);
    return sparsity.value_or(0.0);
}

std::string ExperimentConfig::method_label() const {
    std::string label = to_string(method);
    if (nm) label += "@" + nm->str();
    if (objective_set) label += "[" + to_string(train.objective) + "]";
    return label;
}

Objective ExperimentConfig::objective() const {
    if (objective_set) return train.objective;
    return method == Method::PotBaseline ? Objective::LayerwiseMSE : Objective::BaseDecayedKL;
}

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap map;
    std::istringstream in(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(line_no) + " is not 'key = value'");
        map[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return map;
}

ConfigMap read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void apply_overrides(ConfigMap& base, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
        base[trim(o.substr(0, eq))] = trim(o.substr(eq + 1));
    }
}

ExperimentConfig build_config(const ConfigMap& map) {
    ExperimentConfig cfg;
    std::set<std::string> known;
    for (const auto& spec : key_table()) {
        known.insert(spec.key);
        auto it = map.find(spec.key);
        spec.set(cfg, spec.key, it == map.end() ? std::string(spec.fallback) : it->second);
    }
    for (const auto& [key, value] : map)
        if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");

    if (cfg.nm && map.count("sparsity") && !map.at("sparsity").empty())
        throw ConfigError("config: set either 'sparsity' or 'nm', not both");
    if (cfg.nm) cfg.sparsity.reset();
    if (!cfg.nm) {
        if (!cfg.sparsity || !(*cfg.sparsity > 0.0 && *cfg.sparsity < 1.0))
            throw ConfigError("config: 'sparsity' must lie in (0, 1)");
    }
    if (cfg.nm && (cfg.method == Method::UniPTS || cfg.method == Method::ErkDst) && cfg.distribution != "auto")
        throw ConfigError("config: N:M runs do not use a sparsity distribution");
    if (cfg.dataset == "idx" && (cfg.train_images.empty() || cfg.train_labels.empty() || cfg.test_images.empty() ||
                                 cfg.test_labels.empty()))
        throw ConfigError("config: idx dataset needs idx.train_images/train_labels/test_images/test_labels");
    if (cfg.dataset == "idx")
        for (const auto& p : {cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels})
            if (!fs::exists(p)) throw ConfigError("config: file not found: " + p);
    if (!cfg.teacher_checkpoint.empty() && !fs::exists(cfg.teacher_checkpoint))
        throw ConfigError("config: teacher checkpoint not found: " + cfg.teacher_checkpoint);
    if (cfg.calib_size == 0) throw ConfigError("config: calib.size must be positive");

    cfg.search.target = cfg.target_sparsity();
    if (!cfg.excessive_set) cfg.search.excessive = SearchConfig::default_excessive(cfg.search.target);
    cfg.search.batch_size = cfg.train.batch_size;
    cfg.train.objective = cfg.objective();
    try {
        cfg.train.validate();
        cfg.search.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

std::string default_config_text() {
    std::string out;
    for (const auto& spec : key_table()) out += std::string(spec.key) + " = " + spec.fallback + "\n";
    return out;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, std::ostream& out) {
    out << kMetricsHeader << "\n";
    for (const auto& r : rows)
        out << r.method << ',' << fixed(r.target_sparsity) << ',' << fixed(r.realized_sparsity) << ',' << fixed(r.top1)
            << ',' << r.seed << ',' << fixed(r.wall_time_s, 3) << "\n";
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || trim(line) != kMetricsHeader)
        throw std::runtime_error(path + ": unexpected metrics header");
    std::vector<MetricsRow> rows;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string item; std::getline(ss, item, ',');) f.push_back(item);
        if (f.size() != 6) throw std::runtime_error(path + ": malformed row '" + line + "'");
        rows.push_back({f[0], std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stoull(f[4]), std::stod(f[5])});
    }
    return rows;
}

DatasetSplits load_splits(const ExperimentConfig& cfg) {
    return stage("dataset", [&] {
        if (cfg.dataset == "synthetic") return make_synthetic(cfg.synthetic);
        DatasetSplits s;
        s.train = load_idx_images(cfg.train_images, cfg.train_labels, cfg.train_images_checksum, cfg.train_labels_checksum);
        s.test = load_idx_images(cfg.test_images, cfg.test_labels, cfg.test_images_checksum, cfg.test_labels_checksum);
        if (s.train.sample_shape != s.test.sample_shape) throw DataError("train and test image shapes differ");
        s.train.classes = s.test.classes = std::max(s.train.classes, s.test.classes);
        return s;
    });
}

Network train_teacher(const ExperimentConfig& cfg, const DatasetSplits& splits) {
    return stage("teacher", [&] {
        Network net = build_preset(cfg.preset, splits.train.sample_shape, splits.train.classes, cfg.teacher_seed);
        const LabeledData train = to_labeled(splits.train);
        BatchCycler cycler(train, cfg.teacher_batch, derive_seed(cfg.teacher_seed, 0x7eac));
        const std::size_t total = cfg.teacher_epochs * cycler.batches_per_epoch();
        std::vector<Tensor> velocity(2 * net.size());
        net.set_mode(Mode::Train);
        for (std::size_t it = 0; it < total; ++it) {
            const Batch batch = cycler.next();
            const ForwardTrace trace = forward(net, batch.inputs);
            const LossResult loss = cross_entropy(predict_distribution(trace.output), batch.labels);
            const Gradients grads = backward(net, trace, loss.grad);
            update_running_stats(net, trace, 0.1);
            const double lr = cosine_lr(it, total, cfg.teacher_lr);
            for (std::size_t i = 0; i < net.size(); ++i) {
                Layer& layer = net.layer(i);
                if (layer.weight.empty()) continue;
                std::pair<Tensor*, const Tensor*> params[] = {{&layer.weight, &grads.layers[i].weight},
                                                              {&layer.bias, &grads.layers[i].bias}};
                for (std::size_t p = 0; p < 2; ++p) {
                    Tensor& v = velocity[2 * i + p];
                    Tensor& w = *params[p].first;
                    const Tensor& g = *params[p].second;
                    if (v.shape() != w.shape()) v = Tensor(w.shape());
                    for (std::size_t k = 0; k < w.numel(); ++k) {
                        v[k] = cfg.teacher_momentum * v[k] + g[k] + 5e-4 * w[k];
                        w[k] -= lr * v[k];
                    }
                }
            }
        }
        net.set_mode(Mode::Eval);
        return net;
    });
}

Network prepare_teacher(const ExperimentConfig& cfg, const DatasetSplits& splits) {
    if (cfg.teacher_checkpoint.empty()) return train_teacher(cfg, splits);
    return stage("teacher", [&] {
        Network net = load_network(cfg.teacher_checkpoint);
        if (net.input_shape() != splits.train.sample_shape)
            throw ShapeError(-1, "teacher input " + shape_string(net.input_shape()) + " does not match the dataset");
        net.set_mode(Mode::Eval);
        return net;
    });
}

CalibrationSet make_calibration(const ExperimentConfig& cfg, const DatasetSplits& splits, std::uint64_t seed) {
    return stage("calibration", [&] {
        const auto idx = sample_calibration(splits.train, cfg.calib_size, derive_seed(seed, 0xca1b), cfg.calib_sampling);
        CalibrationSet calib = to_labeled(splits.train, idx);
        std::vector<std::size_t> test_idx(splits.test.size());
        for (std::size_t i = 0; i < test_idx.size(); ++i) test_idx[i] = i;
        LabeledData ids_only;
        for (auto i : test_idx) ids_only.ids.push_back(kTestIdBase + i);
        assert_disjoint(calib, ids_only);
        return calib;
    });
}

DistributionChoice choose_distribution(const ExperimentConfig& cfg, const Network& teacher, const CalibrationSet& calib,
                                       std::uint64_t seed) {
    return stage("search", [&] {
        DistributionChoice choice;
        if (cfg.nm) {
            choice.policy.nm = *cfg.nm;
            choice.policy.distribution = uniform_distribution(teacher, cfg.target_sparsity());
            return choice;
        }
        const double target = cfg.target_sparsity();
        std::string kind = cfg.distribution;
        if (kind == "auto") {
            switch (cfg.method) {
            case Method::UniPTS: kind = "search"; break;
            case Method::ErkDst: kind = "erk"; break;
            default: kind = "uniform"; break;
            }
        }
        if (kind == "search") {
            SearchConfig sc = cfg.search;
            sc.seed = derive_seed(seed, 0x5ea7);
            choice.search = evolve(teacher, calib, sc);
            choice.policy.distribution = choice.search->best.distribution;
        } else if (kind == "erk") {
            choice.policy.distribution = erk_distribution(teacher, target);
        } else if (kind == "uniform") {
            choice.policy.distribution = uniform_distribution(teacher, target);
        } else {
            choice.policy.distribution = load_distribution(kind.substr(5));
            if (choice.policy.distribution.rates.size() != teacher.prunable_layers().size())
                throw std::invalid_argument("distribution file does not match the teacher");
        }
        if (!cfg.exclude_layers.empty())
            choice.policy.distribution = exclude_layers(teacher, choice.policy.distribution, cfg.exclude_layers);
        return choice;
    });
}

TrainResult train_student(const ExperimentConfig& cfg, const Network& teacher, const MaskPolicy& policy,
                          const CalibrationSet& calib, std::uint64_t seed) {
    return stage("train", [&] {
        if (cfg.method == Method::OneShot) {
            TrainResult r;
            r.masks = policy.masks_for(teacher);
            r.student = with_mask_applied(teacher, r.masks);
            if (cfg.oneshot_recalibrate_bn) bn_recalibrate(r.student, batch_inputs(calib, cfg.train.batch_size));
            r.student.set_mode(Mode::Eval);
            return r;
        }
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(seed, 0x7a1);
        return run_training(teacher, policy, calib, tc);
    });
}

MetricsRow evaluate_student(const ExperimentConfig& cfg, const Network& student, const SparseMask& masks,
                            const DatasetSplits& splits, const CalibrationSet& calib, std::uint64_t seed,
                            double wall_time_s) {
    return stage("eval", [&] {
        const LabeledData test = to_labeled(splits.test, kTestIdBase);
        assert_disjoint(calib, test);
        MetricsRow row;
        row.method = cfg.method_label();
        row.target_sparsity = cfg.target_sparsity();
        row.realized_sparsity = global_sparsity(student, masks);
        if (std::abs(row.realized_sparsity - row.target_sparsity) > 0.005)
            throw std::runtime_error("realized sparsity " + fixed(row.realized_sparsity) + " is more than 0.5 pp from target " +
                                     fixed(row.target_sparsity));
        Network eval = student;
        eval.set_mode(Mode::Eval);
        row.top1 = accuracy(predict_logits(eval, test.inputs), test.labels);
        row.seed = seed;
        row.wall_time_s = cfg.report_wall_time ? wall_time_s : 0.0;
        return row;
    });
}

std::string seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
    return (fs::path(cfg.resolved_output_dir()) / ("seed_" + std::to_string(seed))).string();
}

SeedArtifacts run_seed(const ExperimentConfig& cfg, const Network& teacher, const DatasetSplits& splits,
                       std::uint64_t seed) {
    const auto start = std::chrono::steady_clock::now();
    const std::string dir = seed_dir(cfg, seed);
    stage("output", [&] { ensure_dir(dir); });

    SeedArtifacts art;
    const CalibrationSet calib = make_calibration(cfg, splits, seed);
    art.choice = choose_distribution(cfg, teacher, calib, seed);
    art.training = train_student(cfg, teacher, art.choice.policy, calib, seed);
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    art.row = evaluate_student(cfg, art.training.student, art.training.masks, splits, calib, seed, elapsed);

    stage("output", [&] {
        if (art.choice.search) {
            std::ofstream log(dir + "/search_log.txt");
            write_search_log(*art.choice.search, log);
        }
        save_distribution(teacher, art.choice.policy.distribution, dir + "/distribution.txt");
        std::ofstream summary(dir + "/distribution_summary.txt");
        summary << distribution_summary(teacher, art.choice.policy.distribution, &art.training.masks);
        save_network(art.training.student, dir + "/student.ckpt");
        save_masks(art.training.student, art.training.masks, dir + "/masks");
        std::ofstream tm(dir + "/train_metrics.csv");
        write_train_metrics(art.training.history, tm);
        std::ofstream mc(dir + "/metrics.csv");
        write_metrics_csv({art.row}, mc);
    });
    return art;
}

std::vector<MetricsRow> run_experiment(const ExperimentConfig& cfg) {
    const std::string out = cfg.resolved_output_dir();
    stage("output", [&] { ensure_dir(out); });
    const auto start = std::chrono::steady_clock::now();
    const DatasetSplits splits = load_splits(cfg);
    const Network teacher = prepare_teacher(cfg, splits);
    const double teacher_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    stage("output", [&] { save_network(teacher, out + "/teacher.ckpt"); });
    const std::uint64_t teacher_hash = teacher.hash();

    std::vector<MetricsRow> rows;
    std::vector<std::pair<std::uint64_t, double>> timings;
    for (auto seed : cfg.seeds) {
        const auto t0 = std::chrono::steady_clock::now();
        rows.push_back(run_seed(cfg, teacher, splits, seed).row);
        timings.emplace_back(seed, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        if (teacher.hash() != teacher_hash) throw StageError("train", "teacher parameters changed during the run");
    }
    stage("output", [&] {
        std::ofstream mc(out + "/metrics.csv");
        write_metrics_csv(rows, mc);
        std::ofstream tc(out + "/timings.csv");
        tc << "stage,seed,wall_time_s\nteacher,," << fixed(teacher_time, 3) << "\n";
        for (const auto& [seed, t] : timings) tc << "seed," << seed << ',' << fixed(t, 3) << "\n";
    });
    return rows;
}

double median(std::vector<double> values) {
    if (values.empty()) throw std::invalid_argument("median of an empty set");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

ReportTable build_report(const std::vector<MetricsRow>& rows) {
    ReportTable t;
    std::map<std::pair<std::string, double>, std::vector<double>> groups;
    for (const auto& r : rows) {
        if (std::find(t.methods.begin(), t.methods.end(), r.method) == t.methods.end()) t.methods.push_back(r.method);
        if (std::find(t.targets.begin(), t.targets.end(), r.target_sparsity) == t.targets.end())
            t.targets.push_back(r.target_sparsity);
        groups[{r.method, r.target_sparsity}].push_back(r.top1);
    }
    std::sort(t.targets.begin(), t.targets.end());
    for (const auto& m : t.methods) {
        std::vector<std::optional<double>> row;
        for (double p : t.targets) {
            auto it = groups.find({m, p});
            row.push_back(it == groups.end() ? std::nullopt : std::optional<double>(median(it->second)));
        }
        t.cells.push_back(std::move(row));
    }
    return t;
}

ReportTable report(const std::vector<std::string>& run_dirs) {
    return stage("report", [&] {
        std::vector<MetricsRow> rows;
        for (const auto& dir : run_dirs) {
            auto part = read_metrics_csv((fs::path(dir) / "metrics.csv").string());
            rows.insert(rows.end(), part.begin(), part.end());
        }
        return build_report(rows);
    });
}

std::string ReportTable::aligned() const {
    std::size_t width = 6;
    for (const auto& m : methods) width = std::max(width, m.size());
    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(width) + 2) << "method";
    for (double p : targets) out << std::right << std::setw(10) << (fixed(100.0 * p, 1) + "%");
    out << "\n";
    for (std::size_t i = 0; i < methods.size(); ++i) {
        out << std::left << std::setw(static_cast<int>(width) + 2) << methods[i];
        for (const auto& c : cells[i]) out << std::right << std::setw(10) << (c ? fixed(100.0 * *c, 2) : std::string("-"));
        out << "\n";
    }
    return out.str();
}

std::string ReportTable::csv() const {
    std::ostringstream out;
    out << "method";
    for (double p : targets) out << ',' << fixed(p);
    out << "\n";
    for (std::size_t i = 0; i < methods.size(); ++i) {
        out << methods[i];
        for (const auto& c : cells[i]) out << ',' << (c ? fixed(*c) : std::string());
        out << "\n";
    }
    return out.str();
}

} // namespace pts
