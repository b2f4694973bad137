#include "tinyprune/config.hpp"

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tinyprune/error.hpp"

namespace tinyprune {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

[[noreturn]] void fail(int line, const std::string& msg) {
    throw ParseError("config line " + std::to_string(line) + ": " + msg);
}

bool parse_bool(const std::string& v, int line) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    fail(line, "expected boolean, got '" + v + "'");
}

double parse_double(const std::string& v, int line) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        fail(line, "expected number, got '" + v + "'");
    }
}

long long parse_int64(const std::string& v, int line) {
    try {
        std::size_t pos = 0;
        const long long d = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        fail(line, "expected integer, got '" + v + "'");
    }
}

std::vector<double> parse_list(const std::string& v, int line) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(parse_double(trim(tok), line));
    if (out.empty()) fail(line, "empty list");
    return out;
}

}  // namespace

long long parse_bytes(const std::string& text) {
    const std::string t = trim(text);
    std::size_t i = 0;
    while (i < t.size() && (std::isdigit(static_cast<unsigned char>(t[i])) || t[i] == '.')) ++i;
    const std::string num = trim(t.substr(0, i));
    const std::string suffix = trim(t.substr(i));
    if (num.empty()) throw ParseError("expected a number in '" + text + "'");
    const double v = std::stod(num);
    double mult = 1.0;
    if (suffix.empty())
        mult = 1.0;
    else if (suffix == "KB")
        mult = 1000.0;
    else if (suffix == "KiB")
        mult = 1024.0;
    else if (suffix == "M")
        mult = 1e6;
    else
        throw ParseError("unknown unit suffix '" + suffix + "' (use KB, KiB or M)");
    return static_cast<long long>(v * mult + 0.5);
}

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& base_dir) {
    ExperimentConfig cfg;
    std::stringstream ss(text);
    std::string raw;
    int line = 0;
    bool have_model = false, have_budget_pmu = false, have_budget_size = false, have_budget_macs = false;

    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        if (path.is_absolute() || base_dir.empty()) return p;
        return (std::filesystem::path(base_dir) / path).lexically_normal().string();
    };

    while (std::getline(ss, raw)) {
        ++line;
        const std::size_t hash = raw.find('#');
        const std::string l = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (l.empty()) continue;
        const std::size_t eq = l.find('=');
        if (eq == std::string::npos) fail(line, "expected 'key = value'");
        const std::string key = trim(l.substr(0, eq));
        const std::string value = trim(l.substr(eq + 1));
        if (value.empty()) fail(line, "empty value for '" + key + "'");

        if (key == "model") {
            cfg.model_path = resolve(value);
            have_model = true;
        } else if (key == "dataset") {
            if (value != "synthetic" && value != "cifar10" && value != "idx")
                fail(line, "dataset must be synthetic|cifar10|idx");
            cfg.dataset = value;
        } else if (key == "data.dir") {
            cfg.data_dir = resolve(value);
        } else if (key == "data.images") {
            cfg.idx_images = resolve(value);
        } else if (key == "data.labels") {
            cfg.idx_labels = resolve(value);
        } else if (key == "data.val_size") {
            cfg.val_size = static_cast<int>(parse_int64(value, line));
        } else if (key == "data.test_size") {
            cfg.test_size = static_cast<int>(parse_int64(value, line));
        } else if (key == "synth.classes") {
            cfg.synth.classes = static_cast<int>(parse_int64(value, line));
        } else if (key == "synth.train_size") {
            cfg.synth.train_size = static_cast<int>(parse_int64(value, line));
        } else if (key == "synth.val_size") {
            cfg.synth.val_size = static_cast<int>(parse_int64(value, line));
        } else if (key == "synth.test_size") {
            cfg.synth.test_size = static_cast<int>(parse_int64(value, line));
        } else if (key == "synth.resolution") {
            cfg.synth.resolution = static_cast<int>(parse_int64(value, line));
        } else if (key == "budget.pmu") {
            cfg.budget.pmu_bytes = parse_bytes(value);
            have_budget_pmu = true;
        } else if (key == "budget.size") {
            cfg.budget.size_bytes = parse_bytes(value);
            have_budget_size = true;
        } else if (key == "budget.macs") {
            cfg.budget.macs = parse_bytes(value);
            have_budget_macs = true;
        } else if (key == "prune.enabled") {
            cfg.prune.enabled = parse_bool(value, line);
        } else if (key == "prune.eta_pi") {
            cfg.prune.eta_pi = parse_double(value, line);
        } else if (key == "prune.r") {
            cfg.prune.r = parse_double(value, line);
        } else if (key == "prune.update_interval") {
            cfg.prune.update_interval = static_cast<int>(parse_int64(value, line));
        } else if (key == "prune.grad_clip") {
            cfg.prune.grad_clip_hi = parse_double(value, line);
        } else if (key == "prune.exp_scale") {
            cfg.prune.exp_scale = parse_double(value, line);
        } else if (key == "prune.start_epoch") {
            cfg.prune.start_epoch = static_cast<int>(parse_int64(value, line));
        } else if (key == "prune.early_terminate") {
            cfg.prune.early_terminate = parse_bool(value, line);
        } else if (key == "prune.pmu_objective") {
            if (value == "precise")
                cfg.prune.pmu_objective = PmuObjective::Precise;
            else if (value == "imprecise")
                cfg.prune.pmu_objective = PmuObjective::Imprecise;
            else if (value == "none")
                cfg.prune.pmu_objective = PmuObjective::None;
            else
                fail(line, "prune.pmu_objective must be precise|imprecise|none");
        } else if (key == "prune.loss") {
            if (value == "both")
                cfg.prune.loss_mode = LossMode::Both;
            else if (value == "task")
                cfg.prune.loss_mode = LossMode::TaskOnly;
            else if (value == "res")
                cfg.prune.loss_mode = LossMode::ResourceOnly;
            else
                fail(line, "prune.loss must be both|task|res");
        } else if (key == "prune.mask_batch") {
            if (value == "holdout")
                cfg.prune.mask_batch_from_train = false;
            else if (value == "train")
                cfg.prune.mask_batch_from_train = true;
            else
                fail(line, "prune.mask_batch must be holdout|train");
        } else if (key == "train.epochs") {
            cfg.train.epochs = static_cast<int>(parse_int64(value, line));
        } else if (key == "train.lr") {
            cfg.train.lr = parse_double(value, line);
        } else if (key == "train.lr_schedule") {
            if (value != "const" && value != "cosine") fail(line, "train.lr_schedule must be const|cosine");
            cfg.train.lr_schedule = value;
        } else if (key == "train.momentum") {
            cfg.train.momentum = parse_double(value, line);
        } else if (key == "train.weight_decay") {
            cfg.train.weight_decay = parse_double(value, line);
        } else if (key == "train.batch_size") {
            cfg.train.batch_size = static_cast<int>(parse_int64(value, line));
        } else if (key == "train.augment") {
            cfg.train.augment = parse_bool(value, line);
        } else if (key == "planner.elem_bytes") {
            const long long v = parse_int64(value, line);
            if (v != 1 && v != 4) fail(line, "planner.elem_bytes must be 1 or 4");
            cfg.planner.elem_bytes = static_cast<int>(v);
        } else if (key == "planner.add_inplace") {
            cfg.planner.add_inplace = parse_bool(value, line);
        } else if (key == "planner.node_cap") {
            cfg.planner.node_cap = static_cast<int>(parse_int64(value, line));
        } else if (key == "seed") {
            cfg.seed = static_cast<std::uint64_t>(parse_int64(value, line));
        } else if (key == "out") {
            cfg.out_dir = resolve(value);
        } else if (key == "sweep.r") {
            cfg.sweep_r = parse_list(value, line);
        } else if (key == "sweep.eta_pi") {
            cfg.sweep_eta = parse_list(value, line);
        } else {
            fail(line, "unknown key '" + key + "'");
        }
    }

    if (!have_model) throw ParseError("config: missing required key 'model'");
    if (cfg.dataset.empty()) throw ParseError("config: missing required key 'dataset'");
    if (cfg.prune.enabled && !(have_budget_pmu && have_budget_size && have_budget_macs))
        throw ParseError("config: pruning requires budget.pmu, budget.size and budget.macs");
    if (cfg.prune.eta_pi <= 0) throw ParseError("config: prune.eta_pi must be > 0");
    if (cfg.prune.r < 0) throw ParseError("config: prune.r must be >= 0");
    if (cfg.prune.update_interval < 1) throw ParseError("config: prune.update_interval must be >= 1");
    if (cfg.train.epochs < 1 || cfg.train.batch_size < 1) throw ParseError("config: bad training hyperparameters");
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open config '" + path + "'");
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_experiment_config(buf.str(), std::filesystem::path(path).parent_path().string());
}

std::string resolve_data_dir(const ExperimentConfig& cfg) {
    if (const char* env = std::getenv("TINYPRUNE_DATA_ROOT")) return env;
    return cfg.data_dir;
}

Dataset load_dataset(const ExperimentConfig& cfg) {
    if (cfg.dataset == "synthetic") return synth_dataset(cfg.synth, cfg.seed);
    if (cfg.dataset == "cifar10") return load_cifar10(resolve_data_dir(cfg), cfg.val_size, cfg.seed);
    return load_idx(cfg.idx_images, cfg.idx_labels, cfg.val_size, cfg.test_size, cfg.seed);
}

}  // namespace tinyprune
