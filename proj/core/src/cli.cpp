#include "tinyprune/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "tinyprune/checkpoint.hpp"
#include "tinyprune/error.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace tinyprune {

const char* kTelemetryHeaderPrefix = "# tinyprune telemetry v1";

namespace {

std::string read_text(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open '" + path + "'");
    std::stringstream buf;
    buf << is.rdbuf();
    return buf.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open '" + path + "' for writing");
    os << text;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string kb_decimal(long long bytes) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", static_cast<double>(bytes) / 1000.0);
    return buf;
}

std::string kib(long long bytes) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", static_cast<double>(bytes) / 1024.0);
    return buf;
}

// append a wall-clock line to the sidecar log (the only timestamped artifact)
void log_line(const std::string& run_dir, const std::string& msg) {
    std::ofstream os(fs::path(run_dir) / "run.log", std::ios::app);
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    char buf[64];
    std::strftime(buf, sizeof(buf), "%F %T", std::gmtime(&t));
    os << "[" << buf << "] " << msg << "\n";
}

struct LoadedModel {
    std::string text;
    ComputationGraph graph;
    ShapeTable shapes;
    MaskGroupTable groups;
};

LoadedModel load_model(const std::string& path) {
    LoadedModel m{read_text(path), {}, {}, {}};
    m.graph = parse_model_spec(m.text);
    m.shapes = infer_shapes(m.graph);
    m.groups = compute_mask_groups(m.graph);
    return m;
}

std::vector<double> ones_pi(const MaskGroupTable& groups) {
    return std::vector<double>(static_cast<std::size_t>(groups.group_count()), 1.0);
}

}  // namespace

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

int cmd_analyze(const AnalyzeArgs& args, AnalyzeResult* out) {
    LoadedModel m = load_model(args.model_path);
    std::vector<double> pi = ones_pi(m.groups);

    if (!args.pi_path.empty()) {
        std::stringstream ss(read_text(args.pi_path));
        std::string name;
        double value = 0.0;
        while (ss >> name >> value) {
            const int node = m.graph.find(name);
            if (node < 0) throw Error("pi file: unknown node '" + name + "'");
            pi[static_cast<std::size_t>(m.groups.group_of[static_cast<std::size_t>(node)])] = value;
        }
    }

    const TensorSizeTable sizes = tensor_sizes(m.graph, m.shapes, m.groups, pi, args.planner);
    const MemoryPlan plan = precise_pmu(m.graph, sizes, args.planner);
    const long long imprecise = imprecise_pmu(m.graph, sizes, args.planner);
    const long long size = model_size(m.graph, m.shapes, m.groups, pi);
    const long long macs = mac_count(m.graph, m.shapes, m.groups, pi);

    std::ostringstream csv;
    csv << "node_id,name,kind,group,channels_eff,buffer_bytes,params_bytes,macs\n";
    for (int id = 0; id < m.graph.size(); ++id) {
        const Node& n = m.graph.node(id);
        const int gi = m.groups.group_of[static_cast<std::size_t>(id)];
        // per-node params/macs via single-node accounting
        long long pbytes = 0, pmacs = 0;
        if (m.graph.is_parametric(id)) {
            // measure by difference: zero out everything else is costly; recompute directly
            const Shape sh = m.shapes[id];
            const int eff_out = m.groups.prunable[static_cast<std::size_t>(gi)]
                                    ? ShapeTable::effective_channels(sh.c, pi[static_cast<std::size_t>(gi)])
                                    : sh.c;
            if (n.kind == OpKind::Conv2D || n.kind == OpKind::DepthwiseConv2D) {
                const int in_id = n.preds[0];
                const int gin = m.groups.group_of[static_cast<std::size_t>(in_id)];
                const int eff_in =
                    m.groups.prunable[static_cast<std::size_t>(gin)]
                        ? ShapeTable::effective_channels(m.shapes[in_id].c, pi[static_cast<std::size_t>(gin)])
                        : m.shapes[in_id].c;
                const long long k = static_cast<long long>(n.attrs.kernel_h) * n.attrs.kernel_w;
                if (n.kind == OpKind::Conv2D) {
                    pbytes = k * eff_in * eff_out + eff_out + (n.attrs.has_bn ? 2LL * eff_out : 0);
                    pmacs = k * eff_in * eff_out * sh.h * sh.w;
                } else {
                    pbytes = k * eff_out + (n.attrs.has_bn ? 2LL * eff_out : 0);
                    pmacs = k * eff_out * sh.h * sh.w;
                }
            } else {  // FullyConnected
                const int in_id = n.preds[0];
                const int gin = m.groups.group_of[static_cast<std::size_t>(in_id)];
                const Shape in_sh = m.shapes[in_id];
                const int eff_in_c =
                    m.groups.prunable[static_cast<std::size_t>(gin)]
                        ? ShapeTable::effective_channels(in_sh.c, pi[static_cast<std::size_t>(gin)])
                        : in_sh.c;
                const long long fin = static_cast<long long>(eff_in_c) * in_sh.h * in_sh.w;
                pbytes = fin * eff_out + eff_out;
                pmacs = fin * eff_out;
            }
        }
        const Shape sh = m.shapes[id];
        const int eff = m.groups.prunable[static_cast<std::size_t>(gi)]
                            ? ShapeTable::effective_channels(sh.c, pi[static_cast<std::size_t>(gi)])
                            : sh.c;
        csv << id << "," << n.name << "," << op_kind_name(n.kind) << "," << gi << "," << eff << "," << sizes[id]
            << "," << pbytes << "," << pmacs << "\n";
    }

    if (!args.csv_path.empty()) write_text(args.csv_path, csv.str());

    if (!args.quiet) {
        std::cout << "model: " << args.model_path << "\n";
        std::cout << "size_bytes: " << size << " (" << kb_decimal(size) << " KB, " << kib(size) << " KiB)\n";
        std::cout << "macs: " << macs << "\n";
        std::cout << "pmu_precise_bytes: " << plan.peak_bytes << " (" << kb_decimal(plan.peak_bytes) << " KB, "
                  << kib(plan.peak_bytes) << " KiB)\n";
        std::cout << "pmu_imprecise_bytes: " << imprecise << " (" << kb_decimal(imprecise) << " KB, "
                  << kib(imprecise) << " KiB)\n";
        std::cout << "order:";
        for (int id : plan.order) std::cout << " " << m.graph.node(id).name;
        std::cout << "\nbottleneck:";
        for (int id : plan.bottleneck) std::cout << " " << m.graph.node(id).name;
        std::cout << "\n\n" << csv.str();
    }

    if (out) {
        out->size_bytes = size;
        out->macs = macs;
        out->pmu_precise = plan.peak_bytes;
        out->pmu_imprecise = imprecise;
        out->order = plan.order;
        out->bottleneck = plan.bottleneck;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// train / prune
// ---------------------------------------------------------------------------

namespace {

std::string telemetry_csv(const MaskGroupTable& groups, const std::vector<TelemetryRow>& rows) {
    std::ostringstream os;
    os << kTelemetryHeaderPrefix << "\n";
    os << "step";
    for (int gi : groups.prunable_groups()) os << ",pi_g" << gi;
    os << ",pmu_bytes,pmu_precise_bytes,pmu_imprecise_bytes,size_bytes,macs,p_res,p_tsk,active,"
          "mask_churn_pct,train_macs_cum\n";
    for (const TelemetryRow& r : rows) {
        os << r.step;
        for (double p : r.pi) os << "," << fmt(p);
        os << "," << r.pmu_bytes << "," << r.pmu_precise << "," << r.pmu_imprecise << "," << r.size_bytes << ","
           << r.macs << "," << fmt(r.p_res) << "," << fmt(r.p_tsk) << "," << r.active << ","
           << fmt(r.mask_churn_pct) << "," << r.train_macs_cum << "\n";
    }
    return os.str();
}

ordered_json layer_table(const LoadedModel& before, const ComputationGraph& after_graph,
                         const std::vector<double>& pi_before) {
    const ShapeTable after_shapes = infer_shapes(after_graph);
    const MaskGroupTable after_groups = compute_mask_groups(after_graph);
    const std::vector<double> ones_b(static_cast<std::size_t>(before.groups.group_count()), 1.0);
    const std::vector<double> ones_a(static_cast<std::size_t>(after_groups.group_count()), 1.0);

    ordered_json layers = ordered_json::array();
    for (int id = 0; id < before.graph.size(); ++id) {
        if (!before.graph.is_parametric(id)) continue;
        const Node& n = before.graph.node(id);
        const Node& na = after_graph.node(id);
        ordered_json e;
        e["name"] = n.name;
        e["kind"] = op_kind_name(n.kind);
        e["group"] = before.groups.group_of[static_cast<std::size_t>(id)];
        e["channels_before"] = before.shapes[id].c;
        e["channels_after"] = after_shapes[id].c;
        auto per_node = [&](const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                            int node) {
            // single-node parameter bytes and MACs at pi = 1
            const Node& nn = g.node(node);
            const Shape sh = shapes[node];
            long long pbytes = 0, pmacs = 0;
            if (nn.kind == OpKind::Conv2D) {
                const long long k = static_cast<long long>(nn.attrs.kernel_h) * nn.attrs.kernel_w;
                const int ci = shapes[nn.preds[0]].c;
                pbytes = k * ci * sh.c + sh.c + (nn.attrs.has_bn ? 2LL * sh.c : 0);
                pmacs = k * ci * sh.c * sh.h * sh.w;
            } else if (nn.kind == OpKind::DepthwiseConv2D) {
                const long long k = static_cast<long long>(nn.attrs.kernel_h) * nn.attrs.kernel_w;
                pbytes = k * sh.c + (nn.attrs.has_bn ? 2LL * sh.c : 0);
                pmacs = k * sh.c * sh.h * sh.w;
            } else if (nn.kind == OpKind::FullyConnected) {
                const Shape in = shapes[nn.preds[0]];
                pbytes = in.elems() * sh.c + sh.c;
                pmacs = in.elems() * sh.c;
            }
            return std::pair<long long, long long>(pbytes, pmacs);
        };
        const auto [pb, mb] = per_node(before.graph, before.shapes, before.groups, id);
        const auto [pa, ma] = per_node(after_graph, after_shapes, after_groups, id);
        e["params_before"] = pb;
        e["params_after"] = pa;
        e["macs_before"] = mb;
        e["macs_after"] = ma;
        e["buffer_before"] = static_cast<long long>(before.shapes[id].elems());
        e["buffer_after"] = static_cast<long long>(after_shapes[id].elems());
        layers.push_back(e);
    }
    (void)pi_before;
    (void)ones_b;
    (void)ones_a;
    return layers;
}

int run_experiment(const ExperimentConfig& cfg, bool prune_enabled, RunArtifacts* out) {
    LoadedModel model = load_model(cfg.model_path);
    const Dataset data = load_dataset(cfg);

    PruneConfig pcfg = cfg.prune;
    pcfg.enabled = prune_enabled;
    ResourceBudget budget = cfg.budget;
    if (!prune_enabled && (budget.pmu_bytes <= 0 || budget.size_bytes <= 0 || budget.macs <= 0)) {
        // plain training runs may omit budgets entirely
        budget = ResourceBudget{1, 1, 1};
        const auto u = measure_usage(model.graph, model.shapes, model.groups, ones_pi(model.groups), cfg.planner);
        budget = ResourceBudget{u.pmu_bytes, u.size_bytes, u.macs};
    }

    fs::create_directories(cfg.out_dir);
    log_line(cfg.out_dir, std::string(prune_enabled ? "prune" : "train") + " start: model=" + cfg.model_path +
                              " seed=" + std::to_string(cfg.seed));

    PruneRunResult run;
    try {
        run = prune_train_loop(model.graph, data, budget, pcfg, cfg.train, cfg.planner, cfg.seed);
    } catch (const Error& e) {
        log_line(cfg.out_dir, std::string("abort: ") + e.what());
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    // --- artifacts ---
    write_text((fs::path(cfg.out_dir) / "telemetry.csv").string(), telemetry_csv(model.groups, run.telemetry));

    const ShapeTable final_shapes = infer_shapes(run.graph);
    const MaskGroupTable final_groups = compute_mask_groups(run.graph);
    const MaterializedModel exported =
        run.materialized ? MaterializedModel{run.graph, run.params}
                         : materialize_pruned(run.graph, final_shapes, final_groups, run.params, run.masks);
    write_text((fs::path(cfg.out_dir) / "pruned.model").string(), write_model_spec(exported.graph));

    Checkpoint ck;
    ck.spec_hash = fnv1a(model.text);
    ck.epoch = cfg.train.epochs;
    ck.step = run.telemetry.empty() ? 0 : run.telemetry.back().step;
    ck.frozen = run.frozen;
    ck.materialized = run.materialized;
    ck.v = run.widths.v;
    ck.masks = run.masks;
    ck.params = run.params;
    ck.momenta = zeros_like(run.params);
    ck.norm_mean = run.norm.mean;
    ck.norm_std = run.norm.std;
    ck.model_spec = write_model_spec(run.graph);
    save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.tpck").string(), ck);

    ordered_json summary;
    summary["schema"] = "tinyprune summary v1";
    summary["model"] = cfg.model_path;
    summary["seed"] = cfg.seed;
    summary["budget"] = {{"pmu_bytes", budget.pmu_bytes}, {"size_bytes", budget.size_bytes}, {"macs", budget.macs}};
    summary["final_usage"] = {{"pmu_bytes", run.final_usage.pmu_bytes},
                              {"pmu_precise_bytes", run.final_pmu_precise},
                              {"size_bytes", run.final_usage.size_bytes},
                              {"macs", run.final_usage.macs}};
    summary["budgets_met"] = run.budgets_met;
    summary["frozen"] = run.frozen;
    summary["materialized"] = run.materialized;
    summary["freeze_step"] = run.freeze_step;
    summary["total_train_macs"] = run.total_train_macs;
    summary["final_val_acc"] = run.final_val_acc;
    summary["final_test_acc"] = run.final_test_acc;
    summary["epoch_val_acc"] = run.epoch_val_acc;
    summary["layers"] = layer_table(model, exported.graph, run.widths.pis());
    write_text((fs::path(cfg.out_dir) / "summary.json").string(), summary.dump(2) + "\n");

    log_line(cfg.out_dir, "done: budgets_met=" + std::to_string(run.budgets_met) +
                              " val_acc=" + fmt(run.final_val_acc));

    if (out) {
        out->run_dir = cfg.out_dir;
        out->budgets_met = run.budgets_met;
        out->final_val_acc = run.final_val_acc;
        out->total_train_macs = run.total_train_macs;
        out->freeze_step = run.freeze_step;
        out->final_pmu_precise = run.final_pmu_precise;
        out->final_usage = run.final_usage;
    }
    if (!prune_enabled) return 0;
    return run.budgets_met ? 0 : 1;
}

}  // namespace

int cmd_train(const ExperimentConfig& cfg, RunArtifacts* out) { return run_experiment(cfg, false, out); }

int cmd_prune(const ExperimentConfig& cfg, RunArtifacts* out) { return run_experiment(cfg, true, out); }

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

int cmd_export(const ExportArgs& args) {
    const Checkpoint ck = load_checkpoint(args.checkpoint_path);
    const ComputationGraph g = parse_model_spec(ck.model_spec);
    const ShapeTable shapes = infer_shapes(g);
    const MaskGroupTable groups = compute_mask_groups(g);

    MaterializedModel m = materialize_pruned(g, shapes, groups, ck.params, ck.masks);
    fs::create_directories(args.out_dir);
    write_text((fs::path(args.out_dir) / "pruned.model").string(), write_model_spec(m.graph));

    Checkpoint pruned_ck;
    pruned_ck.spec_hash = fnv1a(write_model_spec(m.graph));
    pruned_ck.epoch = ck.epoch;
    pruned_ck.step = ck.step;
    pruned_ck.frozen = true;
    pruned_ck.materialized = true;
    pruned_ck.params = m.params;
    pruned_ck.momenta = zeros_like(m.params);
    pruned_ck.masks = MaskSet::all_ones(compute_mask_groups(m.graph));
    pruned_ck.v.assign(static_cast<std::size_t>(compute_mask_groups(m.graph).group_count()), 0.0);
    pruned_ck.norm_mean = ck.norm_mean;
    pruned_ck.norm_std = ck.norm_std;
    pruned_ck.model_spec = write_model_spec(m.graph);
    save_checkpoint((fs::path(args.out_dir) / "pruned.tpck").string(), pruned_ck);

    if (args.quantize) {
        const QuantizedParams q = affine_quantize_weights(m.params);
        std::ofstream os(fs::path(args.out_dir) / "quantized.tpq", std::ios::binary);
        const std::uint32_t magic = 0x51505054u;  // "TPPQ"
        os.write(reinterpret_cast<const char*>(&magic), 4);
        const std::uint32_t count = static_cast<std::uint32_t>(q.tensors.size());
        os.write(reinterpret_cast<const char*>(&count), 4);
        for (const auto& e : q.tensors) {
            const std::int32_t node = e.node;
            os.write(reinterpret_cast<const char*>(&node), 4);
            const std::uint32_t nlen = static_cast<std::uint32_t>(e.tensor.size());
            os.write(reinterpret_cast<const char*>(&nlen), 4);
            os.write(e.tensor.data(), nlen);
            const std::uint32_t rank = static_cast<std::uint32_t>(e.data.shape.size());
            os.write(reinterpret_cast<const char*>(&rank), 4);
            for (int d : e.data.shape) {
                const std::int32_t dd = d;
                os.write(reinterpret_cast<const char*>(&dd), 4);
            }
            os.write(reinterpret_cast<const char*>(&e.data.scale), 8);
            const std::int32_t zp = e.data.zero_point;
            os.write(reinterpret_cast<const char*>(&zp), 4);
            os.write(reinterpret_cast<const char*>(e.data.q.data()),
                     static_cast<std::streamsize>(e.data.q.size()));
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

int cmd_report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    const fs::path tpath = dir / "telemetry.csv";
    if (!fs::exists(tpath)) throw Error("no telemetry.csv in '" + run_dir + "'");

    std::ifstream is(tpath);
    std::string line;
    std::getline(is, line);
    if (line.rfind(kTelemetryHeaderPrefix, 0) != 0)
        throw Error("telemetry.csv: unknown schema (expected '" + std::string(kTelemetryHeaderPrefix) + "')");
    std::getline(is, line);  // column header
    std::vector<std::string> columns;
    {
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) columns.push_back(tok);
    }
    std::vector<std::vector<std::string>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> row;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) row.push_back(tok);
        if (row.size() != columns.size()) throw Error("telemetry.csv: ragged row");
        rows.push_back(std::move(row));
    }

    const fs::path rep = dir / "report";
    fs::create_directories(rep);

    auto col_index = [&](const std::string& name) {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return static_cast<int>(i);
        throw Error("telemetry.csv: missing column '" + name + "'");
    };

    // pi trajectories
    {
        std::ostringstream os;
        os << "step";
        for (const std::string& c : columns)
            if (c.rfind("pi_g", 0) == 0) os << "," << c;
        os << "\n";
        for (const auto& r : rows) {
            os << r[0];
            for (std::size_t i = 0; i < columns.size(); ++i)
                if (columns[i].rfind("pi_g", 0) == 0) os << "," << r[i];
            os << "\n";
        }
        write_text((rep / "pi_trajectory.csv").string(), os.str());
    }
    // mask churn
    {
        const int ci = col_index("mask_churn_pct");
        std::ostringstream os;
        os << "step,mask_churn_pct\n";
        for (const auto& r : rows) os << r[0] << "," << r[static_cast<std::size_t>(ci)] << "\n";
        write_text((rep / "mask_churn.csv").string(), os.str());
    }
    // precise vs imprecise PMU series
    {
        const int cp = col_index("pmu_precise_bytes");
        const int cim = col_index("pmu_imprecise_bytes");
        const int cobj = col_index("pmu_bytes");
        std::ostringstream os;
        os << "step,pmu_precise_bytes,pmu_imprecise_bytes,pmu_objective_bytes\n";
        for (const auto& r : rows)
            os << r[0] << "," << r[static_cast<std::size_t>(cp)] << "," << r[static_cast<std::size_t>(cim)] << ","
               << r[static_cast<std::size_t>(cobj)] << "\n";
        write_text((rep / "pmu_series.csv").string(), os.str());
    }
    // layer before/after from summary.json, when present
    const fs::path spath = dir / "summary.json";
    if (fs::exists(spath)) {
        const ordered_json summary = ordered_json::parse(read_text(spath.string()));
        std::ostringstream os;
        os << "name,kind,group,channels_before,channels_after,params_before,params_after,macs_before,"
              "macs_after,buffer_before,buffer_after\n";
        for (const auto& l : summary["layers"]) {
            os << l["name"].get<std::string>() << "," << l["kind"].get<std::string>() << "," << l["group"] << ","
               << l["channels_before"] << "," << l["channels_after"] << "," << l["params_before"] << ","
               << l["params_after"] << "," << l["macs_before"] << "," << l["macs_after"] << ","
               << l["buffer_before"] << "," << l["buffer_after"] << "\n";
        }
        write_text((rep / "layers_before_after.csv").string(), os.str());
    }
    return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

int cmd_sweep(const ExperimentConfig& cfg, int threads) {
    std::vector<double> rs = cfg.sweep_r.empty() ? std::vector<double>{cfg.prune.r} : cfg.sweep_r;
    std::vector<double> etas = cfg.sweep_eta.empty() ? std::vector<double>{cfg.prune.eta_pi} : cfg.sweep_eta;

    struct Cell {
        double r, eta;
        bool ok = false, budgets_met = false;
        double acc = 0.0;
        long long freeze_step = -1;
    };
    std::vector<Cell> cells;
    for (double r : rs)
        for (double eta : etas) cells.push_back({r, eta});

    fs::create_directories(cfg.out_dir);

    auto run_cell = [&](std::size_t i) {
        Cell& c = cells[i];
        ExperimentConfig sub = cfg;
        sub.prune.r = c.r;
        sub.prune.eta_pi = c.eta;
        sub.out_dir = (fs::path(cfg.out_dir) / ("cell_" + std::to_string(i))).string();
        // independent stream per cell, derived from the master seed
        sub.seed = Rng::mix(cfg.seed, 1000 + i);
        RunArtifacts art;
        try {
            const int rc = cmd_prune(sub, &art);
            c.ok = true;
            c.budgets_met = rc == 0 && art.budgets_met;
            c.acc = art.final_val_acc;
            c.freeze_step = art.freeze_step;
        } catch (const Error&) {
            c.ok = false;
        }
    };

    if (threads <= 1) {
        for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
    } else {
        std::vector<std::thread> pool;
        std::size_t next = 0;
        std::mutex mu;
        for (int t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t i;
                    {
                        std::lock_guard<std::mutex> lk(mu);
                        if (next >= cells.size()) return;
                        i = next++;
                    }
                    run_cell(i);
                }
            });
        for (auto& th : pool) th.join();
    }

    std::ostringstream os;
    os << "r,eta_pi,status,budgets_met,final_val_acc,freeze_step\n";
    for (const Cell& c : cells) {
        const bool na = !c.ok || !c.budgets_met;
        os << fmt(c.r) << "," << fmt(c.eta) << "," << (na ? "N/A" : "ok") << "," << (c.budgets_met ? 1 : 0) << ","
           << fmt(c.acc) << "," << c.freeze_step << "\n";
    }
    write_text((fs::path(cfg.out_dir) / "sweep_results.csv").string(), os.str());
    std::cout << os.str();
    return 0;
}

}  // namespace tinyprune
