#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pfrag/pfrag.hpp"

namespace fs = std::filesystem;
using namespace pfrag;

namespace {

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    std::vector<std::string> sets;
    std::string out;
    std::string tsv;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "config file (key = value); falls back to $PFRAG_CONFIG")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "run seed")->required();
    sub->add_option("--set", c.sets, "override a config key, key=value (repeatable)");
    sub->add_option("--out", c.out, "output path");
    sub->add_option("--tsv", c.tsv, "flat tabular output path");
}

Config make_config(const Common& c) {
    Config cfg = resolve_config(c.config);
    for (const auto& kv : c.sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got " + kv);
        set_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    validate(cfg);
    return cfg;
}

std::string command_line(int argc, char** argv) {
    std::string s;
    for (int i = 1; i < argc; ++i) s += (i > 1 ? " " : "") + std::string(argv[i]);
    return s;
}

void emit(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
    } else {
        write_file(path, text);
    }
}

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!detail::trim(item).empty()) out.push_back(detail::trim(item));
    if (out.empty()) throw std::invalid_argument("empty list: " + s);
    return out;
}

std::vector<double> split_numbers(const std::string& s) {
    std::vector<double> out;
    for (const auto& item : split(s)) {
        double v = 0.0;
        detail::parse_value(item, v);
        out.push_back(v);
    }
    return out;
}

ParamsBundle load_params(const std::string& dir, const Config& cfg, const Corpus& corpus, std::uint64_t seed) {
    if (dir.empty()) return train_bundle(cfg, corpus, seed);
    ParamsBundle b;
    b.predictor = deserialize_predictor(read_file((fs::path(dir) / "predictor.bin").string()));
    b.monitor = deserialize_monitor(read_file((fs::path(dir) / "monitor.bin").string()));
    auto policy = fs::path(dir) / "policy.bin";
    if (fs::exists(policy)) b.policy = deserialize_policy(read_file(policy.string()));
    return b;
}

bool needs_params(const std::vector<BaselineMode>& modes) {
    for (auto m : modes)
        if (m == BaselineMode::Predictive) return true;
    return false;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pfrag: predictive prefetching for retrieval-augmented generation (simulation)"};
    app.require_subcommand(1);

    Common c;
    std::string modes = "predictive";
    std::string params_dir;
    std::string exec = "virtual";
    std::string log_path;
    std::string param;
    std::string grid;
    std::string compare;
    std::size_t count = 0;

    auto* synth = app.add_subcommand("synth", "generate synthetic traces (JSONL)");
    add_common(synth, c);
    synth->add_option("--count", count, "number of traces (default bench.traces)");

    auto* label = app.add_subcommand("label", "oracle-label synthetic traces (JSONL)");
    add_common(label, c);
    label->add_option("--count", count, "number of traces (default train.traces)");

    auto* train = app.add_subcommand("train", "train predictor and monitor, write parameter files");
    add_common(train, c);

    auto* bench = app.add_subcommand("bench", "run baselines and write a metrics report");
    add_common(bench, c);
    bench->add_option("--mode", modes, "comma-separated modes")->capture_default_str();
    bench->add_option("--params", params_dir, "directory from `train`; trains in-process when omitted");
    bench->add_option("--exec", exec, "virtual or concurrent")->check(CLI::IsMember({"virtual", "concurrent"}))->capture_default_str();
    bench->add_option("--log", log_path, "write the event log (JSONL) of the last mode");

    auto* sweep = app.add_subcommand("sweep", "sweep latency or a hyperparameter");
    add_common(sweep, c);
    sweep->add_option("--param", param, "latency, tau_rag, horizon or theta")->required();
    sweep->add_option("--grid", grid, "comma-separated values")->required();
    sweep->add_option("--params", params_dir, "directory from `train`");

    auto* report = app.add_subcommand("report", "compare modes, or recompute a report from a log");
    add_common(report, c);
    report->add_option("--compare", compare, "comma-separated modes");
    report->add_option("--log", log_path, "recompute metrics from this event log")->check(CLI::ExistingFile);
    report->add_option("--params", params_dir, "directory from `train`");

    CLI11_PARSE(app, argc, argv);

    try {
        Config cfg = make_config(c);
        std::string cmd = command_line(argc, argv);

        if (synth->parsed()) {
            auto traces = synth_traces(cfg.synth, c.seed, count ? count : cfg.bench.traces);
            std::ostringstream ss;
            write_traces(ss, traces);
            emit(c.out, ss.str());
            return 0;
        }

        Corpus corpus = build_corpus(cfg.synth, cfg.retriever);

        if (label->parsed()) {
            auto traces = synth_traces(cfg.synth, c.seed, count ? count : cfg.train.traces);
            auto lc = LabelConfig::from(cfg);
            lc.seed = c.seed;
            std::ostringstream ss;
            for (const auto& li : label_traces(traces, corpus, lc)) ss << to_json(li).dump() << '\n';
            emit(c.out, ss.str());
            return 0;
        }

        if (train->parsed()) {
            if (c.out.empty()) throw std::invalid_argument("train: --out <directory> is required");
            fs::create_directories(c.out);
            auto b = train_bundle(cfg, corpus, c.seed);
            write_file((fs::path(c.out) / "predictor.bin").string(), serialize(*b.predictor));
            write_file((fs::path(c.out) / "monitor.bin").string(), serialize(*b.monitor));
            write_file((fs::path(c.out) / "policy.bin").string(), serialize(b.policy));
            nlohmann::json j = {{"header", report_header(cfg, c.seed, cmd)}, {"files", {"predictor.bin", "monitor.bin", "policy.bin"}}};
            std::cout << j.dump(2) << '\n';
            return 0;
        }

        if (bench->parsed() || (report->parsed() && !compare.empty())) {
            std::vector<BaselineMode> ms;
            for (const auto& m : split(bench->parsed() ? modes : compare)) ms.push_back(baseline_from(m));
            ParamsBundle p = needs_params(ms) ? load_params(params_dir, cfg, corpus, c.seed) : ParamsBundle{};
            auto traces = bench_traces(cfg, c.seed);
            ExecMode em = exec == "concurrent" ? ExecMode::Concurrent : ExecMode::Virtual;
            std::vector<MetricsReport> reps;
            for (auto m : ms) {
                auto r = run_baseline(m, cfg, traces, corpus, p, c.seed, em);
                if (!log_path.empty() && bench->parsed()) write_file(log_path, log_to_string(r.run.log));
                reps.push_back(r.report);
            }
            emit(c.out, report_json(cfg, c.seed, cmd, reps).dump(2) + "\n");
            if (!c.tsv.empty()) write_file(c.tsv, report_tsv(reps));
            return 0;
        }

        if (report->parsed()) {
            if (log_path.empty()) throw std::invalid_argument("report: give --compare or --log");
            std::ifstream in(log_path);
            auto log = read_log(in);
            auto rep = compute_metrics(log, cfg);
            emit(c.out, report_json(cfg, c.seed, cmd, {rep}).dump(2) + "\n");
            if (!c.tsv.empty()) write_file(c.tsv, report_tsv({rep}));
            return 0;
        }

        if (sweep->parsed()) {
            auto values = split_numbers(grid);
            nlohmann::json pts = nlohmann::json::array();
            std::string table;
            if (param == "latency") {
                auto p = load_params(params_dir, cfg, corpus, c.seed);
                auto res = sweep_latency(cfg, values, corpus, p, c.seed);
                for (const auto& r : res) pts.push_back(to_json(r));
                table = latency_tsv(res);
            } else {
                Config probe = cfg;
                for (double v : values) apply_hyper(probe, param, v);
                auto p = load_params(params_dir, cfg, corpus, c.seed);
                auto res = sweep_hyper(cfg, param, values, corpus, p, c.seed);
                for (const auto& r : res) pts.push_back(to_json(r));
                table = hyper_tsv(res);
            }
            emit(c.out, nlohmann::json{{"header", report_header(cfg, c.seed, cmd)}, {"points", pts}}.dump(2) + "\n");
            if (!c.tsv.empty()) write_file(c.tsv, table);
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "pfrag: %s\n", e.what());
        return 2;
    }
    return 0;
}
