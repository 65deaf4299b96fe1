#pragma once

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "iseg.hpp"
#include "iseg/plot.hpp"

namespace iseg::cli {

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2, kIo = 3, kIncompatible = 4, kCheckpointMismatch = 5 };

namespace fs = std::filesystem;

inline int exit_code_for(const Error& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kUsage;
    if (dynamic_cast<const IoError*>(&e)) return kIo;
    if (dynamic_cast<const CompatibilityError*>(&e)) return kIncompatible;
    if (dynamic_cast<const CheckpointMismatchError*>(&e)) return kCheckpointMismatch;
    return kRuntime;
}

inline std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos) throw ConfigError("--size: expected HxW, got '" + s + "'");
    return {detail::parse_uint("--size", s.substr(0, x)), detail::parse_uint("--size", s.substr(x + 1))};
}

inline void write_file(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

// ---------------------------------------------------------------------------------------------

struct GenDataArgs {
    std::size_t scenes = 40, rigs = 5, classes = 8;
    std::string size = "96x128";
    std::uint64_t seed = 1;
    std::string out;
};

inline int gen_data(const GenDataArgs& a, std::ostream& out) {
    const auto [h, w] = parse_size(a.size);
    if (a.classes < 2 || a.classes > 256) throw ConfigError("--classes must be in [2, 256]");
    if (a.scenes < 2) throw ConfigError("--scenes must be at least 2");
    if (a.rigs < 1) throw ConfigError("--rigs must be at least 1");
    const auto m = generate_dataset(a.scenes, a.rigs, a.out, a.seed, {a.classes, h, w});
    out << "wrote " << m.num_samples() << " samples (train " << m.count(Split::train) << ", test "
        << m.count(Split::test) << ") to " << a.out << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------------------------

struct TrainArgs {
    std::string config, experiment, data, out;
    std::vector<std::string> sets;
    std::optional<std::size_t> epochs, batch_size;
    std::optional<std::uint64_t> seed;
    std::optional<double> lr, w;
    std::optional<std::string> resolution, trainable_heads, albedo_checkpoint, init_checkpoint;
    std::optional<bool> train_encoder, eval_every_epoch;
    std::string sweep;
};

inline TrainConfig build_config(const TrainArgs& a) {
    TrainConfig cfg;
    if (!a.config.empty()) cfg = TrainConfig::from_file(a.config);
    if (!a.experiment.empty()) cfg.set("experiment", a.experiment);
    for (const auto& kv : a.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.batch_size) cfg.batch_size = *a.batch_size;
    if (a.seed) cfg.seed = *a.seed;
    if (a.lr) cfg.optimizer.lr = *a.lr;
    if (a.w) cfg.loss.w = *a.w;
    if (a.resolution) cfg.set("resolution", *a.resolution);
    if (a.trainable_heads) cfg.set("trainable_heads", *a.trainable_heads);
    if (a.albedo_checkpoint) cfg.albedo_checkpoint = *a.albedo_checkpoint;
    if (a.init_checkpoint) cfg.init_checkpoint = *a.init_checkpoint;
    if (a.train_encoder) cfg.train_encoder = *a.train_encoder;
    if (a.eval_every_epoch) cfg.eval_every_epoch = *a.eval_every_epoch;
    return cfg;
}

inline std::string epoch_line(std::size_t epoch, std::size_t total_epochs, const EpochRecord& r) {
    std::ostringstream os;
    os << "epoch " << epoch << '/' << total_epochs;
    bool joint = false;
    for (const auto& [k, v] : r.terms) joint = joint || k == "weighted_ce";
    if (joint) {
        os << std::setprecision(6) << "  total " << r.get("total") << " = ce " << r.get("weighted_ce") << " + intrinsic "
           << r.get("weighted_intrinsic") << "  (raw ce " << r.get("cross_entropy") << ", raw intrinsic "
           << r.get("intrinsic") << ')';
        for (const auto& [k, v] : r.terms) {
            if (k.rfind("test_", 0) == 0) os << "  " << k << ' ' << v;
        }
    } else {
        for (const auto& [k, v] : r.terms) os << "  " << k << ' ' << std::setprecision(6) << v;
    }
    return os.str();
}

inline std::vector<double> parse_w_list(const std::string& s) {
    std::vector<double> out;
    if (s == "default") return default_w_values();
    for (const auto& item : iseg::detail::split_csv(s)) out.push_back(detail::parse_double("--sweep-w", detail::trim(item)));
    if (out.empty()) throw ConfigError("--sweep-w needs at least one value");
    return out;
}

inline int train(const TrainArgs& a, std::ostream& out) {
    TrainConfig cfg = build_config(a);
    cfg.validate();
    RunOptions opts;
    const std::size_t total = *cfg.epochs;
    opts.on_epoch = [&](std::size_t e, const EpochRecord& r) { out << epoch_line(e, total, r) << std::endl; };
    if (!a.sweep.empty()) {
        if (cfg.experiment != Experiment::joint && !a.experiment.empty()) {
            throw ConfigError("--sweep-w runs the joint experiment; --experiment " + a.experiment + " conflicts");
        }
        const auto rows = sweep_w(parse_w_list(a.sweep), cfg, a.data, a.out, opts);
        write_sweep_table(out, rows);
        return kOk;
    }
    const auto rec = run_experiment(cfg, a.data, a.out, opts);
    out << "config " << hex64(rec.config_hash) << "  wrote " << (fs::path(a.out) / rec.checkpoint).string() << '\n';
    metrics::write_report_text(out, rec.report);
    return kOk;
}

// ---------------------------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, data, out, split = "test", albedo_checkpoint;
    bool oracle = false;
};

inline int eval(const EvalArgs& a, std::ostream& out) {
    const Split split = parse_split(a.split);
    const DatasetManifest m = load_manifest(a.data);
    const auto samples = load_split(a.data, m, split);
    if (samples.empty()) throw CompatibilityError(std::string(to_string(split)) + " split is empty");
    std::vector<metrics::Prediction> preds;
    if (a.oracle) {
        for (const auto& s : samples) preds.push_back({s.reflectance, s.shading, s.labels});
    } else {
        Network<float> net = load_checkpoint(a.checkpoint);
        const auto& spec = net.spec();
        if (spec.has(Head::segmentation) && spec.num_classes != m.num_classes) {
            throw CheckpointMismatchError("checkpoint predicts " + std::to_string(spec.num_classes) + " classes, dataset has " +
                                          std::to_string(m.num_classes));
        }
        const std::size_t div = spec.resolution_divisor();
        if (m.height % div != 0 || m.width % div != 0) {
            throw CheckpointMismatchError("dataset resolution is not divisible by " + std::to_string(div));
        }
        std::optional<Network<float>> albedo_model;
        if (!a.albedo_checkpoint.empty()) {
            if (spec.input != InputMode::albedo) throw ConfigError("--albedo-checkpoint applies only to albedo-input models");
            albedo_model.emplace(load_checkpoint(a.albedo_checkpoint));
        }
        preds = predict(net, make_inputs(samples, spec.input, albedo_model ? &*albedo_model : nullptr));
    }
    const auto report = metrics::evaluate(preds, samples, m.class_names);
    ensure_dir(a.out);
    std::ostringstream kv, text;
    metrics::write_report_kv(kv, report);
    metrics::write_report_text(text, report);
    write_file(fs::path(a.out) / "eval_report.kv", kv.str());
    write_file(fs::path(a.out) / "eval_report.txt", text.str());
    if (report.confusion) {
        std::ostringstream csv;
        metrics::write_confusion_csv(csv, *report.confusion, m.class_names);
        write_file(fs::path(a.out) / "confusion.csv", csv.str());
    }
    out << text.str();
    return kOk;
}

// ---------------------------------------------------------------------------------------------

struct CompareArgs {
    std::vector<std::string> runs;
    std::string out;
};

inline int compare(const CompareArgs& a, std::ostream& out, std::ostream& err) {
    if (a.runs.empty()) throw ConfigError("--runs needs at least one run directory");
    std::vector<std::string> names;
    std::vector<std::vector<std::pair<std::string, std::string>>> reports;
    for (const auto& r : a.runs) {
        reports.push_back(read_kv_file(fs::path(r) / "eval_report.kv"));
        std::string name = fs::path(r).filename().string();
        if (name.empty()) name = fs::path(r).parent_path().filename().string();
        if (std::find(names.begin(), names.end(), name) != names.end()) name = std::to_string(names.size() + 1) + ":" + name;
        names.push_back(name);
    }
    auto keys_of = [](const auto& rep) {
        std::vector<std::string> k;
        for (const auto& [key, v] : rep) {
            if (key != "num_images" && key != "std_convention") k.push_back(key);
        }
        return k;
    };
    const auto keys = keys_of(reports.front());
    for (std::size_t i = 1; i < reports.size(); ++i) {
        if (keys_of(reports[i]) != keys) {
            err << "error: metric sets differ between " << names.front() << " and " << names[i] << '\n';
            return kUsage;
        }
    }
    const bool delta = reports.size() >= 2;
    std::ostringstream table, csv;
    table << std::left << std::setw(24) << "metric";
    csv << "metric";
    for (const auto& n : names) {
        table << std::setw(16) << n;
        csv << ',' << n;
    }
    if (delta) {
        table << std::setw(16) << "delta";
        csv << ",delta";
    }
    table << '\n';
    csv << '\n';
    for (const auto& key : keys) {
        table << std::setw(24) << key;
        csv << key;
        std::vector<double> values;
        for (const auto& rep : reports) {
            const auto it = std::find_if(rep.begin(), rep.end(), [&](const auto& p) { return p.first == key; });
            const double v = it->second == "nan" ? NAN : std::stod(it->second);
            values.push_back(v);
            std::ostringstream cell;
            if (std::isnan(v)) {
                cell << "n/a";
            } else {
                cell << std::fixed << std::setprecision(4) << v;
            }
            table << std::setw(16) << cell.str();
            csv << ',' << it->second;
        }
        if (delta) {
            const double d = values.back() - values.front();
            std::ostringstream cell;
            if (std::isnan(d)) {
                cell << "n/a";
            } else {
                cell << std::showpos << std::fixed << std::setprecision(4) << d;
            }
            table << std::setw(16) << cell.str();
            csv << ',' << (std::isnan(d) ? std::string("nan") : detail::fmt_double(d));
        }
        table << '\n';
        csv << '\n';
    }
    out << table.str();
    if (!a.out.empty()) {
        ensure_dir(a.out);
        write_file(fs::path(a.out) / "compare.txt", table.str());
        write_file(fs::path(a.out) / "compare.csv", csv.str());
        for (std::size_t i = 0; i < a.runs.size(); ++i) {
            const fs::path src = fs::path(a.runs[i]) / "confusion.csv";
            if (!fs::exists(src)) continue;
            std::ifstream is(src, std::ios::binary);
            std::stringstream ss;
            ss << is.rdbuf();
            std::string safe = names[i];
            std::replace(safe.begin(), safe.end(), ':', '_');
            write_file(fs::path(a.out) / ("confusion_" + safe + ".csv"), ss.str());
        }
    }
    return kOk;
}

// ---------------------------------------------------------------------------------------------

struct ReportArgs {
    std::string run;
    bool plots = false;
};

inline int report(const ReportArgs& a, std::ostream& out) {
    const fs::path dir = a.run;
    const auto record = read_kv_file(dir / "run_record.kv");
    const auto traces = read_traces(dir / "run_record.kv");
    const auto eval_kv = read_kv_file(dir / "eval_report.kv");

    std::ostringstream text;
    for (const auto& [k, v] : record) {
        if (k == "experiment" || k == "config_hash" || k == "epochs") text << k << ": " << v << '\n';
    }
    for (const auto& [name, t] : traces) {
        if (t.empty()) continue;
        text << "loss " << name << ": first " << detail::fmt_double(t.front()) << "  last " << detail::fmt_double(t.back())
             << "  min " << detail::fmt_double(*std::min_element(t.begin(), t.end())) << '\n';
    }
    std::ifstream ev(dir / "eval_report.txt");
    if (ev) text << ev.rdbuf();
    write_file(dir / "report.txt", text.str());
    out << text.str();

    if (!a.plots) return kOk;
    std::vector<std::vector<double>> series;
    for (const auto& [name, t] : traces) {
        if (name.rfind("test_", 0) != 0) series.push_back(t);
    }
    plot::line_chart(series, true).write_ppm((dir / "loss_curves.ppm").string());
    std::vector<double> iou, intrinsic;
    for (const auto& [k, v] : eval_kv) {
        if (k.rfind("seg.iou.", 0) == 0) iou.push_back(v == "nan" ? NAN : std::stod(v));
        if ((k.rfind("albedo.", 0) == 0 || k.rfind("shading.", 0) == 0) && k.size() > 5 &&
            k.compare(k.size() - 5, 5, ".mean") == 0) {
            intrinsic.push_back(std::stod(v));
        }
    }
    std::vector<std::string> written{"loss_curves.ppm"};
    if (!iou.empty()) {
        plot::bar_chart(iou).write_ppm((dir / "class_iou.ppm").string());
        written.push_back("class_iou.ppm");
    }
    if (!intrinsic.empty()) {
        plot::bar_chart(intrinsic).write_ppm((dir / "intrinsic_metrics.ppm").string());
        written.push_back("intrinsic_metrics.ppm");
    }
    for (const auto& w : written) out << "wrote " << (dir / w).string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------------------------

/// Parses argv and runs one command. Output goes to `out`, diagnostics to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Joint intrinsic decomposition and semantic segmentation toolkit", "iseg"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.get_formatter()->column_width(36);

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset with an 80/20 scene split");
    gen->add_option("--scenes", gd.scenes, "Number of scenes");
    gen->add_option("--rigs", gd.rigs, "Light rigs rendered per scene");
    gen->add_option("--classes", gd.classes, "Number of semantic classes");
    gen->add_option("--size", gd.size, "Image size HxW");
    gen->add_option("--seed", gd.seed, "Master seed");
    gen->add_option("--out", gd.out, "Output directory")->required();

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train one experiment (or a w sweep) and evaluate it on the test split");
    tr->footer("Precedence: command-line flag > --set > config file > built-in default. epochs is required.");
    tr->add_option("--config", ta.config, "key=value config file");
    tr->add_option("--experiment", ta.experiment, std::string("Experiment (") + kExperimentNames + ")");
    tr->add_option("--data", ta.data, "Dataset directory")->required();
    tr->add_option("--out", ta.out, "Run output directory")->required();
    tr->add_option("--set", ta.sets, "Config override key=value (repeatable)")->default_str("");
    tr->add_option("--epochs", ta.epochs, "Training epochs");
    tr->add_option("--batch-size", ta.batch_size, "Batch size (default 4)");
    tr->add_option("--seed", ta.seed, "Run seed (default 1)");
    tr->add_option("--lr", ta.lr, "Adadelta learning rate (default 0.01)");
    auto* w_opt = tr->add_option("--w", ta.w, "Intrinsic-term weight w of the joint loss (default 2)");
    tr->add_option("--resolution", ta.resolution, "Expected dataset resolution HxW (default 96x128)");
    tr->add_option("--trainable-heads", ta.trainable_heads, "Heads to update: all or a comma list");
    tr->add_option("--train-encoder", ta.train_encoder, "Update encoder parameters (default true)");
    tr->add_option("--eval-every-epoch", ta.eval_every_epoch, "Evaluate on the test split after every epoch (default false)");
    tr->add_option("--albedo-checkpoint", ta.albedo_checkpoint, "Albedo model feeding cascade_albedo_to_seg");
    tr->add_option("--init-checkpoint", ta.init_checkpoint, "Warm-start checkpoint");
    auto* sweep_opt = tr->add_option("--sweep-w", ta.sweep, "Run the joint model once per w (comma list or 'default')");
    sweep_opt->excludes(w_opt);

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint (or the ground-truth oracle) on a dataset split");
    auto* ck_opt = ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint file");
    ev->add_option("--data", ea.data, "Dataset directory")->required();
    ev->add_option("--split", ea.split, "Split to evaluate (train or test)");
    ev->add_option("--out", ea.out, "Output directory for the report")->required();
    ev->add_option("--albedo-checkpoint", ea.albedo_checkpoint, "Albedo model feeding an albedo-input checkpoint");
    auto* or_opt = ev->add_flag("--oracle", ea.oracle, "Score ground truth against itself instead of a checkpoint");
    or_opt->excludes(ck_opt);

    CompareArgs ca;
    auto* cmp = app.add_subcommand("compare", "Side-by-side metric table of finished runs");
    cmp->add_option("--runs", ca.runs, "Run directories, comma separated")->default_str("")->required()->delimiter(',');
    cmp->add_option("--out", ca.out, "Directory for compare.txt, compare.csv and confusion copies");

    ReportArgs ra;
    auto* rep = app.add_subcommand("report", "Summarize a finished run, optionally with plots");
    rep->add_option("--run", ra.run, "Run directory")->required();
    rep->add_flag("--plots", ra.plots, "Also write PPM plots of loss curves and per-class scores");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) return gen_data(gd, out);
        if (*tr) return train(ta, out);
        if (*ev) {
            if (!ea.oracle && ea.checkpoint.empty()) throw ConfigError("eval needs --checkpoint or --oracle");
            return eval(ea, out);
        }
        if (*cmp) return compare(ca, out, err);
        if (*rep) return report(ra, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kIo;
    }
    return kUsage;
}

}  // namespace iseg::cli
