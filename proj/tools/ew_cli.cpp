// ew: dense GLU transformer -> MoE conversion toolkit.
// Subcommands: gen-data, train, weave, cpt, eval, report.

#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ew/calibration.hpp"
#include "ew/checkpoint.hpp"
#include "ew/corpus.hpp"
#include "ew/evaluation.hpp"
#include "ew/model.hpp"
#include "ew/moe_runtime.hpp"
#include "ew/training.hpp"
#include "ew/weaving.hpp"

namespace fs = std::filesystem;
using ew::json;

namespace {

std::string iso_timestamp() {
    std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

std::string hex64(uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
    return buf;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    ew::require(bool(in), ew::ErrorKind::io, "cannot hash missing file: " + path);
    uint64_t h = 1469598103934665603ull;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= uint64_t(uint8_t(buf[i]));
            h *= 1099511628211ull;
        }
        if (!in) break;
    }
    return h;
}

// RunManifest: sits beside every artifact a command writes. Timestamps live
// here and only here; checkpoints and reports stay bitwise reproducible.
void write_run_manifest(const std::string& command, const json& config,
                        const std::vector<std::string>& inputs, const std::string& path) {
    json j;
    j["command"] = command;
    j["config"] = config;
    j["seeds"] = {{"master", config.value("seed", uint64_t(0))},
                  {"derivation", "splitmix64(seed xor fnv1a64(component))"}};
    json in = json::object();
    for (const auto& p : inputs) in[p] = hex64(file_hash(p));
    j["inputs"] = in;
    j["tool_version"] = ew::kVersion;
    j["timestamp"] = iso_timestamp();
    std::ofstream out(path, std::ios::trunc);
    ew::require(bool(out), ew::ErrorKind::io, "cannot write run manifest: " + path);
    out << j.dump(2) << "\n";
}

// JSON config file: flags > file > defaults. Applied only to options the
// user did not pass on the command line.
json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    ew::require(bool(in), ew::ErrorKind::io, "cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        ew::fail(ew::ErrorKind::parse, std::string("config file: ") + e.what());
    }
    ew::require(j.is_object(), ew::ErrorKind::parse, "config file must hold a JSON object");
    return j;
}

template <class T>
void apply_file_value(CLI::Option* opt, const json& file, const std::string& key, T& value) {
    if (opt->count() > 0) return;
    if (!file.contains(key)) return;
    value = file.at(key).get<T>();
}

// corpora load as one sample per line; calibration JSONL works too, with the
// record texts standing in for lines
std::vector<std::string> load_corpus_lines(const std::string& path) {
    if (ew::has_suffix(path, ".jsonl")) {
        ew::CalibrationSet set = ew::load_calibration_jsonl(path);
        std::vector<std::string> lines;
        for (const auto& sample : set.samples)
            lines.push_back(ew::tok::decode(sample.tokens));
        return lines;
    }
    return ew::load_text_lines(path);
}

struct HparamFlags {
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ffn = 512;
    int max_seq_len = 256;

    ew::Hparams to_hparams() const {
        ew::Hparams hp;
        hp.d_model = d_model;
        hp.n_layers = n_layers;
        hp.n_heads = n_heads;
        hp.d_ffn = d_ffn;
        hp.max_seq_len = max_seq_len;
        hp.validate();
        return hp;
    }
};

void add_hparam_flags(CLI::App* cmd, HparamFlags& hf) {
    cmd->add_option("--d-model", hf.d_model, "model width");
    cmd->add_option("--n-layers", hf.n_layers, "transformer blocks");
    cmd->add_option("--n-heads", hf.n_heads, "attention heads");
    cmd->add_option("--d-ffn", hf.d_ffn, "FFN width (neurons per layer)");
    cmd->add_option("--max-seq", hf.max_seq_len, "maximum sequence length");
}

int run(int argc, char** argv) {
    CLI::App app{
        "ExpertWeaver: convert dense GLU transformers into MoE models.\n"
        "Set EW_THREADS to cap worker threads (results are identical for any count)."};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path,
                   "JSON config file; command-line flags take precedence");

    // ---- gen-data ----------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "generate calibration + training corpora");
    int g_tasks = 42, g_clusters = 10, g_per_task = 5, g_train_lines = 8000;
    uint64_t g_seed = 1;
    std::string g_out_dir = ".";
    auto* og_tasks = gen->add_option("--tasks", g_tasks, "number of tasks");
    auto* og_clusters = gen->add_option("--clusters", g_clusters, "number of task clusters");
    auto* og_per = gen->add_option("--per-task", g_per_task, "calibration samples per task");
    auto* og_lines = gen->add_option("--train-lines", g_train_lines, "training corpus lines");
    auto* og_seed = gen->add_option("--seed", g_seed, "master seed");
    auto* og_out = gen->add_option("--out-dir", g_out_dir, "output directory");

    // ---- train --------------------------------------------------------------
    auto* train = app.add_subcommand("train", "pretrain the dense toy model");
    std::string t_corpus, t_out = "dense.ckpt", t_state_out, t_resume, t_loss_csv;
    ew::TrainConfig t_cfg;
    long t_run_steps = -1;
    HparamFlags t_hf;
    train->add_option("--corpus", t_corpus, "training text corpus")->required();
    train->add_option("--out", t_out, "output dense checkpoint");
    train->add_option("--state-out", t_state_out, "write resumable train state here");
    train->add_option("--resume", t_resume, "resume from a train-state checkpoint");
    train->add_option("--loss-csv", t_loss_csv, "write the loss trace CSV here");
    auto* ot_steps = train->add_option("--steps", t_cfg.total_steps, "total optimizer steps");
    train->add_option("--run-steps", t_run_steps,
                      "steps to execute this invocation (default: to --steps)");
    auto* ot_batch = train->add_option("--batch", t_cfg.batch_size, "sequences per step");
    auto* ot_seq = train->add_option("--seq-len", t_cfg.seq_len, "training window length");
    auto* ot_lr = train->add_option("--lr", t_cfg.lr_peak, "peak learning rate");
    auto* ot_lrmin = train->add_option("--lr-min", t_cfg.lr_min, "final learning rate");
    auto* ot_warm = train->add_option("--warmup", t_cfg.warmup_steps, "warmup steps");
    auto* ot_wd = train->add_option("--wd", t_cfg.weight_decay, "weight decay");
    auto* ot_seed = train->add_option("--seed", t_cfg.seed, "master seed");
    add_hparam_flags(train, t_hf);

    // ---- weave ---------------------------------------------------------------
    auto* weave = app.add_subcommand("weave", "convert a dense checkpoint into a MoE");
    std::string w_model, w_calib, w_out = "moe.ckpt", w_report, w_dump_acts;
    ew::WeaverConfig w_cfg;
    double w_uniform_shared = 0.0;
    std::string w_mode = "pruning";
    weave->add_option("--model", w_model, "dense checkpoint")->required();
    weave->add_option("--calib", w_calib, "calibration JSONL")->required();
    weave->add_option("--out", w_out, "output MoE checkpoint");
    weave->add_option("--report", w_report, "write the per-layer allocation report here");
    weave->add_option("--dump-activations", w_dump_acts,
                      "optionally dump captured activation matrices");
    auto* ow_ne = weave->add_option("--n-experts", w_cfg.n_experts, "expert granularity");
    auto* ow_k = weave->add_option("--k", w_cfg.k_active, "active experts per token");
    auto* ow_amin = weave->add_option("--alpha-min", w_cfg.alpha_min, "shared ratio floor");
    auto* ow_amax = weave->add_option("--alpha-max", w_cfg.alpha_max, "shared ratio cap");
    auto* ow_tau = weave->add_option("--tau", w_cfg.tau, "CV specialization threshold");
    auto* ow_mode = weave->add_option("--mode", w_mode, "pruning | downcycling");
    auto* ow_us = weave->add_option(
        "--uniform-shared", w_uniform_shared,
        "downcycling: number of shared experts (uniform across layers)");
    auto* ow_seed = weave->add_option("--seed", w_cfg.seed, "master seed");

    // ---- cpt ------------------------------------------------------------------
    auto* cpt = app.add_subcommand("cpt", "continued pretraining of a downcycled MoE");
    std::string c_model, c_corpus, c_out = "moe_cpt.ckpt", c_loss_csv;
    ew::TrainConfig c_cfg;
    c_cfg.total_steps = 300;
    cpt->add_option("--model", c_model, "MoE checkpoint (downcycling mode)")->required();
    cpt->add_option("--corpus", c_corpus, "training text corpus")->required();
    cpt->add_option("--out", c_out, "output MoE checkpoint");
    cpt->add_option("--loss-csv", c_loss_csv, "write the loss trace CSV here");
    auto* oc_steps = cpt->add_option("--steps", c_cfg.total_steps, "total optimizer steps");
    auto* oc_batch = cpt->add_option("--batch", c_cfg.batch_size, "sequences per step");
    auto* oc_seq = cpt->add_option("--seq-len", c_cfg.seq_len, "training window length");
    auto* oc_lr = cpt->add_option("--lr", c_cfg.lr_peak, "peak learning rate");
    auto* oc_lrmin = cpt->add_option("--lr-min", c_cfg.lr_min, "final learning rate");
    auto* oc_warm = cpt->add_option("--warmup", c_cfg.warmup_steps, "warmup steps");
    auto* oc_wd = cpt->add_option("--wd", c_cfg.weight_decay, "weight decay");
    auto* oc_lambda = cpt->add_option("--lambda", c_cfg.lambda_lb,
                                      "load-balance loss coefficient");
    auto* oc_seed = cpt->add_option("--seed", c_cfg.seed, "master seed");

    // ---- eval -----------------------------------------------------------------
    auto* eval = app.add_subcommand(
        "eval", "compare dense / AbsTopK / magnitude / woven at matched sparsity");
    std::string e_model, e_calib, e_corpus, e_out = "eval_report.json", e_csv;
    std::string e_sparsity = "0.25,0.5";
    ew::WeaverConfig e_cfg;
    int e_seq_len = 64;
    size_t e_max_windows = 0;
    eval->add_option("--model", e_model, "trained dense checkpoint")->required();
    eval->add_option("--calib", e_calib, "calibration JSONL")->required();
    eval->add_option("--corpus", e_corpus, "text corpus (held-out split is taken from it)")
        ->required();
    eval->add_option("--sparsity", e_sparsity, "comma-separated FFN sparsity targets");
    eval->add_option("--out", e_out, "output JSON report");
    eval->add_option("--csv", e_csv, "optional CSV report");
    eval->add_option("--eval-seq-len", e_seq_len, "evaluation window length");
    eval->add_option("--max-eval-windows", e_max_windows,
                     "cap on evaluation windows (0 = all)");
    auto* oe_ne = eval->add_option("--n-experts", e_cfg.n_experts, "expert granularity");
    auto* oe_amin = eval->add_option("--alpha-min", e_cfg.alpha_min, "shared ratio floor");
    auto* oe_amax = eval->add_option("--alpha-max", e_cfg.alpha_max, "shared ratio cap");
    auto* oe_tau = eval->add_option("--tau", e_cfg.tau, "CV specialization threshold");
    auto* oe_seed = eval->add_option("--seed", e_cfg.seed, "master seed");

    // ---- report ----------------------------------------------------------------
    auto* report = app.add_subcommand("report", "export routing statistics");
    std::string r_model, r_calib, r_out = "routing.jsonl";
    bool r_routing = false;
    report->add_flag("--routing", r_routing, "emit task x expert selection frequencies");
    report->add_option("--model", r_model, "MoE checkpoint")->required();
    report->add_option("--calib", r_calib, "calibration JSONL")->required();
    report->add_option("--out", r_out, "output JSONL path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        json err{{"error", {{"kind", "usage"}, {"message", e.what()}}}};
        std::cerr << err.dump() << std::endl;
        return 2;
    }

    json file_cfg = load_config_file(config_path);

    if (gen->parsed()) {
        apply_file_value(og_tasks, file_cfg, "tasks", g_tasks);
        apply_file_value(og_clusters, file_cfg, "clusters", g_clusters);
        apply_file_value(og_per, file_cfg, "per_task", g_per_task);
        apply_file_value(og_lines, file_cfg, "train_lines", g_train_lines);
        apply_file_value(og_seed, file_cfg, "seed", g_seed);
        apply_file_value(og_out, file_cfg, "out_dir", g_out_dir);
        ew::SyntheticConfig scfg;
        scfg.tasks = g_tasks;
        scfg.clusters = g_clusters;
        scfg.samples_per_task = g_per_task;
        scfg.seed = g_seed;
        ew::CalibrationSet calib = ew::build_synthetic_calibration(scfg);
        auto lines = ew::build_synthetic_corpus_lines(scfg, g_train_lines);
        fs::create_directories(g_out_dir);
        std::string calib_path = (fs::path(g_out_dir) / "calib.jsonl").string();
        std::string train_path = (fs::path(g_out_dir) / "train.txt").string();
        ew::save_calibration_jsonl(calib, calib_path);
        ew::save_text_lines(lines, train_path);
        json cfg{{"tasks", g_tasks},   {"clusters", g_clusters},
                 {"per_task", g_per_task}, {"train_lines", g_train_lines},
                 {"seed", g_seed},     {"out_dir", g_out_dir}};
        write_run_manifest("gen-data", cfg, {},
                           (fs::path(g_out_dir) / "run_manifest.gen-data.json").string());
        std::cout << "wrote " << calib_path << " (" << calib.size() << " samples) and "
                  << train_path << " (" << lines.size() << " lines)\n";
        return 0;
    }

    if (train->parsed()) {
        apply_file_value(ot_steps, file_cfg, "steps", t_cfg.total_steps);
        apply_file_value(ot_batch, file_cfg, "batch", t_cfg.batch_size);
        apply_file_value(ot_seq, file_cfg, "seq_len", t_cfg.seq_len);
        apply_file_value(ot_lr, file_cfg, "lr", t_cfg.lr_peak);
        apply_file_value(ot_lrmin, file_cfg, "lr_min", t_cfg.lr_min);
        apply_file_value(ot_warm, file_cfg, "warmup", t_cfg.warmup_steps);
        apply_file_value(ot_wd, file_cfg, "wd", t_cfg.weight_decay);
        apply_file_value(ot_seed, file_cfg, "seed", t_cfg.seed);
        auto stream = ew::lines_to_stream(load_corpus_lines(t_corpus));
        ew::DenseGluModel model;
        ew::OptimizerState<ew::DenseGluModel> opt;
        if (!t_resume.empty()) {
            ew::load_train_state(t_resume, model, opt);
        } else {
            model = ew::init_dense_model(t_hf.to_hparams(),
                                         ew::derive_seed(t_cfg.seed, "model_init"));
            opt = ew::fresh_optimizer(model);
        }
        auto trace = ew::train_dense(model, opt, t_cfg, stream, t_run_steps);
        ew::save_checkpoint(model, t_out);
        if (!t_state_out.empty()) ew::save_train_state(model, opt, t_state_out);
        if (!t_loss_csv.empty()) ew::write_loss_csv(trace, t_loss_csv);
        json cfg{{"corpus", t_corpus},   {"out", t_out},
                 {"steps", t_cfg.total_steps}, {"batch", t_cfg.batch_size},
                 {"seq_len", t_cfg.seq_len},   {"lr", t_cfg.lr_peak},
                 {"lr_min", t_cfg.lr_min},     {"warmup", t_cfg.warmup_steps},
                 {"wd", t_cfg.weight_decay},   {"seed", t_cfg.seed},
                 {"resumed_from", t_resume},   {"d_model", t_hf.d_model},
                 {"n_layers", t_hf.n_layers},  {"d_ffn", t_hf.d_ffn}};
        write_run_manifest("train", cfg, {t_corpus}, t_out + ".manifest.json");
        double final_loss = trace.empty() ? -1.0 : trace.back().l_ntp;
        std::cout << "trained " << opt.step << "/" << t_cfg.total_steps
                  << " steps, final loss " << final_loss << ", wrote " << t_out << "\n";
        return 0;
    }

    if (weave->parsed()) {
        apply_file_value(ow_ne, file_cfg, "n_experts", w_cfg.n_experts);
        apply_file_value(ow_k, file_cfg, "k", w_cfg.k_active);
        apply_file_value(ow_amin, file_cfg, "alpha_min", w_cfg.alpha_min);
        apply_file_value(ow_amax, file_cfg, "alpha_max", w_cfg.alpha_max);
        apply_file_value(ow_tau, file_cfg, "tau", w_cfg.tau);
        apply_file_value(ow_mode, file_cfg, "mode", w_mode);
        apply_file_value(ow_us, file_cfg, "uniform_shared", w_uniform_shared);
        apply_file_value(ow_seed, file_cfg, "seed", w_cfg.seed);
        w_cfg.mode = ew::moe_mode_from_name(w_mode);
        ew::DenseGluModel dense = ew::load_checkpoint(w_model);
        ew::CalibrationSet calib = ew::load_calibration_jsonl(w_calib);
        w_cfg.uniform_shared_ratio = w_uniform_shared / double(w_cfg.n_experts);
        w_cfg.validate();
        ew::require(dense.hp.d_ffn % w_cfg.n_experts == 0, ew::ErrorKind::config,
                    "weave: d_ffn (" + std::to_string(dense.hp.d_ffn) +
                        ") is not divisible by --n-experts (" +
                        std::to_string(w_cfg.n_experts) + ")");
        ew::CaptureResult capture = ew::capture_activations(dense, calib);
        std::vector<ew::LayerAllocation> allocs;
        if (w_cfg.mode == ew::MoeMode::downcycling) {
            allocs = ew::allocate_uniform(w_cfg, dense.hp.d_ffn, dense.hp.n_layers);
        } else {
            for (int l = 0; l < dense.hp.n_layers; ++l) {
                ew::Matrix prof = ew::per_task_profiles(capture.layers[size_t(l)], calib);
                auto cv = ew::coefficient_of_variation(prof, w_cfg.epsilon);
                allocs.push_back(ew::allocate_layer(cv, w_cfg, dense.hp.d_ffn, l));
            }
        }
        ew::MoeModel moe = ew::weave_model(dense, capture.layers, allocs, w_cfg);
        ew::save_moe_checkpoint(moe, w_out);
        if (!w_report.empty()) {
            std::ofstream out(w_report, std::ios::trunc);
            ew::require(bool(out), ew::ErrorKind::io, "cannot write report: " + w_report);
            out << ew::allocation_report(allocs).dump(2) << "\n";
        }
        if (!w_dump_acts.empty()) {
            json manifest;
            manifest["model_type"] = "activations";
            manifest["hparams"] = ew::hparams_to_json(dense.hp);
            std::vector<ew::TensorView> tensors;
            for (size_t l = 0; l < capture.layers.size(); ++l)
                tensors.push_back(ew::tensor_view("layer" + std::to_string(l) + ".A",
                                                  capture.layers[l].a));
            ew::write_container(w_dump_acts, std::move(manifest), tensors);
        }
        json cfg = ew::weaver_config_to_json(w_cfg);
        cfg["model"] = w_model;
        cfg["calib"] = w_calib;
        cfg["out"] = w_out;
        write_run_manifest("weave", cfg, {w_model, w_calib}, w_out + ".manifest.json");
        std::cout << "wove " << dense.hp.n_layers << " layers into " << w_cfg.n_experts
                  << " experts (" << ew::moe_mode_name(w_cfg.mode) << "), wrote " << w_out
                  << "\n";
        for (const auto& a : allocs)
            std::cout << "  layer " << a.layer_index << ": r=" << a.r << " alpha=" << a.alpha
                      << " n_se=" << a.n_se << " n_re=" << a.n_re << "\n";
        if (!capture.warnings.empty())
            std::cout << "  " << capture.warnings.size() << " capture warning(s)\n";
        return 0;
    }

    if (cpt->parsed()) {
        apply_file_value(oc_steps, file_cfg, "steps", c_cfg.total_steps);
        apply_file_value(oc_batch, file_cfg, "batch", c_cfg.batch_size);
        apply_file_value(oc_seq, file_cfg, "seq_len", c_cfg.seq_len);
        apply_file_value(oc_lr, file_cfg, "lr", c_cfg.lr_peak);
        apply_file_value(oc_lrmin, file_cfg, "lr_min", c_cfg.lr_min);
        apply_file_value(oc_warm, file_cfg, "warmup", c_cfg.warmup_steps);
        apply_file_value(oc_wd, file_cfg, "wd", c_cfg.weight_decay);
        apply_file_value(oc_lambda, file_cfg, "lambda", c_cfg.lambda_lb);
        apply_file_value(oc_seed, file_cfg, "seed", c_cfg.seed);
        ew::MoeModel model = ew::load_moe_checkpoint(c_model);
        auto stream = ew::lines_to_stream(load_corpus_lines(c_corpus));
        auto opt = ew::fresh_optimizer(model);
        auto trace = ew::cpt_moe(model, opt, c_cfg, stream);
        ew::save_moe_checkpoint(model, c_out);
        if (!c_loss_csv.empty()) ew::write_loss_csv(trace, c_loss_csv);
        json cfg{{"model", c_model},          {"corpus", c_corpus},
                 {"out", c_out},              {"steps", c_cfg.total_steps},
                 {"batch", c_cfg.batch_size}, {"seq_len", c_cfg.seq_len},
                 {"lr", c_cfg.lr_peak},       {"lambda", c_cfg.lambda_lb},
                 {"seed", c_cfg.seed}};
        write_run_manifest("cpt", cfg, {c_model, c_corpus}, c_out + ".manifest.json");
        double final_total = trace.empty() ? -1.0 : trace.back().l_total;
        std::cout << "cpt " << trace.size() << " steps, final total loss " << final_total
                  << ", wrote " << c_out << "\n";
        return 0;
    }

    if (eval->parsed()) {
        apply_file_value(oe_ne, file_cfg, "n_experts", e_cfg.n_experts);
        apply_file_value(oe_amin, file_cfg, "alpha_min", e_cfg.alpha_min);
        apply_file_value(oe_amax, file_cfg, "alpha_max", e_cfg.alpha_max);
        apply_file_value(oe_tau, file_cfg, "tau", e_cfg.tau);
        apply_file_value(oe_seed, file_cfg, "seed", e_cfg.seed);
        std::vector<double> targets;
        {
            std::string item;
            std::stringstream ss(e_sparsity);
            while (std::getline(ss, item, ','))
                if (!item.empty()) targets.push_back(std::stod(item));
        }
        ew::require(!targets.empty(), ew::ErrorKind::param, "eval: no sparsity targets");
        ew::DenseGluModel dense = ew::load_checkpoint(e_model);
        ew::CalibrationSet calib = ew::load_calibration_jsonl(e_calib);
        auto lines = load_corpus_lines(e_corpus);
        auto split = ew::split_lines_90_10(lines);
        auto heldout = ew::lines_to_stream(split.heldout);
        ew::CompareOptions opts;
        opts.eval_seq_len = e_seq_len;
        opts.max_eval_windows = e_max_windows;
        auto reports = ew::compare_methods(dense, calib, heldout, targets, e_cfg, opts);
        std::cout << ew::format_reports_table(reports);
        json arr = json::array();
        for (const auto& r : reports) arr.push_back(ew::report_to_json(r));
        json doc{{"reports", arr}, {"corpus_hash", hex64(ew::stream_hash(heldout))}};
        std::ofstream out(e_out, std::ios::trunc);
        ew::require(bool(out), ew::ErrorKind::io, "cannot write report: " + e_out);
        out << doc.dump(2) << "\n";
        if (!e_csv.empty()) {
            std::ofstream csv(e_csv, std::ios::trunc);
            ew::require(bool(csv), ew::ErrorKind::io, "cannot write csv: " + e_csv);
            csv << ew::format_reports_csv(reports);
        }
        json cfg{{"model", e_model},        {"calib", e_calib}, {"corpus", e_corpus},
                 {"sparsity", e_sparsity},  {"out", e_out},     {"seed", e_cfg.seed}};
        write_run_manifest("eval", cfg, {e_model, e_calib, e_corpus},
                           e_out + ".manifest.json");
        return 0;
    }

    if (report->parsed()) {
        ew::require(r_routing, ew::ErrorKind::param,
                    "report: nothing to do (pass --routing)");
        ew::MoeModel model = ew::load_moe_checkpoint(r_model);
        ew::CalibrationSet calib = ew::load_calibration_jsonl(r_calib);
        ew::RoutingSpecialization rep = ew::routing_specialization_report(model, calib);
        std::ofstream out(r_out, std::ios::trunc);
        ew::require(bool(out), ew::ErrorKind::io, "cannot write: " + r_out);
        out << ew::routing_report_jsonl(rep);
        json cfg{{"model", r_model}, {"calib", r_calib}, {"out", r_out}};
        write_run_manifest("report", cfg, {r_model, r_calib}, r_out + ".manifest.json");
        std::cout << "wrote routing statistics for " << rep.freq.size() << " layers x "
                  << rep.tasks.size() << " tasks to " << r_out << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ew::Error& e) {
        json err{{"error",
                  {{"kind", ew::error_kind_name(e.kind())}, {"message", e.what()}}}};
        std::cerr << err.dump() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        json err{{"error", {{"kind", "internal"}, {"message", e.what()}}}};
        std::cerr << err.dump() << std::endl;
        return 1;
    }
}
