#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ew/calibration.hpp"
#include "ew/model.hpp"

using namespace ew;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("ew_calib_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

Hparams tiny_hparams() {
    Hparams hp;
    hp.vocab_size = tok::kVocab;
    hp.d_model = 16;
    hp.n_layers = 2;
    hp.n_heads = 2;
    hp.d_ffn = 24;
    hp.max_seq_len = 64;
    return hp;
}

}  // namespace

TEST_CASE("synthetic calibration: 42 tasks x 5 samples = 210") {
    SyntheticConfig cfg;
    cfg.tasks = 42;
    cfg.samples_per_task = 5;
    cfg.seed = 1;
    CalibrationSet set = build_synthetic_calibration(cfg);
    CHECK(set.size() == 210);
    CHECK(set.tasks.size() == 42);
    for (const auto& t : set.tasks) CHECK(set.task_counts.at(t) == 5);
}

TEST_CASE("synthetic calibration: degenerate 1x1") {
    SyntheticConfig cfg;
    cfg.tasks = 1;
    cfg.clusters = 1;
    cfg.samples_per_task = 1;
    CalibrationSet set = build_synthetic_calibration(cfg);
    CHECK(set.size() == 1);
    CHECK(set.samples[0].tokens.size() >= 1);
}

TEST_CASE("synthetic calibration is deterministic in the seed") {
    SyntheticConfig cfg;
    cfg.tasks = 6;
    cfg.samples_per_task = 3;
    cfg.seed = 42;
    CalibrationSet a = build_synthetic_calibration(cfg);
    CalibrationSet b = build_synthetic_calibration(cfg);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a.samples[i].tokens == b.samples[i].tokens);
        CHECK(a.samples[i].task == b.samples[i].task);
        CHECK(a.samples[i].cluster == b.samples[i].cluster);
    }
}

TEST_CASE("synthetic calibration rejects zero tasks") {
    SyntheticConfig cfg;
    cfg.tasks = 0;
    CHECK_THROWS_AS(build_synthetic_calibration(cfg), Error);
}

TEST_CASE("jsonl loader round-trips records") {
    TempDir tmp;
    std::string path = tmp.file("calib.jsonl");
    {
        std::ofstream out(path);
        out << R"({"task":"t0","cluster":"c0","text":"hello"})" << "\n";
        out << R"({"task":"t0","cluster":"c0","text":"world"})" << "\n";
        out << R"({"task":"t1","cluster":"c1","text":"abc"})" << "\n";
    }
    CalibrationSet set = load_calibration_jsonl(path);
    CHECK(set.size() == 3);
    CHECK(set.tasks == std::vector<std::string>{"t0", "t1"});
    CHECK(set.task_counts.at("t0") == 2);
    CHECK(tok::decode(set.samples[1].tokens) == "world");
}

TEST_CASE("jsonl loader names the bad line") {
    TempDir tmp;
    std::string path = tmp.file("bad.jsonl");
    {
        std::ofstream out(path);
        out << R"({"task":"t0","cluster":"c0","text":"ok"})" << "\n";
        out << R"({"task":"t0","cluster":"c0"})" << "\n";
    }
    try {
        load_calibration_jsonl(path);
        FAIL("expected parse error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::parse);
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("jsonl loader rejects an empty file") {
    TempDir tmp;
    std::string path = tmp.file("empty.jsonl");
    std::ofstream(path).close();
    CHECK_THROWS_AS(load_calibration_jsonl(path), Error);
}

TEST_CASE("capture with zero gate weights gives all-zero activations") {
    DenseGluModel m = init_dense_model(tiny_hparams(), 3);
    for (auto& b : m.blocks)
        for (auto& v : b.ffn.w_gate.data) v = 0.0f;
    SyntheticConfig cfg;
    cfg.tasks = 2;
    cfg.clusters = 2;
    cfg.samples_per_task = 2;
    CalibrationSet calib = build_synthetic_calibration(cfg);
    CaptureResult res = capture_activations(m, calib);
    REQUIRE(res.layers.size() == 2);
    for (const auto& lay : res.layers)
        for (float v : lay.a.data) CHECK(v == 0.0f);
}

TEST_CASE("one-token sample capture equals that token's gate activation") {
    DenseGluModel m = init_dense_model(tiny_hparams(), 4);
    CalibrationSet calib;
    CalibrationSample s;
    s.task = "t0";
    s.cluster = "c0";
    s.tokens = {65};
    calib.index_sample(s);
    calib.samples.push_back(s);
    CaptureResult res = capture_activations(m, calib);

    ForwardCapture<float> cap;
    model_forward(m, calib.samples[0].tokens, &cap);
    for (size_t l = 0; l < res.layers.size(); ++l)
        for (size_t j = 0; j < res.layers[l].a.rows; ++j)
            CHECK(res.layers[l].a.at(j, 0) == cap.gate_acts[l].at(0, j));
}

TEST_CASE("two-token capture matches the manual hook oracle") {
    // causality: position 0 activations come from the 1-token forward,
    // position 1 from the 2-token forward; average by hand.
    DenseGluModel m = init_dense_model(tiny_hparams(), 5);
    std::vector<int> two{72, 105};
    std::vector<int> one{72};

    CalibrationSet calib;
    CalibrationSample s;
    s.task = "t";
    s.cluster = "c";
    s.tokens = two;
    calib.index_sample(s);
    calib.samples.push_back(s);
    CaptureResult res = capture_activations(m, calib);

    ForwardCapture<float> cap1, cap2;
    model_forward(m, one, &cap1);
    model_forward(m, two, &cap2);
    for (size_t l = 0; l < res.layers.size(); ++l) {
        for (size_t j = 0; j < res.layers[l].a.rows; ++j) {
            double manual = 0.5 * (double(cap1.gate_acts[l].at(0, j)) +
                                   double(cap2.gate_acts[l].at(1, j)));
            CHECK(double(res.layers[l].a.at(j, 0)) == doctest::Approx(manual).epsilon(1e-6));
        }
    }
}

TEST_CASE("capture truncates long samples and records a warning") {
    Hparams hp = tiny_hparams();
    hp.max_seq_len = 8;
    DenseGluModel m = init_dense_model(hp, 6);
    CalibrationSet calib;
    CalibrationSample s;
    s.task = "t";
    s.cluster = "c";
    s.tokens.assign(20, 65);
    calib.index_sample(s);
    calib.samples.push_back(s);
    CaptureResult res = capture_activations(m, calib);
    CHECK(res.warnings.size() == 1);
    for (const auto& lay : res.layers)
        for (float v : lay.a.data) CHECK(std::isfinite(v));
}

TEST_CASE("capture column m depends only on sample m") {
    DenseGluModel m = init_dense_model(tiny_hparams(), 7);
    SyntheticConfig cfg;
    cfg.tasks = 3;
    cfg.clusters = 3;
    cfg.samples_per_task = 2;
    CalibrationSet calib = build_synthetic_calibration(cfg);
    CaptureResult base = capture_activations(m, calib);

    CalibrationSet rev;
    for (auto it = calib.samples.rbegin(); it != calib.samples.rend(); ++it) {
        rev.index_sample(*it);
        rev.samples.push_back(*it);
    }
    CaptureResult flipped = capture_activations(m, rev);
    size_t M = calib.size();
    for (size_t l = 0; l < base.layers.size(); ++l)
        for (size_t j = 0; j < base.layers[l].a.rows; ++j)
            for (size_t c = 0; c < M; ++c)
                CHECK(base.layers[l].a.at(j, c) == flipped.layers[l].a.at(j, M - 1 - c));
}

TEST_CASE("per_task_profiles averages absolute values") {
    CalibrationSet calib;
    for (int i = 0; i < 2; ++i) {
        CalibrationSample s;
        s.task = "t0";
        s.cluster = "c0";
        s.tokens = {1};
        calib.index_sample(s);
        calib.samples.push_back(s);
    }
    ActivationMatrix am;
    am.a = Matrix(1, 2, {2.0f, -2.0f});
    Matrix prof = per_task_profiles(am, calib);
    CHECK(prof.rows == 1);
    CHECK(prof.cols == 1);
    CHECK(prof.at(0, 0) == 2.0f);
}

TEST_CASE("per_task_profiles of zero activations is zero") {
    CalibrationSet calib;
    CalibrationSample s;
    s.task = "t0";
    s.cluster = "c0";
    s.tokens = {1};
    calib.index_sample(s);
    calib.samples.push_back(s);
    ActivationMatrix am;
    am.a = Matrix(3, 1);
    Matrix prof = per_task_profiles(am, calib);
    for (float v : prof.data) CHECK(v == 0.0f);
}

TEST_CASE("per_task_profiles matches the scalar double-loop oracle") {
    Rng rng(9);
    CalibrationSet calib;
    for (int t = 0; t < 4; ++t)
        for (int i = 0; i < 3; ++i) {
            CalibrationSample s;
            s.task = "task" + std::to_string(t);
            s.cluster = "c";
            s.tokens = {1};
            calib.index_sample(s);
            calib.samples.push_back(s);
        }
    ActivationMatrix am;
    am.a = Matrix(6, 12);
    for (auto& v : am.a.data) v = float(rng.normal());
    Matrix prof = per_task_profiles(am, calib);
    for (size_t j = 0; j < 6; ++j)
        for (size_t t = 0; t < 4; ++t) {
            double acc = 0.0;
            for (size_t m = 0; m < 12; ++m)
                if (calib.samples[m].task == calib.tasks[t])
                    acc += std::abs(double(am.a.at(j, m)));
            acc /= 3.0;
            CHECK(std::abs(double(prof.at(j, t)) - acc) < 1e-7);
            CHECK(prof.at(j, t) >= 0.0f);
        }
}

TEST_CASE("per_task_profiles rejects a task with zero samples") {
    CalibrationSet calib;
    CalibrationSample s;
    s.task = "t0";
    s.cluster = "c0";
    s.tokens = {1};
    calib.index_sample(s);
    calib.samples.push_back(s);
    calib.tasks.push_back("ghost");
    calib.task_counts["ghost"] = 0;
    ActivationMatrix am;
    am.a = Matrix(2, 1);
    CHECK_THROWS_AS(per_task_profiles(am, calib), Error);
}

TEST_CASE("calibration jsonl save/load round-trip") {
    TempDir tmp;
    SyntheticConfig cfg;
    cfg.tasks = 4;
    cfg.samples_per_task = 2;
    cfg.seed = 11;
    CalibrationSet set = build_synthetic_calibration(cfg);
    std::string path = tmp.file("calib.jsonl");
    save_calibration_jsonl(set, path);
    CalibrationSet loaded = load_calibration_jsonl(path);
    REQUIRE(loaded.size() == set.size());
    for (size_t i = 0; i < set.size(); ++i) {
        CHECK(loaded.samples[i].tokens == set.samples[i].tokens);
        CHECK(loaded.samples[i].task == set.samples[i].task);
    }
}
