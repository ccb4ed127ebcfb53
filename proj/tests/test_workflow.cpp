// End-to-end use of the public C API and the command-line front end on a
// deliberately tiny configuration.

#include "speechprune/speechprune.h"

#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& root() {
    static const fs::path p = [] {
        const fs::path d = fs::temp_directory_path() / ("speechprune_workflow_" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return p;
}

std::string dir(const std::string& name) {
    return (root() / name).string();
}

json run(const std::string& command, json options, sprn_status expect = SPRN_OK) {
    char* out = nullptr;
    const sprn_status st = sprn_run_command(command.c_str(), options.dump().c_str(), &out);
    INFO(command, ": ", sprn_last_error_message());
    REQUIRE(st == expect);
    if (st != SPRN_OK) {
        return json(sprn_last_error_message());
    }
    json result = json::parse(out);
    sprn_string_free(out);
    return result;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json tiny_model() {
    return {{"layers", 4}, {"d_model", 32}, {"heads", 2}, {"d_mlp", 64}, {"steps", 30}, {"batch", 4}};
}

// Shared fixture: corpus, pretrained and trained checkpoints, speech path.
struct Pipeline {
    Pipeline() {
        sprn_set_log_level(0);
        run("gen", {{"out", dir("ds")}, {"corpus_size", 40}, {"seed", 1}});
        run("gen", {{"out", dir("ds_tl")}, {"corpus_size", 40}, {"seed", 1}, {"task", "translate"}});
        json pre = tiny_model();
        pre["dataset"] = dir("ds");
        pre["out"] = dir("pre");
        run("pretrain", pre);
        run("train", {{"checkpoint", dir("pre")}, {"dataset", dir("ds")}, {"out", dir("tr")}, {"steps", 20}});
        run("analyze", {{"checkpoint", dir("tr")}, {"dataset", dir("ds")}, {"out", dir("an")}});
    }
};

const Pipeline& pipeline() {
    static const Pipeline p;
    return p;
}

int cli(const std::string& args) {
    const std::string cmd = std::string(SPEECHPRUNE_CLI) + " -q " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("status names and version") {
    CHECK(std::string(sprn_status_name(SPRN_ERR_CHECKSUM)) == "checksum error");
    CHECK(std::string(sprn_status_name(SPRN_ERR_INVALID_ARGUMENT)) == "invalid-argument error");
    CHECK(std::string(sprn_version()).size() > 0);
    CHECK(std::string(sprn_command_names()).find("compare-paths\n") != std::string::npos);
}

TEST_CASE("metric entry points") {
    const char* refs[] = {"the cat sat"};
    const char* hyps[] = {"the dog sat"};
    double w = 0.0;
    REQUIRE(sprn_wer(refs, hyps, 1, &w) == SPRN_OK);
    CHECK(std::abs(w - 100.0 / 3) < 1e-9);
    const char* empty[] = {""};
    CHECK(sprn_wer(empty, hyps, 1, &w) == SPRN_ERR_UNDEFINED_METRIC);
    const float x[] = {1, 0}, y[] = {1, 1}, z[] = {0, 0};
    double d = 0.0;
    REQUIRE(sprn_angular_distance(x, y, 2, &d) == SPRN_OK);
    CHECK(std::abs(d - 0.25) < 1e-6);
    CHECK(sprn_angular_distance(x, z, 2, &d) == SPRN_ERR_DEGENERATE_VECTOR);
    CHECK(std::string(sprn_last_error_message()).size() > 0);
    CHECK(sprn_angular_distance(nullptr, y, 2, &d) == SPRN_ERR_INVALID_ARGUMENT);
    double delta = 0.0;
    REQUIRE(sprn_relative_degradation(2.36, 2.01, &delta) == SPRN_OK);
    CHECK(std::abs(delta - 0.1741) < 1e-4);
    CHECK(sprn_relative_degradation(1.0, 0.0, &delta) == SPRN_ERR_DOMAIN);
    char* norm = nullptr;
    REQUIRE(sprn_normalize_text("Hi, There!", &norm) == SPRN_OK);
    CHECK(std::string(norm) == "hi there");
    sprn_string_free(norm);
}

TEST_CASE("command option errors") {
    json bad = run("gen", {{"out", dir("bad")}, {"corpus_siz", 10}}, SPRN_ERR_CONFIG);
    CHECK(bad.get<std::string>().find("corpus_siz") != std::string::npos);
    run("nope", json::object(), SPRN_ERR_CONFIG);
    run("train", {{"checkpoint", dir("missing")}, {"dataset", dir("missing")}}, SPRN_ERR_IO);
    char* out = nullptr;
    CHECK(sprn_run_command("gen", "{not json", &out) == SPRN_ERR_CONFIG);
}

TEST_CASE("handles: checkpoint, dataset, analysis") {
    pipeline();
    sprn_checkpoint* ck = nullptr;
    REQUIRE(sprn_checkpoint_load(dir("tr").c_str(), &ck) == SPRN_OK);
    CHECK(sprn_checkpoint_num_layers(ck) == 4);
    sprn_dataset* ds = nullptr;
    REQUIRE(sprn_dataset_load(dir("ds").c_str(), &ds) == SPRN_OK);
    CHECK(sprn_dataset_size(ds) == 40);
    sprn_distance_matrix* dm = nullptr;
    REQUIRE(sprn_analyze(ck, ds, SPRN_MODE_SPEECH, "dev", &dm) == SPRN_OK);
    CHECK(sprn_distance_matrix_num_layers(dm) == 4);
    int ell = -1;
    double dist = 0.0;
    REQUIRE(sprn_optimal_block(dm, 2, &ell, &dist) == SPRN_OK);
    CHECK(ell >= 0);
    CHECK(ell + 2 < 4);
    double cell = 0.0;
    CHECK(sprn_distance_matrix_get(dm, 4, 0, &cell) == SPRN_ERR_RANGE);
    const json path = read_json(root() / "an" / "path.json");
    CHECK(path["entries"][1]["ell_star"].get<int>() == ell);
    char* csv = nullptr;
    REQUIRE(sprn_distance_matrix_heatmap_csv(dm, &csv) == SPRN_OK);
    CHECK(std::string(csv) == read_text(root() / "an" / "heatmap.csv"));
    sprn_string_free(csv);

    REQUIRE(sprn_checkpoint_prune(ck, 1, 2) == SPRN_OK);
    int ids[8];
    size_t count = 0;
    REQUIRE(sprn_checkpoint_layer_ids(ck, ids, 8, &count) == SPRN_OK);
    REQUIRE(count == 2);
    CHECK(ids[0] == 1);
    CHECK(ids[1] == 4);
    CHECK(sprn_checkpoint_prune(ck, 1, 1) == SPRN_ERR_PLAN);
    CHECK(sprn_checkpoint_prune(ck, 3, 1) == SPRN_ERR_RANGE);
    sprn_distance_matrix_free(dm);
    sprn_dataset_free(ds);
    sprn_checkpoint_free(ck);
}

TEST_CASE("prune, heal, eval and manifests") {
    pipeline();
    const json p = run("prune", {{"checkpoint", dir("tr")}, {"path", dir("an") + "/path.json"},
                                 {"drop_fraction", 0.25}, {"out", dir("pr")}});
    CHECK(p["removed_original_ids"].size() == 1);
    run("heal", {{"checkpoint", dir("pr")}, {"dataset", dir("ds")}, {"strategy", "joint"}, {"steps", 5},
                 {"out", dir("heal")}});
    run("heal", {{"checkpoint", dir("pr")}, {"dataset", dir("ds")}, {"strategy", "none"}, {"out", dir("h0")}},
        SPRN_ERR_CONFIG);
    run("heal", {{"checkpoint", dir("tr")}, {"dataset", dir("ds")}, {"strategy", "decoder"}, {"out", dir("h1")}},
        SPRN_ERR_CONSISTENCY);
    const json base = run("eval", {{"checkpoint", dir("tr")}, {"dataset", dir("ds")}, {"out", dir("ev0")}});
    CHECK(base["drops"][0]["datasets"][0]["metric"] == "wer");
    CHECK(base["timing"].is_null());
    const json healed = run("eval", {{"checkpoint", dir("heal")},
                                     {"dataset", dir("ds")},
                                     {"baseline", dir("ev0") + "/report.json"},
                                     {"benchmark", true},
                                     {"out", dir("ev1")}});
    const json rec = healed["drops"][0]["datasets"][0];
    CHECK(healed["drops"][0]["fraction"].get<double>() == 0.25);
    if (rec["s0"].get<double>() > 0.0) {
        CHECK(std::abs(rec["delta"].get<double>() -
                       (rec["s"].get<double>() - rec["s0"].get<double>()) / rec["s0"].get<double>()) < 1e-12);
    }
    CHECK(!healed["timing"].is_null());

    const json m = read_json(root() / "heal" / "run_manifest.json");
    CHECK(m["command"] == "heal");
    CHECK(m["options"].find("out") == m["options"].end());
    CHECK(m["inputs"].size() == 2);
    bool has_ckpt = false;
    for (const auto& o : m["outputs"]) {
        has_ckpt = has_ckpt || o["path"] == "model.ckpt";
        CHECK(o["sha256"].get<std::string>().size() == 64);
    }
    CHECK(has_ckpt);
}

TEST_CASE("a zero drop fraction copies the checkpoint with a provenance entry") {
    pipeline();
    run("prune", {{"checkpoint", dir("tr")}, {"path", dir("an") + "/path.json"}, {"drop_fraction", 0.0},
                  {"out", dir("pr0")}});
    sprn_checkpoint* a = nullptr;
    sprn_checkpoint* b = nullptr;
    REQUIRE(sprn_checkpoint_load(dir("tr").c_str(), &a) == SPRN_OK);
    REQUIRE(sprn_checkpoint_load(dir("pr0").c_str(), &b) == SPRN_OK);
    char* fa = nullptr;
    char* fb = nullptr;
    REQUIRE(sprn_checkpoint_fingerprint(a, &fa) == SPRN_OK);
    REQUIRE(sprn_checkpoint_fingerprint(b, &fb) == SPRN_OK);
    CHECK(std::string(fa) == std::string(fb));
    CHECK(sprn_checkpoint_num_layers(b) == 4);
    sprn_string_free(fa);
    sprn_string_free(fb);
    sprn_checkpoint_free(a);
    sprn_checkpoint_free(b);
}

TEST_CASE("text and speech paths compare; cross-task transfer runs") {
    pipeline();
    run("analyze", {{"checkpoint", dir("tr")}, {"dataset", dir("ds")}, {"mode", "text"}, {"out", dir("an_text")}});
    const json same = run("compare-paths", {{"a", dir("an") + "/path.json"}, {"b", dir("an") + "/path.json"},
                                            {"out", dir("cmp0")}});
    CHECK(same["agreement"].get<double>() == 1.0);
    const json c = run("compare-paths", {{"a", dir("an") + "/heatmap.csv"}, {"b", dir("an_text") + "/heatmap.csv"},
                                         {"out", dir("cmp1")}});
    CHECK(c["agreement"].get<double>() >= 0.0);
    CHECK(c["mean_abs_diff"].is_number());

    run("train", {{"checkpoint", dir("pre")}, {"dataset", dir("ds_tl")}, {"out", dir("tr_tl")}, {"steps", 5}});
    run("prune", {{"checkpoint", dir("tr_tl")}, {"path", dir("an") + "/path.json"}, {"drop_fraction", 0.25},
                  {"out", dir("pr_tl")}});
    const json r = run("eval", {{"checkpoint", dir("pr_tl")}, {"dataset", dir("ds_tl")}, {"out", dir("ev_tl")}});
    CHECK(r["drops"][0]["datasets"][0]["metric"] == "bleu");
}

TEST_CASE("sweep writes one curve row per cell") {
    pipeline();
    run("sweep", {{"checkpoint", dir("tr")},
                  {"datasets", {dir("ds")}},
                  {"drops", {0.25, 0.5}},
                  {"strategies", {"none", "projector"}},
                  {"steps", 3},
                  {"out", dir("sweep")}});
    const std::string csv = read_text(root() / "sweep" / "curve.csv");
    CHECK(csv.rfind("drop,dataset,metric,delta,strategy\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2 * 1);
    CHECK(fs::exists(root() / "sweep" / "report_none.json"));
    CHECK(fs::exists(root() / "sweep" / "report_projector.json"));
}

TEST_CASE("benchmark reports speed and memory") {
    const json b = run("benchmark", {{"layers", 5}, {"d_model", 32}, {"heads", 2}, {"d_mlp", 64}, {"seq_len", 16},
                                     {"batch", 2}, {"runs", 3}, {"out", dir("bench")}});
    CHECK(b["removed_layers"] == 2);
    CHECK(b.contains("speedup"));
    CHECK(b.contains("peak_rss_reduction_bytes"));
    CHECK(b["parameter_bytes_reduction"].get<long>() > 0);
}

TEST_CASE("stages are reproducible") {
    pipeline();
    for (const char* stage : {"ds", "pre", "tr", "an"}) {
        CAPTURE(stage);
        const json m = read_json(root() / stage / "run_manifest.json");
        const json opts = m["options"];
        json again = opts;
        again["out"] = dir(std::string(stage) + "_again");
        run(m["command"].get<std::string>(), again);
        const json m2 = read_json(root() / (std::string(stage) + "_again") / "run_manifest.json");
        CHECK(m2["config_hash"] == m["config_hash"]);
        CHECK(m2["outputs"] == m["outputs"]);
    }
}

TEST_CASE("command-line exit codes") {
    pipeline();
    CHECK(cli("--version") == 0);
    CHECK(cli("gen --corpus-size 12 --out " + dir("cli_ds")) == 0);
    CHECK(fs::exists(root() / "cli_ds" / "manifest.json"));
    CHECK(cli("gen --bogus") == 2);
    CHECK(cli("gen --corpus-size 1 --out " + dir("cli_bad")) == 2);
    CHECK(cli("eval --checkpoint " + dir("nowhere") + " --dataset " + dir("ds") + " --out " + dir("cli_ev")) == 3);
    CHECK(cli("prune --checkpoint " + dir("tr") + " --start 3 --size 1 --out " + dir("cli_pr")) == 5);
    CHECK(cli("prune --checkpoint " + dir("tr") + " --start 2 --size 1 --out " + dir("cli_pr")) == 0);
    // Corrupt one payload byte of a checkpoint copy.
    fs::create_directories(root() / "corrupt");
    fs::copy_file(root() / "tr" / "model.ckpt", root() / "corrupt" / "model.ckpt");
    {
        std::fstream f(root() / "corrupt" / "model.ckpt", std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(-2, std::ios::end);
        char c = 0;
        f.read(&c, 1);
        f.seekp(-2, std::ios::end);
        c ^= 0x01;
        f.write(&c, 1);
    }
    CHECK(cli("eval --checkpoint " + dir("corrupt") + " --dataset " + dir("ds") + " --out " + dir("cli_ev2")) == 3);
}
