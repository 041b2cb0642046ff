// End-to-end checks of the CLI binary: exit codes, file-only IPC between
// the pipeline stages, and byte determinism.

#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "renn/io.hpp"

using namespace renn;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliFixture {
    fs::path dir;

    CliFixture() {
        dir = fs::temp_directory_path() /
              ("renn_cli_test_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(dir);
    }
    ~CliFixture() {
        std::error_code ec;
        fs::remove_all(dir, ec);
    }

    int run(const std::string& args) const {
        const std::string cmd = std::string(RENN_CLI_PATH) + " " + args + " > " +
                                (dir / "stdout.txt").string() + " 2> " +
                                (dir / "stderr.txt").string();
        const int status = std::system(cmd.c_str());
        if (status == -1) return -1;
        return WEXITSTATUS(status);
    }

    std::string stdout_text() const { return read_file(dir / "stdout.txt"); }
    std::string stderr_text() const { return read_file(dir / "stderr.txt"); }

    fs::path file(const std::string& name) const { return dir / name; }

    void write_model_config(const std::string& name, std::size_t d = 3) const {
        const json cfg{{"d", d},       {"input_dim", 2}, {"hidden", 8},
                       {"feature", 4}, {"classes", 2},   {"seed", 11}};
        std::ofstream(file(name)) << cfg.dump(2);
    }
};

} // namespace

TEST_CASE("gen-rotation: deterministic bytes, valid key, prints the phase") {
    CliFixture cli;
    REQUIRE(cli.run("gen-rotation --d 3 --seed 7 --out " + cli.file("k1.dary").string()) == 0);
    CHECK(cli.stdout_text().substr(0, 6) == "phase:");
    REQUIRE(cli.run("gen-rotation --d 3 --seed 7 --out " + cli.file("k2.dary").string()) == 0);
    CHECK(read_file(cli.file("k1.dary")) == read_file(cli.file("k2.dary")));
    CHECK(validate_rotation(load_rotation(cli.file("k1.dary"))).pass);
}

TEST_CASE("gen-rotation: d=1 exits 2 naming the constraint") {
    CliFixture cli;
    CHECK(cli.run("gen-rotation --d 1 --seed 7 --out " + cli.file("k.dary").string()) == 2);
    CHECK(cli.stderr_text().find("--d") != std::string::npos);
}

TEST_CASE("unknown flags and missing required flags exit 2") {
    CliFixture cli;
    CHECK(cli.run("gen-rotation --d 3 --seed 7 --out x.dary --frobnicate") == 2);
    CHECK(cli.run("decrypt --model m.json --in h.dary --out p.json") == 2); // missing --key
}

TEST_CASE("encrypt/process/decrypt over files reproduces the in-process pipeline") {
    CliFixture cli;
    cli.write_model_config("model_cfg.json");
    REQUIRE(cli.run("init-model --config " + cli.file("model_cfg.json").string() + " --out " +
                    cli.file("model.json").string()) == 0);
    REQUIRE(cli.run("gen-rotation --d 3 --seed 42 --out " + cli.file("key.dary").string()) == 0);

    const std::vector<double> input{0.8, -0.3};
    save_real_vector(cli.file("input.dary"), input);

    REQUIRE(cli.run("encrypt --model " + cli.file("model.json").string() + " --key " +
                    cli.file("key.dary").string() + " --in " + cli.file("input.dary").string() +
                    " --out " + cli.file("f.dary").string()) == 0);
    REQUIRE(cli.run("process --model " + cli.file("model.json").string() + " --in " +
                    cli.file("f.dary").string() + " --out " + cli.file("h.dary").string()) == 0);
    REQUIRE(cli.run("decrypt --model " + cli.file("model.json").string() + " --key " +
                    cli.file("key.dary").string() + " --in " + cli.file("h.dary").string() +
                    " --out " + cli.file("pred.json").string()) == 0);

    const json pred = json::parse(read_file(cli.file("pred.json")));
    const ModelSpec model = load_model(cli.file("model.json"));
    const RotationMatrix key = load_rotation(cli.file("key.dary"));
    const Prediction expected = forward_encrypted(input, model, key);
    REQUIRE(pred.at("scores").size() == expected.scores.size());
    for (std::size_t i = 0; i < expected.scores.size(); ++i)
        CHECK(std::abs(pred.at("scores")[i].get<double>() - expected.scores[i]) <= 1e-9);
    CHECK(pred.at("label").get<std::size_t>() == expected.label);
}

TEST_CASE("decrypt with a different key changes the extracted component") {
    CliFixture cli;
    cli.write_model_config("model_cfg.json");
    REQUIRE(cli.run("init-model --config " + cli.file("model_cfg.json").string() + " --out " +
                    cli.file("model.json").string()) == 0);
    REQUIRE(cli.run("gen-rotation --d 3 --seed 1 --out " + cli.file("key.dary").string()) == 0);
    REQUIRE(cli.run("gen-rotation --d 3 --seed 2 --out " + cli.file("wrong.dary").string()) == 0);
    save_real_vector(cli.file("input.dary"), {1.1, 0.4});

    REQUIRE(cli.run("encrypt --model " + cli.file("model.json").string() + " --key " +
                    cli.file("key.dary").string() + " --in " + cli.file("input.dary").string() +
                    " --out " + cli.file("f.dary").string()) == 0);
    REQUIRE(cli.run("process --model " + cli.file("model.json").string() + " --in " +
                    cli.file("f.dary").string() + " --out " + cli.file("h.dary").string()) == 0);

    REQUIRE(cli.run("decrypt --model " + cli.file("model.json").string() + " --key " +
                    cli.file("key.dary").string() + " --in " + cli.file("h.dary").string() +
                    " --out " + cli.file("p1.json").string() + " --feature-out " +
                    cli.file("a_right.dary").string()) == 0);
    REQUIRE(cli.run("decrypt --model " + cli.file("model.json").string() + " --key " +
                    cli.file("wrong.dary").string() + " --in " + cli.file("h.dary").string() +
                    " --out " + cli.file("p2.json").string() + " --feature-out " +
                    cli.file("a_wrong.dary").string()) == 0);

    const auto right = load_real_vector(cli.file("a_right.dary"));
    const auto wrong = load_real_vector(cli.file("a_wrong.dary"));
    const double cosine = dot(right, wrong) / (norm2(right) * norm2(wrong));
    CHECK(cosine < 1.0 - 1e-6);
}

TEST_CASE("shape mismatch between files exits 3 and unreadable input exits 4") {
    CliFixture cli;
    cli.write_model_config("model_cfg.json");
    REQUIRE(cli.run("init-model --config " + cli.file("model_cfg.json").string() + " --out " +
                    cli.file("model.json").string()) == 0);
    REQUIRE(cli.run("gen-rotation --d 5 --seed 3 --out " + cli.file("key5.dary").string()) == 0);
    save_real_vector(cli.file("input.dary"), {0.5, 0.5});

    // d=5 key against a d=3 model
    CHECK(cli.run("encrypt --model " + cli.file("model.json").string() + " --key " +
                  cli.file("key5.dary").string() + " --in " + cli.file("input.dary").string() +
                  " --out " + cli.file("f.dary").string()) == 3);

    CHECK(cli.run("encrypt --model " + cli.file("model.json").string() + " --key " +
                  cli.file("nokey.dary").string() + " --in " + cli.file("input.dary").string() +
                  " --out " + cli.file("f.dary").string()) == 4);
}

TEST_CASE("train-toy and attack are byte-deterministic; report recomputes the summary") {
    CliFixture cli;
    json cfg;
    cfg["model"] = {{"d", 3}, {"input_dim", 2}, {"hidden", 8}, {"feature", 4},
                    {"classes", 2}, {"seed", 11}};
    cfg["dataset"] = {{"kind", "two_blobs"}, {"count", 96}, {"test_count", 48},
                      {"separation", 4.0}, {"noise", 1.0}, {"seed", 100}};
    cfg["train"] = {{"epochs", 3}, {"batch_size", 16}, {"learning_rate", 0.05}, {"seed", 5}};
    std::ofstream(cli.file("train.json")) << cfg.dump(2);

    const std::string train_cmd = "train-toy --config " + cli.file("train.json").string();
    REQUIRE(cli.run(train_cmd + " --out-model " + cli.file("m1.json").string() + " --log " +
                    cli.file("log1.csv").string()) == 0);
    REQUIRE(cli.run(train_cmd + " --out-model " + cli.file("m2.json").string() + " --log " +
                    cli.file("log2.csv").string()) == 0);
    CHECK(read_file(cli.file("log1.csv")) == read_file(cli.file("log2.csv")));
    CHECK(read_file(cli.file("m1.json")) == read_file(cli.file("m2.json")));

    json acfg{{"attacker", "inversion_critic"},
              {"rotation_samples", 64},
              {"seed", 9},
              {"dataset",
               {{"kind", "two_blobs"}, {"count", 16}, {"separation", 4.0}, {"noise", 1.0}, {"seed", 200}}}};
    std::ofstream(cli.file("attack.json")) << acfg.dump(2);

    const std::string attack_cmd = "attack --model " + cli.file("m1.json").string() + " --config " +
                                   cli.file("attack.json").string();
    REQUIRE(cli.run(attack_cmd + " --out " + cli.file("rep1.csv").string() + " --summary " +
                    cli.file("sum1.json").string()) == 0);
    REQUIRE(cli.run(attack_cmd + " --out " + cli.file("rep2.csv").string() + " --summary " +
                    cli.file("sum2.json").string()) == 0);
    CHECK(read_file(cli.file("rep1.csv")) == read_file(cli.file("rep2.csv")));
    CHECK(read_file(cli.file("sum1.json")) == read_file(cli.file("sum2.json")));

    REQUIRE(cli.run("report --in " + cli.file("rep1.csv").string() + " --out " +
                    cli.file("sum3.json").string()) == 0);
    CHECK(read_file(cli.file("sum3.json")) == read_file(cli.file("sum1.json")));
}

TEST_CASE("config missing a required field exits 3 naming the field") {
    CliFixture cli;
    json cfg;
    cfg["model"] = {{"d", 3}, {"seed", 11}};
    cfg["dataset"] = {{"kind", "two_blobs"}, {"count", 32}, {"seed", 100}};
    cfg["train"] = {{"batch_size", 16}, {"seed", 5}}; // epochs missing
    std::ofstream(cli.file("train.json")) << cfg.dump(2);
    CHECK(cli.run("train-toy --config " + cli.file("train.json").string()) == 3);
    CHECK(cli.stderr_text().find("epochs") != std::string::npos);
}

TEST_CASE("the key bytes never appear in non-key outputs") {
    CliFixture cli;
    cli.write_model_config("model_cfg.json");
    REQUIRE(cli.run("init-model --config " + cli.file("model_cfg.json").string() + " --out " +
                    cli.file("model.json").string()) == 0);
    REQUIRE(cli.run("gen-rotation --d 3 --seed 77 --out " + cli.file("key.dary").string()) == 0);
    save_real_vector(cli.file("input.dary"), {0.9, 0.1});

    REQUIRE(cli.run("encrypt --model " + cli.file("model.json").string() + " --key " +
                    cli.file("key.dary").string() + " --in " + cli.file("input.dary").string() +
                    " --out " + cli.file("f.dary").string()) == 0);
    REQUIRE(cli.run("process --model " + cli.file("model.json").string() + " --in " +
                    cli.file("f.dary").string() + " --out " + cli.file("h.dary").string()) == 0);
    REQUIRE(cli.run("decrypt --model " + cli.file("model.json").string() + " --key " +
                    cli.file("key.dary").string() + " --in " + cli.file("h.dary").string() +
                    " --out " + cli.file("pred.json").string()) == 0);

    // audit: no 8-byte encoding of any key entry occurs in any output
    const RotationMatrix key = load_rotation(cli.file("key.dary"));
    std::vector<std::string> patterns;
    for (double v : key.matrix().data()) {
        std::string bytes(8, '\0');
        std::memcpy(bytes.data(), &v, 8);
        patterns.push_back(bytes);
    }
    for (const char* out : {"f.dary", "h.dary", "pred.json"}) {
        const std::string blob = read_file(cli.file(out));
        for (const auto& p : patterns) CHECK(blob.find(p) == std::string::npos);
    }
}
