// renn_cli — command-line surface over the library.
//
// The encrypt / process / decrypt commands are separate processes that
// communicate only through DARY files, mirroring the local-device /
// cloud split: the key file is used by encrypt and decrypt and never
// travels with a feature.
//
// Exit codes: 0 ok, 2 usage, 3 shape/config, 4 I/O, 5 numeric failure.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "renn/renn.hpp"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitShape = 3;
constexpr int kExitIo = 4;
constexpr int kExitNumeric = 5;

json load_json_config(const std::filesystem::path& path) {
    const std::string bytes = renn::read_file(path); // IoError -> exit 4
    try {
        return json::parse(bytes);
    } catch (const json::exception& e) {
        throw renn::ShapeError("config " + path.string() + ": " + e.what());
    }
}

template <typename T>
T require_field(const json& j, const std::string& name) {
    if (!j.contains(name)) throw renn::ShapeError("config: missing required field '" + name + "'");
    try {
        return j.at(name).get<T>();
    } catch (const json::exception&) {
        throw renn::ShapeError("config: field '" + name + "' has the wrong type");
    }
}

// ---------------------------------------------------------------------------
// Model and dataset construction from config documents
// ---------------------------------------------------------------------------

renn::ModelSpec build_model(const json& cfg) {
    using renn::derive_seed;
    const std::size_t d = require_field<std::size_t>(cfg, "d");
    const std::size_t input_dim = cfg.value("input_dim", std::size_t{2});
    const std::size_t hidden = cfg.value("hidden", std::size_t{8});
    const std::size_t feature = cfg.value("feature", std::size_t{4});
    const std::size_t proc_hidden = cfg.value("proc_hidden", std::size_t{8});
    const std::size_t classes = cfg.value("classes", std::size_t{2});
    const std::size_t critic_hidden = cfg.value("critic_hidden", std::size_t{16});
    const double relu_clamp = cfg.value("relu_clamp", 1.0);
    const double dropout_rate = cfg.value("dropout_rate", 0.0);
    const renn::Seed seed{require_field<std::uint64_t>(cfg, "seed")};
    if (d < 2) throw renn::ShapeError("config: d must be >= 2");

    renn::ModelSpec m;
    m.d = d;
    m.class_count = classes;
    m.gaussian_fooling = cfg.value("gaussian_fooling", false);
    m.encoder = renn::RealMlp::make({input_dim, hidden, feature}, derive_seed(seed, 1));
    for (std::size_t i = 0; i + 1 < d; ++i)
        m.fooling_heads.push_back(renn::RealMlp::make({hidden, feature}, derive_seed(seed, 16 + i)));

    renn::CounterRng rng(derive_seed(seed, 2));
    renn::Matrix w1(proc_hidden, feature);
    renn::Matrix w2(feature, proc_hidden);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(feature));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(proc_hidden));
    for (double& v : w1.data()) v = rng.next_normal() * s1;
    for (double& v : w2.data()) v = rng.next_normal() * s2;
    m.processing.push_back(renn::Layer::conv(std::move(w1)));
    m.processing.push_back(renn::Layer::relu(relu_clamp));
    m.processing.push_back(renn::Layer::conv(std::move(w2)));
    if (dropout_rate > 0.0) m.processing.push_back(renn::Layer::dropout(dropout_rate));

    m.decoder = renn::RealMlp::make({feature, classes}, derive_seed(seed, 3));
    m.critic = renn::RealMlp::make({feature, critic_hidden, 1}, derive_seed(seed, 4));
    m.validate();
    return m;
}

renn::LabeledDataset build_dataset(const json& cfg) {
    const std::string kind = require_field<std::string>(cfg, "kind");
    if (kind != "two_blobs") throw renn::ShapeError("config: unknown dataset kind '" + kind + "'");
    const std::size_t count = require_field<std::size_t>(cfg, "count");
    const double separation = cfg.value("separation", 4.0);
    const double noise = cfg.value("noise", 1.0);
    const renn::Seed seed{require_field<std::uint64_t>(cfg, "seed")};
    return renn::two_blobs(count, separation, noise, seed);
}

renn::TrainConfig build_train_config(const json& cfg) {
    renn::TrainConfig t;
    t.learning_rate = cfg.value("learning_rate", 0.05);
    t.critic_learning_rate = cfg.value("critic_learning_rate", t.learning_rate);
    t.batch_size = cfg.value("batch_size", std::size_t{32});
    t.epochs = require_field<std::size_t>(cfg, "epochs");
    t.critic_steps = cfg.value("critic_steps", std::size_t{5});
    t.clip_c = cfg.value("clip_c", 0.01);
    t.attacker_samples = cfg.value("attacker_samples", std::size_t{4});
    t.gan_weight = cfg.value("gan_weight", 1.0);
    t.momentum = cfg.value("momentum", 0.0);
    t.joint_fooling_gradient = cfg.value("joint_fooling_gradient", false);
    t.seed = renn::Seed{require_field<std::uint64_t>(cfg, "seed")};
    t.validate();
    return t;
}

renn::AttackConfig build_attack_config(const json& cfg) {
    renn::AttackConfig a;
    const std::string kind = require_field<std::string>(cfg, "attacker");
    if (kind == "inversion_constant") a.kind = renn::AttackerKind::InversionConstant;
    else if (kind == "inversion_critic") a.kind = renn::AttackerKind::InversionCritic;
    else if (kind == "inversion_cheating") a.kind = renn::AttackerKind::InversionCheating;
    else if (kind == "knn") a.kind = renn::AttackerKind::Knn;
    else if (kind == "noisy_baseline") a.kind = renn::AttackerKind::NoisyBaseline;
    else throw renn::ShapeError("config: unknown attacker '" + kind + "'");
    a.rotation_samples = cfg.value("rotation_samples", std::size_t{1000});
    a.knn_k = cfg.value("knn_k", std::size_t{3});
    a.noise_gamma = cfg.value("noise_gamma", 0.5);
    a.seed = renn::Seed{require_field<std::uint64_t>(cfg, "seed")};
    return a;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_gen_rotation(std::size_t d, std::uint64_t seed, const std::string& out) {
    const renn::RotationMatrix r = renn::sample_rotation(d, renn::Seed{seed});
    const renn::RotationCheck check = renn::validate_rotation(r);
    if (!check.pass) throw renn::NumericError("generated matrix failed validation");
    renn::save_rotation(out, r);
    const renn::PhaseVector phase = renn::phase_of(r);
    std::string line = "phase:";
    for (double c : phase.coords) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), " %.12g", c);
        line += buf;
    }
    std::cout << line << "\n";
}

void cmd_init_model(const std::string& config_path, const std::string& out) {
    const renn::ModelSpec model = build_model(load_json_config(config_path));
    renn::save_model(out, model);
}

void cmd_encrypt(const std::string& model_path, const std::string& key_path,
                 const std::string& in_path, const std::string& out_path, std::uint64_t seed) {
    const renn::ModelSpec model = renn::load_model(model_path);
    const renn::RotationMatrix key = renn::load_rotation(key_path);
    const std::vector<double> input = renn::load_real_vector(in_path);
    const renn::DAryTensor f = renn::encode(input, model, key, renn::Seed{seed});
    renn::save_dary(out_path, f);
}

void cmd_process(const std::string& model_path, const std::string& in_path,
                 const std::string& out_path, std::uint64_t seed) {
    const renn::ModelSpec model = renn::load_model(model_path);
    const renn::DAryTensor f = renn::load_dary_tensor(in_path);
    renn::save_dary(out_path, renn::process(f, model, renn::Seed{seed}, false));
}

void cmd_decrypt(const std::string& model_path, const std::string& key_path,
                 const std::string& in_path, const std::string& out_path,
                 const std::string& feature_out) {
    const renn::ModelSpec model = renn::load_model(model_path);
    const renn::RotationMatrix key = renn::load_rotation(key_path);
    const renn::DAryTensor h = renn::load_dary_tensor(in_path);
    if (!feature_out.empty())
        renn::save_real_vector(feature_out, renn::rotate_inverse(h, key).component(0));
    const renn::Prediction pred = renn::decode(h, key, model);
    json doc;
    doc["label"] = pred.label;
    doc["scores"] = pred.scores;
    renn::write_file_atomic(out_path, doc.dump(2) + "\n");
}

void cmd_train_toy(const std::string& config_path, const std::string& out_model,
                   const std::string& log_path, bool timing) {
    const json cfg = load_json_config(config_path);
    if (!cfg.contains("model")) throw renn::ShapeError("config: missing required field 'model'");
    if (!cfg.contains("dataset")) throw renn::ShapeError("config: missing required field 'dataset'");
    if (!cfg.contains("train")) throw renn::ShapeError("config: missing required field 'train'");

    renn::ModelSpec model = build_model(cfg.at("model"));
    const json& ds = cfg.at("dataset");
    renn::LabeledDataset train_set = build_dataset(ds);
    json test_ds = ds;
    test_ds["count"] = ds.value("test_count", std::size_t{200});
    test_ds["seed"] = require_field<std::uint64_t>(ds, "seed") + 1;
    renn::LabeledDataset test_set = build_dataset(test_ds);

    renn::TrainConfig tc = build_train_config(cfg.at("train"));
    tc.record_wall_seconds = timing;
    const renn::TrainLog log = renn::train_toy(train_set, test_set, model, tc);

    if (!out_model.empty()) renn::save_model(out_model, model);
    if (!log_path.empty()) renn::write_file_atomic(log_path, renn::training_log_csv(log));
    if (!log.epochs.empty()) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "final: train_acc=%.4f test_acc=%.4f",
                      log.epochs.back().train_accuracy, log.epochs.back().test_accuracy);
        std::cout << buf << "\n";
    }
}

void cmd_attack(const std::string& model_path, const std::string& config_path,
                const std::string& out_csv, const std::string& summary_path) {
    const renn::ModelSpec model = renn::load_model(model_path);
    const json cfg = load_json_config(config_path);
    if (!cfg.contains("dataset")) throw renn::ShapeError("config: missing required field 'dataset'");
    const renn::LabeledDataset data = build_dataset(cfg.at("dataset"));
    const renn::AttackConfig ac = build_attack_config(cfg);
    const auto reports = renn::evaluate_privacy(model, data, ac);
    renn::write_file_atomic(out_csv, renn::attack_reports_csv(reports));
    if (!summary_path.empty())
        renn::write_file_atomic(summary_path, renn::attack_summary_json(reports).dump(2) + "\n");
}

void cmd_report(const std::string& in_csv, const std::string& out_json) {
    const auto reports = renn::attack_reports_from_csv(renn::read_file(in_csv));
    if (reports.empty()) throw renn::ShapeError("report: no rows in " + in_csv);
    renn::write_file_atomic(out_json, renn::attack_summary_json(reports).dump(2) + "\n");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"rotation-equivariant encrypted inference toolkit"};
    app.require_subcommand(1);

    // gen-rotation
    auto* gen = app.add_subcommand("gen-rotation", "sample an SO(d) key and write it as DARY");
    std::size_t gen_d = 3;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    gen->add_option("--d", gen_d, "key dimension (>= 2)")->required()->check(CLI::Range(std::size_t{2}, std::size_t{64}));
    gen->add_option("--seed", gen_seed, "sampling seed")->required();
    gen->add_option("--out", gen_out, "output key file")->required();

    // init-model
    auto* init = app.add_subcommand("init-model", "build an untrained model from a config");
    std::string init_cfg, init_out;
    init->add_option("--config", init_cfg, "model config JSON")->required();
    init->add_option("--out", init_out, "output model document")->required();

    // encrypt
    auto* enc = app.add_subcommand("encrypt", "encode an input into an encrypted d-ary feature");
    std::string enc_model, enc_key, enc_in, enc_out;
    std::uint64_t enc_seed = 0;
    enc->add_option("--model", enc_model)->required();
    enc->add_option("--key", enc_key)->required();
    enc->add_option("--in", enc_in, "input vector (DARY, d=1)")->required();
    enc->add_option("--out", enc_out)->required();
    enc->add_option("--seed", enc_seed, "randomness for gaussian fooling components");

    // process
    auto* proc = app.add_subcommand("process", "run the equivariant processing module");
    std::string proc_model, proc_in, proc_out;
    std::uint64_t proc_seed = 0;
    proc->add_option("--model", proc_model)->required();
    proc->add_option("--in", proc_in)->required();
    proc->add_option("--out", proc_out)->required();
    proc->add_option("--seed", proc_seed);

    // decrypt
    auto* dec = app.add_subcommand("decrypt", "decrypt a processed feature and predict");
    std::string dec_model, dec_key, dec_in, dec_out, dec_feature_out;
    dec->add_option("--model", dec_model)->required();
    dec->add_option("--key", dec_key)->required();
    dec->add_option("--in", dec_in)->required();
    dec->add_option("--out", dec_out, "prediction JSON")->required();
    dec->add_option("--feature-out", dec_feature_out, "also write the decrypted component 0");

    // train-toy
    auto* train = app.add_subcommand("train-toy", "train a model on synthetic data");
    std::string train_cfg, train_out_model, train_log;
    bool train_timing = false;
    train->add_option("--config", train_cfg)->required();
    train->add_option("--out-model", train_out_model);
    train->add_option("--log", train_log, "per-epoch CSV");
    train->add_flag("--timing", train_timing, "record real wall seconds in the log");

    // attack
    auto* attack = app.add_subcommand("attack", "run an attacker over a dataset");
    std::string attack_model, attack_cfg, attack_out, attack_summary;
    attack->add_option("--model", attack_model)->required();
    attack->add_option("--config", attack_cfg)->required();
    attack->add_option("--out", attack_out, "per-sample CSV")->required();
    attack->add_option("--summary", attack_summary, "aggregate JSON");

    // report
    auto* report = app.add_subcommand("report", "aggregate an attack CSV into summary JSON");
    std::string report_in, report_out;
    report->add_option("--in", report_in)->required();
    report->add_option("--out", report_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*gen) cmd_gen_rotation(gen_d, gen_seed, gen_out);
        else if (*init) cmd_init_model(init_cfg, init_out);
        else if (*enc) cmd_encrypt(enc_model, enc_key, enc_in, enc_out, enc_seed);
        else if (*proc) cmd_process(proc_model, proc_in, proc_out, proc_seed);
        else if (*dec) cmd_decrypt(dec_model, dec_key, dec_in, dec_out, dec_feature_out);
        else if (*train) cmd_train_toy(train_cfg, train_out_model, train_log, train_timing);
        else if (*attack) cmd_attack(attack_model, attack_cfg, attack_out, attack_summary);
        else if (*report) cmd_report(report_in, report_out);
    } catch (const renn::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitShape;
    } catch (const renn::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const renn::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}
