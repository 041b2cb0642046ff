// io.hpp — serialization: the DARY v1 binary tensor format, model
// documents with content-addressed weight blobs, and CSV/JSON reports.
//
// DARY v1 layout, all integers and floats little-endian:
//   bytes 0..3   magic "DARY"
//   u32          version = 1
//   u32          n  (element count)
//   u32          d  (components per element)
//   n*d f64      values, element-major
//
// Rotation matrices travel as square DARY payloads with n = d, one row
// per element.  Real vectors use d = 1.  Model documents are JSON with
// each weight matrix stored as a sidecar DARY blob named by the FNV-1a
// hash of its bytes.

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "renn/attack.hpp"
#include "renn/layers.hpp"
#include "renn/linalg.hpp"
#include "renn/mlp.hpp"
#include "renn/pipeline.hpp"
#include "renn/rotation.hpp"
#include "renn/tensor.hpp"
#include "renn/training.hpp"

namespace renn {

inline constexpr std::uint32_t kDaryVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw IoError("DARY: truncated header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos++])) << (8 * i);
    return v;
}

inline double get_f64(const std::string& in, std::size_t& pos) {
    if (pos + 8 > in.size()) throw IoError("DARY: truncated payload");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos++])) << (8 * i);
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

} // namespace detail

inline std::string encode_dary(std::size_t n, std::size_t d, const std::vector<double>& values) {
    if (values.size() != n * d) throw ShapeError("encode_dary: value count must be n*d");
    std::string out = "DARY";
    detail::put_u32(out, kDaryVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(n));
    detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : values) detail::put_f64(out, v);
    return out;
}

struct DaryPayload {
    std::size_t n = 0;
    std::size_t d = 0;
    std::vector<double> values; // element-major
};

inline DaryPayload decode_dary(const std::string& bytes) {
    if (bytes.size() < 16 || bytes.compare(0, 4, "DARY") != 0)
        throw IoError("DARY: bad magic");
    std::size_t pos = 4;
    const std::uint32_t version = detail::get_u32(bytes, pos);
    if (version != kDaryVersion) throw IoError("DARY: unsupported version");
    DaryPayload p;
    p.n = detail::get_u32(bytes, pos);
    p.d = detail::get_u32(bytes, pos);
    if (bytes.size() != 16 + 8 * p.n * p.d) throw IoError("DARY: size does not match header");
    p.values.reserve(p.n * p.d);
    for (std::size_t i = 0; i < p.n * p.d; ++i) p.values.push_back(detail::get_f64(bytes, pos));
    return p;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Atomic write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

inline void save_dary(const std::filesystem::path& path, const DAryTensor& t) {
    write_file_atomic(path, encode_dary(t.n(), t.d(), t.data()));
}

inline DAryTensor load_dary_tensor(const std::filesystem::path& path) {
    const DaryPayload p = decode_dary(read_file(path));
    if (p.d < 2) throw IoError("DARY: tensor requires d >= 2, got " + std::to_string(p.d));
    return DAryTensor(p.n, p.d, p.values);
}

inline void save_rotation(const std::filesystem::path& path, const RotationMatrix& r) {
    write_file_atomic(path, encode_dary(r.d(), r.d(), r.matrix().data()));
}

inline RotationMatrix load_rotation(const std::filesystem::path& path) {
    const DaryPayload p = decode_dary(read_file(path));
    if (p.n != p.d) throw IoError("DARY: rotation payload must be square");
    return RotationMatrix::from_entries(p.d, p.values);
}

// Real vectors ride along as n x 1 payloads.
inline void save_real_vector(const std::filesystem::path& path, const std::vector<double>& v) {
    write_file_atomic(path, encode_dary(v.size(), 1, v));
}

inline std::vector<double> load_real_vector(const std::filesystem::path& path) {
    const DaryPayload p = decode_dary(read_file(path));
    if (p.d != 1) throw IoError("DARY: expected a d=1 vector payload");
    return p.values;
}

// ---------------------------------------------------------------------------
// Model documents
// ---------------------------------------------------------------------------

inline std::string fnv1a_hex(const std::string& bytes) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace detail {

class BlobStore {
  public:
    explicit BlobStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

    std::string put_matrix(const Matrix& m) {
        const std::string bytes = encode_dary(m.rows(), m.cols(), m.data());
        const std::string hash = fnv1a_hex(bytes);
        std::filesystem::create_directories(dir_);
        write_file_atomic(dir_ / (hash + ".dary"), bytes);
        return hash;
    }

    std::string put_vector(const std::vector<double>& v) {
        const std::string bytes = encode_dary(v.size(), 1, v);
        const std::string hash = fnv1a_hex(bytes);
        std::filesystem::create_directories(dir_);
        write_file_atomic(dir_ / (hash + ".dary"), bytes);
        return hash;
    }

    Matrix get_matrix(const std::string& hash) const {
        const DaryPayload p = decode_dary(read_file(dir_ / (hash + ".dary")));
        return Matrix(p.n, p.d, p.values);
    }

    std::vector<double> get_vector(const std::string& hash) const {
        const DaryPayload p = decode_dary(read_file(dir_ / (hash + ".dary")));
        if (p.d != 1) throw IoError("blob " + hash + ": expected a vector payload");
        return p.values;
    }

  private:
    std::filesystem::path dir_;
};

inline nlohmann::json mlp_to_json(const RealMlp& mlp, BlobStore& blobs) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : mlp.layers()) {
        layers.push_back({{"kind", "dense"},
                          {"out", l.weight.rows()},
                          {"in", l.weight.cols()},
                          {"weights", blobs.put_matrix(l.weight)},
                          {"bias", blobs.put_vector(l.bias)}});
    }
    return {{"layers", layers}};
}

inline RealMlp mlp_from_json(const nlohmann::json& j, const BlobStore& blobs) {
    std::vector<DenseLayer> layers;
    for (const auto& l : j.at("layers")) {
        if (l.at("kind") != "dense") throw IoError("model: unknown dense-layer kind");
        DenseLayer layer;
        layer.weight = blobs.get_matrix(l.at("weights").get<std::string>());
        layer.bias = blobs.get_vector(l.at("bias").get<std::string>());
        if (layer.weight.rows() != l.at("out").get<std::size_t>() ||
            layer.weight.cols() != l.at("in").get<std::size_t>())
            throw IoError("model: dense shape does not match blob");
        layers.push_back(std::move(layer));
    }
    return RealMlp(std::move(layers));
}

inline nlohmann::json stack_to_json(const std::vector<Layer>& stack, BlobStore& blobs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& layer : stack) {
        nlohmann::json j;
        switch (layer.kind) {
            case LayerKind::Conv:
                j = {{"kind", "conv"},
                     {"out", layer.weights.rows()},
                     {"in", layer.weights.cols()},
                     {"weights", blobs.put_matrix(layer.weights)}};
                break;
            case LayerKind::Relu: j = {{"kind", "relu"}, {"clamp", layer.clamp}}; break;
            case LayerKind::BatchNorm: j = {{"kind", "batchnorm"}, {"eps", layer.eps}}; break;
            case LayerKind::AvgPool: j = {{"kind", "avgpool"}, {"window", layer.window}}; break;
            case LayerKind::MaxPool: j = {{"kind", "maxpool"}, {"window", layer.window}}; break;
            case LayerKind::Dropout: j = {{"kind", "dropout"}, {"rate", layer.rate}}; break;
            case LayerKind::Skip:
                j = {{"kind", "skip"}, {"inner", stack_to_json(layer.inner, blobs)}};
                break;
        }
        arr.push_back(std::move(j));
    }
    return arr;
}

inline std::vector<Layer> stack_from_json(const nlohmann::json& arr, const BlobStore& blobs) {
    std::vector<Layer> stack;
    for (const auto& j : arr) {
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "conv") {
            Matrix w = blobs.get_matrix(j.at("weights").get<std::string>());
            if (w.rows() != j.at("out").get<std::size_t>() || w.cols() != j.at("in").get<std::size_t>())
                throw IoError("model: conv shape does not match blob");
            stack.push_back(Layer::conv(std::move(w)));
        } else if (kind == "relu") {
            stack.push_back(Layer::relu(j.value("clamp", 1.0)));
        } else if (kind == "batchnorm") {
            stack.push_back(Layer::batchnorm(j.at("eps").get<double>()));
        } else if (kind == "avgpool") {
            stack.push_back(Layer::avgpool(j.at("window").get<std::size_t>()));
        } else if (kind == "maxpool") {
            stack.push_back(Layer::maxpool(j.at("window").get<std::size_t>()));
        } else if (kind == "dropout") {
            stack.push_back(Layer::dropout(j.at("rate").get<double>()));
        } else if (kind == "skip") {
            stack.push_back(Layer::skip(stack_from_json(j.at("inner"), blobs)));
        } else {
            throw IoError("model: unknown layer kind '" + kind + "'");
        }
    }
    return stack;
}

} // namespace detail

// Writes <path> (JSON) plus a sibling "<stem>.blobs/" directory holding
// one DARY file per weight matrix, referenced by content hash.
inline void save_model(const std::filesystem::path& path, const ModelSpec& model) {
    detail::BlobStore blobs(path.parent_path() / (path.stem().string() + ".blobs"));
    nlohmann::json doc;
    doc["format"] = "renn-model";
    doc["version"] = 1;
    doc["d"] = model.d;
    doc["class_count"] = model.class_count;
    doc["gaussian_fooling"] = model.gaussian_fooling;
    doc["encoder"] = detail::mlp_to_json(model.encoder, blobs);
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& h : model.fooling_heads) heads.push_back(detail::mlp_to_json(h, blobs));
    doc["fooling_heads"] = heads;
    doc["processing"] = detail::stack_to_json(model.processing, blobs);
    doc["decoder"] = detail::mlp_to_json(model.decoder, blobs);
    if (model.critic.layer_count() > 0) doc["critic"] = detail::mlp_to_json(model.critic, blobs);
    write_file_atomic(path, doc.dump(2) + "\n");
}

inline ModelSpec load_model(const std::filesystem::path& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("model " + path.string() + ": " + e.what());
    }
    try {
        if (doc.at("format") != "renn-model" || doc.at("version") != 1)
            throw IoError("model: unsupported document format");
        const detail::BlobStore blobs(path.parent_path() / (path.stem().string() + ".blobs"));
        ModelSpec model;
        model.d = doc.at("d").get<std::size_t>();
        model.class_count = doc.at("class_count").get<std::size_t>();
        model.gaussian_fooling = doc.value("gaussian_fooling", false);
        model.encoder = detail::mlp_from_json(doc.at("encoder"), blobs);
        for (const auto& h : doc.at("fooling_heads"))
            model.fooling_heads.push_back(detail::mlp_from_json(h, blobs));
        model.processing = detail::stack_from_json(doc.at("processing"), blobs);
        model.decoder = detail::mlp_from_json(doc.at("decoder"), blobs);
        if (doc.contains("critic")) model.critic = detail::mlp_from_json(doc.at("critic"), blobs);
        model.validate();
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("model " + path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace detail {

// Shortest round-trippable decimal form; deterministic across runs.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

inline std::string training_log_csv(const TrainLog& log) {
    std::string out = "epoch,task_loss,gan_loss,critic_loss,train_acc,test_acc,wall_seconds\n";
    for (const auto& e : log.epochs) {
        out += std::to_string(e.epoch) + ",";
        out += detail::format_double(e.task_loss) + ",";
        out += detail::format_double(e.gan_loss) + ",";
        out += detail::format_double(e.critic_loss) + ",";
        out += detail::format_double(e.train_accuracy) + ",";
        out += detail::format_double(e.test_accuracy) + ",";
        out += detail::format_double(e.wall_seconds) + "\n";
    }
    return out;
}

inline std::string attack_reports_csv(const std::vector<AttackReport>& reports) {
    std::string out = "sample_id,attacker,delta_theta,rank,recon_error,seed\n";
    for (const auto& r : reports) {
        out += std::to_string(r.sample_id) + ",";
        out += r.attacker + ",";
        out += detail::format_double(r.delta_theta) + ",";
        out += detail::format_double(r.rank) + ",";
        out += detail::format_double(r.reconstruction) + ",";
        out += std::to_string(r.seed) + "\n";
    }
    return out;
}

inline std::vector<AttackReport> attack_reports_from_csv(const std::string& csv) {
    std::vector<AttackReport> reports;
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw IoError("attack csv: empty file");
    if (line != "sample_id,attacker,delta_theta,rank,recon_error,seed")
        throw IoError("attack csv: unexpected header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string field;
        AttackReport r;
        auto next = [&](const char* name) {
            if (!std::getline(row, field, ',')) throw IoError(std::string("attack csv: missing ") + name);
            return field;
        };
        try {
            r.sample_id = std::stoull(next("sample_id"));
            r.attacker = next("attacker");
            r.delta_theta = std::stod(next("delta_theta"));
            r.rank = std::stod(next("rank"));
            r.reconstruction = std::stod(next("recon_error"));
            r.seed = std::stoull(next("seed"));
        } catch (const std::logic_error&) {
            throw IoError("attack csv: malformed row '" + line + "'");
        }
        reports.push_back(std::move(r));
    }
    return reports;
}

inline nlohmann::json attack_summary_json(const std::vector<AttackReport>& reports) {
    std::map<std::string, std::vector<AttackReport>> by_attacker;
    for (const auto& r : reports) by_attacker[r.attacker].push_back(r);
    nlohmann::json out;
    for (const auto& [name, group] : by_attacker) {
        const AttackSummary s = summarize_reports(group);
        nlohmann::json j{{"count", s.count},
                         {"mean_delta_theta", s.mean_delta_theta},
                         {"std_delta_theta", s.std_delta_theta},
                         {"mean_rank", s.mean_rank},
                         {"mean_recon_error", s.mean_reconstruction}};
        if (s.knn_accuracy >= 0.0) j["knn_accuracy"] = s.knn_accuracy;
        out[name] = std::move(j);
    }
    return out;
}

} // namespace renn
