#include "checkpoint.hpp"

#include "io.hpp"

#include <json.hpp>

#include <map>

namespace speechprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "SPRNCKPT";

json config_to_json(const ModelConfig& c) {
    return {{"num_layers", c.num_layers}, {"d_model", c.d_model},     {"num_heads", c.num_heads},
            {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
            {"norm_eps", c.norm_eps},     {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

json plan_to_json(const SurgeryPlan& p) {
    return {{"start", p.start},
            {"size", p.size},
            {"path_fingerprint", p.path_fingerprint},
            {"strategy", std::string(to_string(p.strategy))},
            {"removed_original_ids", p.removed_original_ids}};
}

SurgeryPlan plan_from_json(const json& j) {
    SurgeryPlan p;
    p.start = j.at("start").get<int>();
    p.size = j.at("size").get<int>();
    p.path_fingerprint = j.at("path_fingerprint").get<std::string>();
    p.strategy = parse_healing_strategy(j.at("strategy").get<std::string>());
    p.removed_original_ids = j.at("removed_original_ids").get<std::vector<int>>();
    return p;
}

std::vector<NamedParam> all_tensors(Checkpoint& ckpt) {
    std::vector<NamedParam> out = named_parameters(ckpt.model);
    for (const NamedParam& np : named_parameters(ckpt.projector)) {
        out.push_back(np);
    }
    return out;
}

void write_tensor(ByteWriter& w, const Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        w.f32(m.data()[i]);
    }
}

}  // namespace

double Checkpoint::drop_fraction() const {
    return 1.0 - static_cast<double>(model.num_layers()) / model.config.num_layers;
}

Bytes encode_checkpoint(const Checkpoint& ckpt_in) {
    // named_parameters needs mutable access; nothing is modified.
    auto& ckpt = const_cast<Checkpoint&>(ckpt_in);
    ByteWriter payload;
    json tensors = json::array();
    for (const NamedParam& np : all_tensors(ckpt)) {
        const size_t offset = payload.bytes().size();
        write_tensor(payload, np.param->value);
        const size_t nbytes = payload.bytes().size() - offset;
        tensors.push_back({{"name", np.name},
                           {"shape", {np.param->rows(), np.param->cols()}},
                           {"offset", offset},
                           {"nbytes", nbytes},
                           {"crc32", crc32_of(payload.bytes().data() + offset, nbytes)}});
    }
    json adapters = json::array();
    for (size_t i = 0; i < ckpt.model.layers.size(); ++i) {
        for (const Projection p : kAllProjections) {
            const Linear& lin = ckpt.model.layers[i].projection(p);
            if (lin.lora) {
                adapters.push_back({{"layer", i},
                                    {"projection", std::string(projection_name(p))},
                                    {"rank", lin.lora->rank},
                                    {"alpha", lin.lora->alpha},
                                    {"dropout", lin.lora->dropout}});
            }
        }
    }
    const Projector& pj = ckpt.projector;
    const Provenance& pv = ckpt.provenance;
    json plans = json::array();
    for (const SurgeryPlan& p : pv.surgeries) {
        plans.push_back(plan_to_json(p));
    }
    json meta;
    meta["format"] = "speechprune-checkpoint";
    meta["config"] = config_to_json(ckpt.model.config);
    meta["projector"] = {{"k", pj.k}, {"d_e", pj.d_e}, {"d_hidden", pj.d_hidden}, {"d_model", pj.d_model}};
    meta["adapters"] = std::move(adapters);
    meta["provenance"] = {{"original_layer_ids", ckpt.model.original_layer_ids},
                          {"surgeries", std::move(plans)},
                          {"train_steps", pv.train_steps},
                          {"seed_lineage", pv.seed_lineage},
                          {"task", pv.task},
                          {"prompt", pv.prompt}};
    meta["tensors"] = std::move(tensors);
    meta["payload_bytes"] = payload.bytes().size();
    const std::string meta_text = meta.dump(1);

    ByteWriter out;
    out.raw(kMagic);
    out.u32(kCheckpointVersion);
    out.u64(meta_text.size());
    out.raw(meta_text);
    out.u32(crc32_of(reinterpret_cast<const uint8_t*>(meta_text.data()), meta_text.size()));
    out.raw(payload.bytes().data(), payload.bytes().size());
    return std::move(out.bytes());
}

Checkpoint decode_checkpoint(const Bytes& bytes, const std::string& context) {
    ByteReader r(bytes.data(), bytes.size(), context);
    require(bytes.size() >= kMagic.size() && r.raw(kMagic.size()) == kMagic, ErrorCode::io,
            context + ": not a speechprune checkpoint");
    const uint32_t version = r.u32();
    require(version == kCheckpointVersion, ErrorCode::version,
            context + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
    const uint64_t meta_len = r.u64();
    const std::string meta_text = r.raw(static_cast<size_t>(meta_len));
    const uint32_t meta_crc = r.u32();
    require(meta_crc == crc32_of(reinterpret_cast<const uint8_t*>(meta_text.data()), meta_text.size()),
            ErrorCode::checksum, context + ": metadata checksum mismatch");
    const uint8_t* payload = bytes.data() + r.position();
    const size_t payload_size = r.remaining();

    Checkpoint ckpt;
    try {
        const json meta = json::parse(meta_text);
        require(meta.at("payload_bytes").get<size_t>() == payload_size, ErrorCode::io,
                context + ": payload is " + std::to_string(payload_size) + " bytes, metadata expects " +
                    std::to_string(meta.at("payload_bytes").get<size_t>()) + " (truncated?)");
        ckpt.model.config = config_from_json(meta.at("config"));
        ckpt.model.config.validate();
        const json& pj = meta.at("projector");
        ckpt.projector.k = pj.at("k").get<int>();
        ckpt.projector.d_e = pj.at("d_e").get<int>();
        ckpt.projector.d_hidden = pj.at("d_hidden").get<int>();
        ckpt.projector.d_model = pj.at("d_model").get<int>();

        const json& pv = meta.at("provenance");
        ckpt.model.original_layer_ids = pv.at("original_layer_ids").get<std::vector<int>>();
        ckpt.model.layers.resize(ckpt.model.original_layer_ids.size());
        for (const json& p : pv.at("surgeries")) {
            ckpt.provenance.surgeries.push_back(plan_from_json(p));
        }
        ckpt.provenance.train_steps = pv.at("train_steps").get<int64_t>();
        ckpt.provenance.seed_lineage = pv.at("seed_lineage").get<std::vector<std::string>>();
        ckpt.provenance.task = pv.at("task").get<std::string>();
        ckpt.provenance.prompt = pv.at("prompt").get<std::vector<int>>();

        for (const json& a : meta.at("adapters")) {
            const auto layer = a.at("layer").get<size_t>();
            require(layer < ckpt.model.layers.size(), ErrorCode::io, context + ": adapter on a missing layer");
            const std::string proj = a.at("projection").get<std::string>();
            const Projection p = *parse_projection_selector(proj).begin();
            LoraAdapter ad;
            ad.rank = a.at("rank").get<int>();
            ad.alpha = a.at("alpha").get<float>();
            ad.dropout = a.at("dropout").get<float>();
            ckpt.model.layers[layer].projection(p).lora = std::move(ad);
        }

        std::map<std::string, const json*> index;
        for (const json& t : meta.at("tensors")) {
            index[t.at("name").get<std::string>()] = &t;
        }
        const std::vector<NamedParam> expected = all_tensors(ckpt);
        require(expected.size() == index.size(), ErrorCode::io,
                context + ": tensor index has " + std::to_string(index.size()) + " entries, expected " +
                    std::to_string(expected.size()));
        for (const NamedParam& np : expected) {
            const auto it = index.find(np.name);
            require(it != index.end(), ErrorCode::io, context + ": missing tensor " + np.name);
            const json& t = *it->second;
            const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
            require(shape.size() == 2, ErrorCode::io, context + ": tensor " + np.name + " is not 2-D");
            const auto offset = t.at("offset").get<size_t>();
            const auto nbytes = t.at("nbytes").get<size_t>();
            require(nbytes == static_cast<size_t>(shape[0] * shape[1]) * 4 && offset + nbytes <= payload_size,
                    ErrorCode::io, context + ": tensor " + np.name + " lies outside the payload");
            require(crc32_of(payload + offset, nbytes) == t.at("crc32").get<uint32_t>(), ErrorCode::checksum,
                    context + ": checksum mismatch in tensor " + np.name);
            np.param->value.resize(shape[0], shape[1]);
            ByteReader tr(payload + offset, nbytes, context);
            for (Eigen::Index i = 0; i < np.param->value.size(); ++i) {
                np.param->value.data()[i] = tr.f32();
            }
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::io, context + ": malformed checkpoint metadata: " + e.what());
    }
    return ckpt;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    const Bytes b = encode_checkpoint(ckpt);
    atomic_write(path, b.data(), b.size());
}

Checkpoint load_checkpoint(const fs::path& path) {
    const fs::path file = resolve_checkpoint_path(path);
    return decode_checkpoint(read_file(file), file.string());
}

fs::path resolve_checkpoint_path(const fs::path& path) {
    if (fs::is_directory(path)) {
        return path / "model.ckpt";
    }
    require(fs::exists(path), ErrorCode::io, "checkpoint " + path.string() + " does not exist");
    return path;
}

std::string model_fingerprint(const DecoderModel& model_in) {
    auto& model = const_cast<DecoderModel&>(model_in);
    ByteWriter w;
    w.raw(config_to_json(model.config).dump());
    for (const NamedParam& np : named_parameters(model)) {
        w.raw(np.name);
        write_tensor(w, np.param->value);
    }
    return sha256_hex(w.bytes().data(), w.bytes().size()).substr(0, 16);
}

}  // namespace speechprune
