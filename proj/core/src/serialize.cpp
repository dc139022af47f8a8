#include "dsee/serialize.hpp"

#include <json.hpp>

#include "dsee/adapter.hpp"

namespace dsee {

namespace {

constexpr const char* kFormatTag = "dsee-toy-transformer";

void put_matrix(TensorArchive& archive, const std::string& name, const DenseMatrix& m) {
    std::vector<float> values(m.data().begin(), m.data().end());
    archive.put_f32(name, {m.rows(), m.cols()}, values);
}

void put_vector(TensorArchive& archive, const std::string& name, const std::vector<float>& v) {
    archive.put_f32(name, {v.size()}, v);
}

DenseMatrix get_matrix(const TensorArchive& archive, const std::string& name) {
    const TensorRecord& rec = archive.get(name);
    if (rec.shape.size() != 2) {
        throw CorruptionError("tensor '" + name + "' is not 2-D");
    }
    try {
        return DenseMatrix(rec.shape[0], rec.shape[1], archive.get_f32(name));
    } catch (const Error& e) {
        throw CorruptionError("tensor '" + name + "': " + e.what());
    }
}

std::vector<float> get_vector(const TensorArchive& archive, const std::string& name) {
    const TensorRecord& rec = archive.get(name);
    if (rec.shape.size() != 1) {
        throw CorruptionError("tensor '" + name + "' is not 1-D");
    }
    return archive.get_f32(name);
}

std::string layer_base(std::size_t l) { return "layers." + std::to_string(l) + "."; }

const std::pair<const char*, AdaptedLinear EncoderLayer::*> kProjections[] = {
    {"q", &EncoderLayer::wq},
    {"k", &EncoderLayer::wk},
    {"v", &EncoderLayer::wv},
    {"o", &EncoderLayer::wo},
};

nlohmann::json config_json(const ToyTransformer& model) {
    nlohmann::json j;
    j["vocab_size"] = model.cfg.vocab_size;
    j["seq_len"] = model.cfg.seq_len;
    j["d_model"] = model.cfg.d_model;
    j["n_heads"] = model.cfg.n_heads;
    j["d_ff"] = model.cfg.d_ff;
    j["n_layers"] = model.cfg.n_layers;
    j["n_classes"] = model.cfg.n_classes;
    j["head_dim"] = model.head_dim;
    return j;
}

} // namespace

TensorArchive model_to_archive(const ToyTransformer& model) {
    TensorArchive archive;
    archive.meta()["format"] = kFormatTag;
    archive.meta()["config"] = config_json(model).dump();

    put_matrix(archive, "tok_emb", model.tok_emb);
    put_matrix(archive, "pos_emb", model.pos_emb);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const EncoderLayer& layer = model.layers[l];
        const std::string base = layer_base(l);
        put_vector(archive, base + "ln1.gamma", layer.ln1_gamma);
        put_vector(archive, base + "ln1.beta", layer.ln1_beta);
        for (const auto& [tag, member] : kProjections) {
            const AdaptedLinear& lin = layer.*member;
            const std::string stem = base + "attn." + tag + ".";
            put_matrix(archive, stem + "weight", lin.weight);
            if (lin.mask) {
                archive.put_u8(stem + "mask", {lin.mask->rows, lin.mask->cols}, lin.mask->bits);
            }
            if (lin.adapter) {
                const SparseLowRankUpdate& upd = *lin.adapter;
                put_matrix(archive, stem + "adapter.u", upd.u);
                put_matrix(archive, stem + "adapter.v", upd.v);
                std::vector<std::int64_t> flat;
                flat.reserve(upd.support.indices.size() * 2);
                for (const auto& [i, j] : upd.support.indices) {
                    flat.push_back(i);
                    flat.push_back(j);
                }
                archive.put_i64(stem + "adapter.support", {upd.support.card(), 2}, flat);
                archive.put_f32(stem + "adapter.s2", {upd.s2_values.size()}, upd.s2_values);
            }
        }
        put_vector(archive, base + "gates", layer.gates);
        put_vector(archive, base + "ln2.gamma", layer.ln2_gamma);
        put_vector(archive, base + "ln2.beta", layer.ln2_beta);
        put_matrix(archive, base + "ffn.w1", layer.ffn_w1);
        put_matrix(archive, base + "ffn.w2", layer.ffn_w2);
    }
    put_matrix(archive, "classifier.weight", model.cls_weight);
    put_vector(archive, "classifier.bias", model.cls_bias);
    return archive;
}

ToyTransformer model_from_archive(const TensorArchive& archive) {
    auto meta_it = archive.meta().find("format");
    if (meta_it == archive.meta().end() || meta_it->second != kFormatTag) {
        throw CorruptionError("archive is not a toy-transformer checkpoint");
    }
    nlohmann::json cfg_json;
    try {
        cfg_json = nlohmann::json::parse(archive.meta().at("config"));
    } catch (const std::exception& e) {
        throw CorruptionError(std::string("bad config metadata: ") + e.what());
    }

    ToyTransformer model;
    try {
        model.cfg.vocab_size = cfg_json.at("vocab_size").get<int>();
        model.cfg.seq_len = cfg_json.at("seq_len").get<int>();
        model.cfg.d_model = cfg_json.at("d_model").get<int>();
        model.cfg.n_heads = cfg_json.at("n_heads").get<int>();
        model.cfg.d_ff = cfg_json.at("d_ff").get<int>();
        model.cfg.n_layers = cfg_json.at("n_layers").get<int>();
        model.cfg.n_classes = cfg_json.at("n_classes").get<int>();
        model.head_dim = cfg_json.at("head_dim").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("bad config metadata: ") + e.what());
    }

    model.tok_emb = get_matrix(archive, "tok_emb");
    model.pos_emb = get_matrix(archive, "pos_emb");
    model.layers.resize(model.cfg.n_layers);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        EncoderLayer& layer = model.layers[l];
        const std::string base = layer_base(l);
        layer.ln1_gamma = get_vector(archive, base + "ln1.gamma");
        layer.ln1_beta = get_vector(archive, base + "ln1.beta");
        for (const auto& [tag, member] : kProjections) {
            AdaptedLinear& lin = layer.*member;
            const std::string stem = base + "attn." + tag + ".";
            lin.weight = get_matrix(archive, stem + "weight");
            if (archive.contains(stem + "mask")) {
                const TensorRecord& rec = archive.get(stem + "mask");
                if (rec.shape.size() != 2 || rec.shape[0] != lin.weight.rows() ||
                    rec.shape[1] != lin.weight.cols()) {
                    throw CorruptionError("mask shape mismatch at " + stem);
                }
                UnstructuredMask mask;
                mask.rows = rec.shape[0];
                mask.cols = rec.shape[1];
                mask.bits = archive.get_u8(stem + "mask");
                lin.mask = std::move(mask);
            }
            if (archive.contains(stem + "adapter.support")) {
                SparseLowRankUpdate upd;
                upd.host_rows = lin.weight.rows();
                upd.host_cols = lin.weight.cols();
                upd.u = get_matrix(archive, stem + "adapter.u");
                upd.v = get_matrix(archive, stem + "adapter.v");
                const auto flat = archive.get_i64(stem + "adapter.support");
                if (flat.size() % 2 != 0) {
                    throw CorruptionError("odd support tensor length at " + stem);
                }
                upd.support.host_rows = upd.host_rows;
                upd.support.host_cols = upd.host_cols;
                for (std::size_t idx = 0; idx < flat.size(); idx += 2) {
                    if (flat[idx] < 0 || flat[idx + 1] < 0) {
                        throw CorruptionError("negative support index at " + stem);
                    }
                    upd.support.indices.emplace_back(static_cast<std::uint32_t>(flat[idx]),
                                                     static_cast<std::uint32_t>(flat[idx + 1]));
                }
                upd.s2_values = archive.get_f32(stem + "adapter.s2");
                if (upd.s2_values.size() != upd.support.card()) {
                    throw CorruptionError("s2 length does not match support at " + stem);
                }
                try {
                    upd.support.validate();
                } catch (const Error& e) {
                    throw CorruptionError("invalid support at " + stem + ": " + e.what());
                }
                if (upd.u.rows() != upd.host_rows || upd.v.cols() != upd.host_cols ||
                    upd.u.cols() != upd.v.rows()) {
                    throw CorruptionError("adapter factor shape mismatch at " + stem);
                }
                lin.adapter = std::move(upd);
            }
        }
        layer.gates = get_vector(archive, base + "gates");
        layer.ln2_gamma = get_vector(archive, base + "ln2.gamma");
        layer.ln2_beta = get_vector(archive, base + "ln2.beta");
        layer.ffn_w1 = get_matrix(archive, base + "ffn.w1");
        layer.ffn_w2 = get_matrix(archive, base + "ffn.w2");
    }
    model.cls_weight = get_matrix(archive, "classifier.weight");
    model.cls_bias = get_vector(archive, "classifier.bias");

    if (model.tok_emb.rows() != static_cast<std::size_t>(model.cfg.vocab_size) ||
        model.tok_emb.cols() != static_cast<std::size_t>(model.cfg.d_model) ||
        model.pos_emb.rows() != static_cast<std::size_t>(model.cfg.seq_len) ||
        static_cast<int>(model.layers.size()) != model.cfg.n_layers) {
        throw CorruptionError("checkpoint tensors inconsistent with config metadata");
    }
    return model;
}

TensorArchive merged_model_archive(const ToyTransformer& model) {
    TensorArchive archive;
    archive.meta()["format"] = kFormatTag;
    archive.meta()["merged"] = "true";
    archive.meta()["config"] = config_json(model).dump();

    put_matrix(archive, "tok_emb", model.tok_emb);
    put_matrix(archive, "pos_emb", model.pos_emb);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const EncoderLayer& layer = model.layers[l];
        const std::string base = layer_base(l);
        put_vector(archive, base + "ln1.gamma", layer.ln1_gamma);
        put_vector(archive, base + "ln1.beta", layer.ln1_beta);
        for (const auto& [tag, member] : kProjections) {
            const AdaptedLinear& lin = layer.*member;
            const std::string stem = base + "attn." + tag + ".";
            if (lin.adapter) {
                put_matrix(archive, stem + "weight", merge(lin.weight, lin.mask, *lin.adapter));
            } else if (lin.mask) {
                DenseMatrix masked = lin.weight;
                for (std::size_t i = 0; i < masked.rows(); ++i) {
                    for (std::size_t j = 0; j < masked.cols(); ++j) {
                        if (!lin.mask->kept(i, j)) masked(i, j) = 0.0f;
                    }
                }
                put_matrix(archive, stem + "weight", masked);
            } else {
                put_matrix(archive, stem + "weight", lin.weight);
            }
        }
        put_vector(archive, base + "gates", layer.gates);
        put_vector(archive, base + "ln2.gamma", layer.ln2_gamma);
        put_vector(archive, base + "ln2.beta", layer.ln2_beta);
        put_matrix(archive, base + "ffn.w1", layer.ffn_w1);
        put_matrix(archive, base + "ffn.w2", layer.ffn_w2);
    }
    put_matrix(archive, "classifier.weight", model.cls_weight);
    put_vector(archive, "classifier.bias", model.cls_bias);
    return archive;
}

} // namespace dsee
