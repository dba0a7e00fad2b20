#include "p2l/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"
#include "p2l/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace p2l {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', '2', 'L', '1'};
constexpr int kSchemaVersion = 1;

void write_u64(std::ofstream& out, std::uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.write(buf, 8);
}

json store_manifest(const ParameterStore& store) {
    json arrays = json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& p = store.param(i);
        json a;
        a["name"] = store.names()[i];
        a["shape"] = p.value.shape();
        a["offset"] = offset;
        a["count"] = p.value.size();
        arrays.push_back(std::move(a));
        offset += p.value.size() * sizeof(double);
    }
    return arrays;
}

void write_checkpoint(const std::string& path, json manifest, const ParameterStore& store) {
    manifest["schema_version"] = kSchemaVersion;
    manifest["arrays"] = store_manifest(store);
    const std::string mtext = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic, 4);
    write_u64(out, mtext.size());
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& v = store.param(i).value.vec();
        out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!out) throw FormatError("checkpoint: write failed for " + path);
}

struct RawCheckpoint {
    json manifest;
    std::vector<double> payload;
};

RawCheckpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("checkpoint: bad magic in " + path);
    char lenbuf[8];
    in.read(lenbuf, 8);
    if (!in) throw FormatError("checkpoint: truncated manifest length in " + path);
    std::uint64_t mlen;
    std::memcpy(&mlen, lenbuf, 8);
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw FormatError("checkpoint: truncated manifest in " + path);

    RawCheckpoint raw;
    try {
        raw.manifest = json::parse(mtext);
    } catch (const json::exception& e) {
        throw FormatError("checkpoint: malformed manifest in " + path + ": " + e.what());
    }
    if (raw.manifest.value("schema_version", -1) != kSchemaVersion)
        throw FormatError("checkpoint: unsupported schema version in " + path);

    std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(double) != 0) throw FormatError("checkpoint: payload not double-aligned in " + path);
    raw.payload.resize(rest.size() / sizeof(double));
    std::memcpy(raw.payload.data(), rest.data(), rest.size());

    // offsets must be in-bounds, contiguous and non-overlapping
    std::uint64_t expect_offset = 0;
    for (const auto& a : raw.manifest.at("arrays")) {
        const std::uint64_t offset = a.at("offset").get<std::uint64_t>();
        const std::uint64_t count = a.at("count").get<std::uint64_t>();
        if (offset != expect_offset) throw FormatError("checkpoint: array offsets overlap or leave gaps in " + path);
        expect_offset = offset + count * sizeof(double);
    }
    if (expect_offset != raw.payload.size() * sizeof(double))
        throw FormatError("checkpoint: payload size mismatch in " + path);
    return raw;
}

void fill_store(ParameterStore& store, const RawCheckpoint& raw, const std::string& path) {
    const auto& arrays = raw.manifest.at("arrays");
    if (arrays.size() != store.size()) throw FormatError("checkpoint: parameter count mismatch in " + path);
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& a = arrays[i];
        if (a.at("name").get<std::string>() != store.names()[i])
            throw FormatError("checkpoint: parameter name mismatch at index " + std::to_string(i) + " in " + path);
        auto& p = store.param(i);
        if (a.at("shape").get<std::vector<std::size_t>>() != p.value.shape())
            throw FormatError("checkpoint: shape mismatch for " + store.names()[i] + " in " + path);
        const std::uint64_t offset = a.at("offset").get<std::uint64_t>() / sizeof(double);
        std::copy(raw.payload.begin() + static_cast<std::ptrdiff_t>(offset),
                  raw.payload.begin() + static_cast<std::ptrdiff_t>(offset + p.value.size()), p.value.vec().begin());
    }
}

json transformer_config_json(const TransformerConfig& c) {
    return json{{"layers", c.layers}, {"d_model", c.d_model}, {"d_k", c.d_k},   {"heads", c.heads},
                {"vocab", c.vocab},   {"n_max", c.n_max},     {"d_ff", c.d_ff}};
}

TransformerConfig transformer_config_from(const json& j) {
    TransformerConfig c;
    c.layers = j.at("layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_k = j.at("d_k").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.n_max = j.at("n_max").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    return c;
}

} // namespace

void save_guidance(const GuidanceModel& model, const std::string& path) {
    json manifest;
    manifest["kind"] = "guidance";
    manifest["config"] = transformer_config_json(model.config());
    manifest["frozen"] = model.frozen();
    write_checkpoint(path, std::move(manifest), model.net().params());
}

GuidanceModel load_guidance(const std::string& path) {
    RawCheckpoint raw = read_checkpoint(path);
    if (raw.manifest.value("kind", "") != "guidance") throw FormatError("checkpoint: not a guidance model: " + path);
    GuidanceModel model(transformer_config_from(raw.manifest.at("config")), 0);
    fill_store(model.net().params(), raw, path);
    if (raw.manifest.value("frozen", false)) model.freeze();
    return model;
}

void save_policy(const PolicyModel& model, const std::string& path) {
    json manifest;
    manifest["kind"] = "policy";
    manifest["config"] = transformer_config_json(model.net().config());
    manifest["token_ids"] =
        json{{"pad", model.ids().pad}, {"delimiter", model.ids().delimiter}, {"eot", model.ids().eot}};
    write_checkpoint(path, std::move(manifest), model.net().params());
}

PolicyModel load_policy(const std::string& path) {
    RawCheckpoint raw = read_checkpoint(path);
    if (raw.manifest.value("kind", "") != "policy") throw FormatError("checkpoint: not a policy model: " + path);
    const auto& ids = raw.manifest.at("token_ids");
    PolicyModel model(transformer_config_from(raw.manifest.at("config")),
                      {ids.at("pad").get<int>(), ids.at("delimiter").get<int>(), ids.at("eot").get<int>()}, 0);
    fill_store(model.net().params(), raw, path);
    return model;
}

void save_flow(const FlowModel& model, const std::string& path) {
    const auto& c = model.config();
    json manifest;
    manifest["kind"] = "flow";
    manifest["config"] = json{{"n_decisions", c.n_decisions},
                              {"d_model", c.d_model},
                              {"pe_dim", c.pe_dim},
                              {"proj_hidden", c.proj_hidden},
                              {"sigma_z", c.sigma_z},
                              {"ode_steps", c.ode_steps},
                              {"train_epochs", c.train_epochs},
                              {"lr", c.lr},
                              {"batch_size", c.batch_size},
                              {"sample_target", c.sample_target},
                              {"reinit_per_round", c.reinit_per_round}};
    manifest["guidance_checksum"] = std::to_string(model.bound_checksum());
    write_checkpoint(path, std::move(manifest), model.params());
}

FlowModel load_flow(const std::string& path, const GuidanceModel& guidance) {
    RawCheckpoint raw = read_checkpoint(path);
    if (raw.manifest.value("kind", "") != "flow") throw FormatError("checkpoint: not a flow model: " + path);
    const std::uint64_t recorded = std::stoull(raw.manifest.at("guidance_checksum").get<std::string>());
    if (recorded != guidance.checksum())
        throw InvalidStateError("checkpoint: flow checkpoint is bound to a different guidance model (checksum "
                                "mismatch): " +
                                path);
    const auto& j = raw.manifest.at("config");
    FlowConfig c;
    c.n_decisions = j.at("n_decisions").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.pe_dim = j.at("pe_dim").get<std::size_t>();
    c.proj_hidden = j.at("proj_hidden").get<std::size_t>();
    c.sigma_z = j.at("sigma_z").get<double>();
    c.ode_steps = j.at("ode_steps").get<std::size_t>();
    c.train_epochs = j.at("train_epochs").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.sample_target = j.at("sample_target").get<bool>();
    c.reinit_per_round = j.at("reinit_per_round").get<bool>();
    FlowModel model(c, guidance, 0);
    fill_store(model.params(), raw, path);
    return model;
}

std::string file_checksum_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("file_checksum_hex: cannot open " + path);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    char buf[4096];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001B3ULL;
        }
        if (!in) break;
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return std::string(hex);
}

} // namespace p2l
