#include "mera/harness.hpp"

#include <algorithm>
#include <bit>
#include <cinttypes>
#include <climits>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mera/error.hpp"
#include "mera/optim.hpp"
#include "mera/rng.hpp"

namespace fs = std::filesystem;

namespace mera {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_u64(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%" PRIu64, v);
    return buf;
}

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(s);
    while (std::getline(ss, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* wanted) {
    throw ConfigError("config key '" + key + "': cannot read '" + value + "' as " + wanted);
}

std::int64_t parse_i64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        long long v = std::stoll(value, &used);
        if (used != value.size()) bad_value(key, value, "an integer");
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        bad_value(key, value, "an integer");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        unsigned long long v = std::stoull(value, &used);
        if (used != value.size() || value.front() == '-') bad_value(key, value, "a seed");
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        bad_value(key, value, "a seed");
    }
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size() || !std::isfinite(v)) bad_value(key, value, "a number");
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        bad_value(key, value, "a number");
    }
}

int parse_int(const std::string& key, const std::string& value) {
    auto v = parse_i64(key, value);
    if (v < INT_MIN || v > INT_MAX) bad_value(key, value, "an integer");
    return static_cast<int>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    bad_value(key, value, "a bool (true/false)");
}

ModalitySpec* roster_spec(RunConfig& cfg, const std::string& id) {
    for (auto& s : cfg.roster)
        if (s.id == id) return &s;
    return nullptr;
}

const ModalitySpec* roster_spec(const RunConfig& cfg, const std::string& id) {
    for (const auto& s : cfg.roster)
        if (s.id == id) return &s;
    return nullptr;
}

} // namespace

std::uint64_t RunConfig::data_seed() const {
    return seed_data ? *seed_data : derive_seed(seed, "data");
}
std::uint64_t RunConfig::init_seed() const {
    return seed_init ? *seed_init : derive_seed(seed, "init");
}
std::uint64_t RunConfig::shuffle_seed() const {
    return seed_shuffle ? *seed_shuffle : derive_seed(seed, "shuffle");
}
std::uint64_t RunConfig::replay_seed() const {
    return seed_replay ? *seed_replay : derive_seed(seed, "replay");
}
std::uint64_t RunConfig::fisher_seed() const {
    return seed_fisher ? *seed_fisher : derive_seed(seed, "fisher");
}

std::string RunConfig::resolved_experts_dir() const {
    if (!experts_dir.empty()) return experts_dir;
    return out_dir + "/experts";
}

RunConfig default_config() {
    RunConfig cfg;
    cfg.shape.latent_dim = 16;
    cfg.shape.classes = 8;
    cfg.shape.train_per_task = 2000;
    cfg.shape.test_per_task = 500;
    cfg.roster = {{"image", 24, 101, 0.05},
                  {"video", 32, 102, 0.05},
                  {"audio", 20, 103, 0.05},
                  {"point", 28, 104, 0.05}};
    cfg.dims.encoder_hidden = 32;
    cfg.dims.feat_dim = 32;
    cfg.dims.embed_dim = 32;
    cfg.dims.classes = cfg.shape.classes;
    if (const char* root = std::getenv("MERALAB_OUT")) cfg.out_dir = root;
    return cfg;
}

std::map<std::string, std::string> config_echo(const RunConfig& cfg) {
    std::map<std::string, std::string> out;
    out["method"] = cfg.method;
    out["order"] = cfg.order;
    out["out"] = cfg.out_dir;
    out["experts.dir"] = cfg.resolved_experts_dir();
    out["method.replay_fraction"] = fmt_double(cfg.replay_fraction);
    out["method.mispair_fraction"] = fmt_double(cfg.mispair_fraction);
    out["method.lambda"] = fmt_double(cfg.lambda);
    out["method.realign"] = cfg.realign_flag ? "true" : "false";
    out["data.latent"] = fmt_u64(static_cast<std::uint64_t>(cfg.shape.latent_dim));
    out["data.classes"] = fmt_u64(static_cast<std::uint64_t>(cfg.shape.classes));
    out["data.train_per_task"] = fmt_u64(static_cast<std::uint64_t>(cfg.shape.train_per_task));
    out["data.test_per_task"] = fmt_u64(static_cast<std::uint64_t>(cfg.shape.test_per_task));
    out["model.hidden"] = fmt_u64(static_cast<std::uint64_t>(cfg.dims.encoder_hidden));
    out["model.feat"] = fmt_u64(static_cast<std::uint64_t>(cfg.dims.feat_dim));
    out["model.embed"] = fmt_u64(static_cast<std::uint64_t>(cfg.dims.embed_dim));
    out["train.optimizer"] = cfg.train.optimizer == OptKind::adam ? "adam" : "sgd";
    out["train.warmup_ratio"] = fmt_double(cfg.train.warmup_ratio);
    out["train.pretrain_epochs"] = fmt_u64(static_cast<std::uint64_t>(cfg.train.pretrain_epochs));
    out["train.finetune_epochs"] = fmt_u64(static_cast<std::uint64_t>(cfg.train.finetune_epochs));
    out["train.realign_epochs"] = fmt_u64(static_cast<std::uint64_t>(cfg.train.realign_epochs));
    out["train.pretrain_batch"] = fmt_u64(static_cast<std::uint64_t>(cfg.train.pretrain_batch));
    out["train.finetune_batch"] = fmt_u64(static_cast<std::uint64_t>(cfg.train.finetune_batch));
    out["train.realign_batch"] = fmt_u64(static_cast<std::uint64_t>(cfg.train.realign_batch));
    out["train.lr_pretrain"] = fmt_double(cfg.train.lr_connector_pretrain);
    out["train.lr_finetune_connector"] = fmt_double(cfg.train.lr_connector_finetune);
    out["train.lr_backbone"] = fmt_double(cfg.train.lr_backbone);
    out["train.lr_realign"] = fmt_double(cfg.train.lr_connector_realign);
    out["seed"] = fmt_u64(cfg.seed);
    out["seed.data"] = fmt_u64(cfg.data_seed());
    out["seed.init"] = fmt_u64(cfg.init_seed());
    out["seed.shuffle"] = fmt_u64(cfg.shuffle_seed());
    out["seed.replay"] = fmt_u64(cfg.replay_seed());
    out["seed.fisher"] = fmt_u64(cfg.fisher_seed());
    for (const auto& s : cfg.roster) {
        out["modality." + s.id + ".input_dim"] =
            fmt_u64(static_cast<std::uint64_t>(s.input_dim));
        out["modality." + s.id + ".render_seed"] = fmt_u64(s.render_seed);
        out["modality." + s.id + ".noise_sigma"] = fmt_double(s.noise_sigma);
    }
    return out;
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "method") {
        cfg.method = value;
    } else if (key == "order") {
        cfg.order = value;
    } else if (key == "out") {
        cfg.out_dir = value;
    } else if (key == "experts.dir") {
        cfg.experts_dir = value;
    } else if (key == "method.replay_fraction") {
        cfg.replay_fraction = parse_double(key, value);
    } else if (key == "method.mispair_fraction") {
        cfg.mispair_fraction = parse_double(key, value);
    } else if (key == "method.lambda") {
        cfg.lambda = parse_double(key, value);
    } else if (key == "method.realign") {
        cfg.realign_flag = parse_bool(key, value);
    } else if (key == "data.latent") {
        cfg.shape.latent_dim = parse_i64(key, value);
    } else if (key == "data.classes") {
        cfg.shape.classes = parse_i64(key, value);
        cfg.dims.classes = cfg.shape.classes; // heads follow the label space
    } else if (key == "data.train_per_task") {
        cfg.shape.train_per_task = parse_i64(key, value);
    } else if (key == "data.test_per_task") {
        cfg.shape.test_per_task = parse_i64(key, value);
    } else if (key == "model.hidden") {
        cfg.dims.encoder_hidden = parse_i64(key, value);
    } else if (key == "model.feat") {
        cfg.dims.feat_dim = parse_i64(key, value);
    } else if (key == "model.embed") {
        cfg.dims.embed_dim = parse_i64(key, value);
    } else if (key == "train.optimizer") {
        if (value == "adam") cfg.train.optimizer = OptKind::adam;
        else if (value == "sgd") cfg.train.optimizer = OptKind::sgd;
        else bad_value(key, value, "an optimizer (adam/sgd)");
    } else if (key == "train.warmup_ratio") {
        cfg.train.warmup_ratio = parse_double(key, value);
    } else if (key == "train.pretrain_epochs") {
        cfg.train.pretrain_epochs = parse_int(key, value);
    } else if (key == "train.finetune_epochs") {
        cfg.train.finetune_epochs = parse_int(key, value);
    } else if (key == "train.realign_epochs") {
        cfg.train.realign_epochs = parse_int(key, value);
    } else if (key == "train.pretrain_batch") {
        cfg.train.pretrain_batch = parse_i64(key, value);
    } else if (key == "train.finetune_batch") {
        cfg.train.finetune_batch = parse_i64(key, value);
    } else if (key == "train.realign_batch") {
        cfg.train.realign_batch = parse_i64(key, value);
    } else if (key == "train.lr_pretrain") {
        cfg.train.lr_connector_pretrain = parse_double(key, value);
    } else if (key == "train.lr_finetune_connector") {
        cfg.train.lr_connector_finetune = parse_double(key, value);
    } else if (key == "train.lr_backbone") {
        cfg.train.lr_backbone = parse_double(key, value);
    } else if (key == "train.lr_realign") {
        cfg.train.lr_connector_realign = parse_double(key, value);
    } else if (key == "seed") {
        cfg.seed = parse_u64(key, value);
    } else if (key == "seed.data") {
        cfg.seed_data = parse_u64(key, value);
    } else if (key == "seed.init") {
        cfg.seed_init = parse_u64(key, value);
    } else if (key == "seed.shuffle") {
        cfg.seed_shuffle = parse_u64(key, value);
    } else if (key == "seed.replay") {
        cfg.seed_replay = parse_u64(key, value);
    } else if (key == "seed.fisher") {
        cfg.seed_fisher = parse_u64(key, value);
    } else if (key.rfind("modality.", 0) == 0) {
        auto rest = key.substr(9);
        auto dot = rest.find('.');
        if (dot == std::string::npos) throw ConfigError("unknown config key '" + key + "'");
        auto id = rest.substr(0, dot);
        auto field = rest.substr(dot + 1);
        auto* spec = roster_spec(cfg, id);
        if (!spec) throw ConfigError("config key '" + key + "': unknown modality '" + id + "'");
        if (field == "input_dim") spec->input_dim = parse_i64(key, value);
        else if (field == "render_seed") spec->render_seed = parse_u64(key, value);
        else if (field == "noise_sigma") spec->noise_sigma = parse_double(key, value);
        else throw ConfigError("unknown config key '" + key + "'");
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    RunConfig cfg = default_config();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config file '" + path + "' line " + std::to_string(lineno) +
                              ": expected key = value");
        apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

std::vector<std::string> resolve_order(const RunConfig& cfg) {
    std::vector<std::string> ids;
    if (cfg.order == "sequential") {
        for (const auto& s : cfg.roster) ids.push_back(s.id);
    } else if (cfg.order == "reverse") {
        for (auto it = cfg.roster.rbegin(); it != cfg.roster.rend(); ++it)
            ids.push_back(it->id);
    } else {
        ids = split_list(cfg.order);
    }
    if (ids.empty()) throw ConfigError("config key 'order': resolves to no modalities");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!roster_spec(cfg, ids[i]))
            throw ConfigError("config key 'order': unknown modality '" + ids[i] + "'");
        for (std::size_t j = i + 1; j < ids.size(); ++j)
            if (ids[i] == ids[j])
                throw ConfigError("config key 'order': modality '" + ids[i] + "' repeats");
    }
    return ids;
}

void validate_config(const RunConfig& cfg) {
    static const std::vector<std::string> methods = {"ft", "replay", "ewc", "eproj", "mera"};
    bool known = false;
    for (const auto& m : methods) known = known || m == cfg.method;
    if (!known) throw ConfigError("config key 'method': unknown method '" + cfg.method + "'");
    resolve_order(cfg);
    if (!(cfg.replay_fraction > 0.0 && cfg.replay_fraction <= 1.0))
        throw ConfigError("config key 'method.replay_fraction': must be in (0, 1]");
    if (cfg.mispair_fraction < 0.0 || cfg.mispair_fraction > 1.0)
        throw ConfigError("config key 'method.mispair_fraction': must be in [0, 1]");
    if (cfg.lambda < 0.0) throw ConfigError("config key 'method.lambda': must be >= 0");
    if (cfg.shape.latent_dim < 1) throw ConfigError("config key 'data.latent': must be positive");
    if (cfg.shape.classes < 2) throw ConfigError("config key 'data.classes': must be >= 2");
    if (cfg.shape.classes > cfg.shape.latent_dim)
        throw ConfigError("config key 'data.classes': label rules need classes <= data.latent");
    if (cfg.shape.train_per_task < 1)
        throw ConfigError("config key 'data.train_per_task': must be positive");
    if (cfg.shape.test_per_task < 1)
        throw ConfigError("config key 'data.test_per_task': must be positive");
    if (cfg.dims.encoder_hidden < 1) throw ConfigError("config key 'model.hidden': must be positive");
    if (cfg.dims.feat_dim < 1) throw ConfigError("config key 'model.feat': must be positive");
    if (cfg.dims.embed_dim < 1) throw ConfigError("config key 'model.embed': must be positive");
    for (const auto& s : cfg.roster)
        if (s.input_dim < 1)
            throw ConfigError("config key 'modality." + s.id + ".input_dim': must be positive");
    const auto& t = cfg.train;
    if (t.warmup_ratio < 0.0 || t.warmup_ratio >= 1.0)
        throw ConfigError("config key 'train.warmup_ratio': must be in [0, 1)");
    if (t.pretrain_epochs < 0 || t.finetune_epochs < 0 || t.realign_epochs < 0)
        throw ConfigError("config key 'train.*_epochs': must be >= 0");
    if (t.pretrain_batch < 1 || t.finetune_batch < 1 || t.realign_batch < 1)
        throw ConfigError("config key 'train.*_batch': must be >= 1");
    if (t.lr_connector_pretrain <= 0.0 || t.lr_connector_finetune <= 0.0 ||
        t.lr_backbone <= 0.0 || t.lr_connector_realign <= 0.0)
        throw ConfigError("config key 'train.lr_*': must be positive");
}

std::vector<ModalityDataset> build_datasets(const RunConfig& cfg) {
    std::vector<ModalityDataset> out;
    for (const auto& id : resolve_order(cfg))
        out.push_back(generate_modality(*roster_spec(cfg, id), cfg.shape, kTasks,
                                        cfg.data_seed()));
    return out;
}

StageContext stage_context(const RunConfig& cfg, int stage) {
    StageContext ctx;
    ctx.stage = stage;
    ctx.order = resolve_order(cfg);
    ctx.method = cfg.method;
    ctx.replay_fraction = cfg.replay_fraction;
    ctx.mispair_fraction = cfg.mispair_fraction;
    ctx.lambda = cfg.lambda;
    ctx.realign_flag = cfg.realign_flag;
    ctx.init_seed = cfg.init_seed();
    ctx.shuffle_seed = cfg.shuffle_seed();
    ctx.replay_seed = cfg.replay_seed();
    ctx.fisher_seed = cfg.fisher_seed();
    ctx.train = cfg.train;
    return ctx;
}

// ---- checkpoints ----

namespace {

void put_bytes(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
}

void put_u32(std::string& out, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    put_bytes(out, b, 4);
}

void put_i64(std::string& out, std::int64_t sv) {
    auto v = static_cast<std::uint64_t>(sv);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    put_bytes(out, b, 8);
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

// cursor over a loaded checkpoint image; every read names its offset on failure
struct ByteReader {
    const std::string& buf;
    std::size_t off = 0;

    void need(std::size_t n, const char* what) const {
        if (off + n > buf.size())
            throw FormatError(std::string("checkpoint truncated reading ") + what +
                              " at byte " + std::to_string(off));
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf[off++]);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
        off += 4;
        return v;
    }
    std::int64_t i64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
        off += 8;
        return static_cast<std::int64_t>(v);
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(off, n);
        off += n;
        return s;
    }
    bool done() const { return off == buf.size(); }
};

} // namespace

void save_checkpoint(const MultimodalModel& m, const nlohmann::json& extra_meta,
                     const std::string& path) {
    nlohmann::json meta;
    meta["model"]["dims"] = {{"encoder_hidden", m.dims.encoder_hidden},
                             {"feat_dim", m.dims.feat_dim},
                             {"embed_dim", m.dims.embed_dim},
                             {"classes", m.dims.classes}};
    meta["model"]["tasks"] = m.tasks;
    auto mods = nlohmann::json::array();
    for (const auto& info : m.modalities)
        mods.push_back({{"id", info.id}, {"input_dim", info.input_dim}});
    meta["model"]["modalities"] = mods;
    if (!extra_meta.is_null()) meta["run"] = extra_meta;

    std::string image;
    image += "MERA";
    image.push_back(static_cast<char>(kCheckpointVersion));
    std::string doc = meta.dump();
    put_u32(image, static_cast<std::uint32_t>(doc.size()));
    image += doc;
    for (const auto& [name, e] : m.params) {
        put_u32(image, static_cast<std::uint32_t>(name.size()));
        image += name;
        put_u32(image, static_cast<std::uint32_t>(e.value.shape.size()));
        for (auto d : e.value.shape) put_i64(image, d);
        for (float v : e.value.data) put_f32(image, v);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(image.data(), static_cast<std::streamsize>(image.size()));
    out.flush();
    if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string buf = ss.str();

    ByteReader r{buf};
    auto magic = r.str(4, "magic");
    if (magic != "MERA") throw FormatError("bad checkpoint magic at byte 0");
    auto version = r.u8("version");
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                          " at byte 4");
    auto meta_len = r.u32("metadata length");
    auto meta_off = r.off;
    auto doc = r.str(meta_len, "metadata");
    auto meta = nlohmann::json::parse(doc, nullptr, false);
    if (meta.is_discarded())
        throw FormatError("metadata is not valid JSON at byte " + std::to_string(meta_off));

    LoadedCheckpoint out;
    try {
        const auto& md = meta.at("model").at("dims");
        ModelDims dims;
        dims.encoder_hidden = md.at("encoder_hidden").get<std::int64_t>();
        dims.feat_dim = md.at("feat_dim").get<std::int64_t>();
        dims.embed_dim = md.at("embed_dim").get<std::int64_t>();
        dims.classes = md.at("classes").get<std::int64_t>();
        auto tasks = meta.at("model").at("tasks").get<std::vector<std::string>>();
        out.model = make_model(dims, tasks, 0);
        for (const auto& info : meta.at("model").at("modalities"))
            register_modality(out.model, info.at("id").get<std::string>(),
                              info.at("input_dim").get<std::int64_t>(), 0);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint metadata lacks a usable model section at byte " +
                          std::to_string(meta_off) + ": " + e.what());
    } catch (const Error& e) {
        throw FormatError("checkpoint metadata describes an invalid model at byte " +
                          std::to_string(meta_off) + ": " + e.what());
    }
    out.meta = std::move(meta);

    std::set<std::string> seen;
    while (!r.done()) {
        auto rec_off = r.off;
        auto name_len = r.u32("parameter name length");
        auto name = r.str(name_len, "parameter name");
        auto rank = r.u32("parameter rank");
        if (rank > 8)
            throw FormatError("implausible rank " + std::to_string(rank) + " at byte " +
                              std::to_string(rec_off));
        std::vector<std::int64_t> shape;
        std::int64_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            auto d = r.i64("parameter extent");
            if (d < 0 || d > (1 << 28))
                throw FormatError("implausible extent " + std::to_string(d) + " at byte " +
                                  std::to_string(rec_off));
            shape.push_back(d);
            numel *= d;
        }
        if (!out.model.params.has(name))
            throw FormatError("unknown parameter '" + name + "' at byte " +
                              std::to_string(rec_off));
        if (!seen.insert(name).second)
            throw FormatError("duplicate parameter '" + name + "' at byte " +
                              std::to_string(rec_off));
        auto& e = out.model.params.at(name);
        if (e.value.shape != shape)
            throw FormatError("parameter '" + name + "' has unexpected shape at byte " +
                              std::to_string(rec_off));
        for (std::int64_t i = 0; i < numel; ++i)
            e.value.data[static_cast<std::size_t>(i)] = r.f32("parameter values");
    }
    for (const auto& [name, e] : out.model.params) {
        (void)e;
        if (!seen.count(name))
            throw FormatError("checkpoint is missing parameter '" + name + "'");
    }
    return out;
}

// ---- experts ----

namespace {

std::string csv_escape_free(const std::string& s) {
    // names in this lab never carry commas or quotes; keep them that way
    if (s.find_first_of(",\"\n") != std::string::npos)
        throw ArgumentError("name '" + s + "' is not CSV safe");
    return s;
}

struct ExpertScores {
    // modality -> task -> score
    std::map<std::string, std::map<std::string, double>> by_mod;
};

ExpertScores read_expert_csv(const std::string& path) {
    ExpertScores out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        if (first) {
            first = false;
            if (line == "modality,task,score") continue;
            throw FormatError("expert scores file '" + path + "' has an unexpected header");
        }
        auto parts = split_list(line);
        if (parts.size() != 3)
            throw FormatError("expert scores file '" + path + "' has a malformed row");
        out.by_mod[parts[0]][parts[1]] = parse_double("experts csv score", parts[2]);
    }
    return out;
}

void write_expert_csv(const std::string& path, const ExpertScores& scores) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << "modality,task,score\n";
    for (const auto& [mod, tasks] : scores.by_mod)
        for (const auto& [task, score] : tasks)
            out << csv_escape_free(mod) << ',' << csv_escape_free(task) << ','
                << fmt_double(score) << '\n';
}

MultimodalModel base_model_for(const RunConfig& cfg) {
    return make_model(cfg.dims, kTasks, derive_seed(cfg.init_seed(), "base"));
}

} // namespace

std::map<std::string, std::map<std::string, double>> ensure_experts(
    const RunConfig& cfg, const std::vector<ModalityDataset>& data) {
    auto dir = cfg.resolved_experts_dir();
    fs::create_directories(dir);
    auto csv_path = dir + "/scores.csv";
    auto cache = read_expert_csv(csv_path);

    bool added = false;
    for (const auto& ds : data) {
        if (cache.by_mod.count(ds.modality)) continue;
        // the expert sees only its own modality but starts from the same
        // base weights and standard recipe as the continual run
        StageContext ctx = stage_context(cfg, 1);
        ctx.order = {ds.modality};
        ctx.stage = 1;
        ctx.method = "ft";
        ctx.realign_flag = false;
        auto expert = run_method_stage(base_model_for(cfg), {&ds}, ctx, nullptr);
        for (const auto& t : ds.tasks)
            cache.by_mod[ds.modality][t.task] =
                score_accuracy(expert, ds.modality, t.task, t.test);
        nlohmann::json meta;
        meta["role"] = "expert";
        meta["modality"] = ds.modality;
        meta["seed"] = cfg.seed;
        save_checkpoint(expert, meta, dir + "/" + ds.modality + ".bin");
        added = true;
    }
    if (added) write_expert_csv(csv_path, cache);

    std::map<std::string, std::map<std::string, double>> out;
    for (const auto& ds : data) {
        const auto& tasks = cache.by_mod.at(ds.modality);
        for (const auto& t : ds.tasks) {
            auto it = tasks.find(t.task);
            if (it == tasks.end())
                throw StateError("expert cache lacks task '" + t.task + "' for modality '" +
                                 ds.modality + "'");
            out[ds.modality][t.task] = it->second;
        }
    }
    return out;
}

// ---- run orchestration ----

namespace {

void log_line(std::ofstream& log, const std::string& msg) {
    std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%d %H:%M:%S", std::gmtime(&now));
    log << '[' << stamp << "] " << msg << '\n';
    log.flush();
}

nlohmann::json run_meta(const RunConfig& cfg, const std::vector<std::string>& order,
                        int stage) {
    nlohmann::json j;
    j["method"] = cfg.method;
    j["order"] = order;
    j["stage"] = stage;
    j["seed"] = cfg.seed;
    j["seeds"] = {{"data", cfg.data_seed()},
                  {"init", cfg.init_seed()},
                  {"shuffle", cfg.shuffle_seed()},
                  {"replay", cfg.replay_seed()},
                  {"fisher", cfg.fisher_seed()}};
    return j;
}

void write_summary(const RunConfig& cfg, const std::vector<std::string>& order,
                   const ScoreTable& table, int stages_done) {
    auto rep = aggregate(table, stages_done);
    nlohmann::json j;
    j["config"] = config_echo(cfg);
    j["method"] = cfg.method;
    j["order"] = order;
    j["conventions"] = {
        {"backward_stage_one_percent", 100.0},
        {"relative_gain", "mean over tasks of score / expert score, times 100"},
        {"aggregate", "mean and population std of per-stage gains, stage one included"}};
    auto stages = nlohmann::json::array();
    for (int i = 0; i < stages_done; ++i)
        stages.push_back({{"stage", i + 1}, {"bw_rg", rep.bw[static_cast<std::size_t>(i)]},
                          {"fw_rg", rep.fw[static_cast<std::size_t>(i)]}});
    j["stages"] = stages;
    j["bw"] = {{"mean", rep.bw_mean}, {"std", rep.bw_std}};
    j["fw"] = {{"mean", rep.fw_mean}, {"std", rep.fw_std}};

    std::ofstream out(cfg.out_dir + "/summary.json", std::ios::trunc);
    if (!out) throw Error("cannot open '" + cfg.out_dir + "/summary.json' for writing");
    out << j.dump(2) << '\n';
}

} // namespace

RunResult run_experiment(const RunConfig& cfg) {
    validate_config(cfg);
    auto order = resolve_order(cfg);
    fs::create_directories(cfg.out_dir);

    std::ofstream log(cfg.out_dir + "/log.txt", std::ios::app);
    if (!log) throw Error("cannot open '" + cfg.out_dir + "/log.txt' for writing");
    log_line(log, "run start: method=" + cfg.method + " order=" + cfg.order +
                      " seed=" + fmt_u64(cfg.seed));

    auto data = build_datasets(cfg);
    auto sup = ensure_experts(cfg, data);
    log_line(log, "experts ready");

    ScoreTable table(order, kTasks);
    for (const auto& ds : data)
        for (const auto& t : ds.tasks) table.add_sup(ds.modality, t.task, sup[ds.modality][t.task]);

    std::ofstream csv(cfg.out_dir + "/scores.csv", std::ios::trunc);
    if (!csv) throw Error("cannot open '" + cfg.out_dir + "/scores.csv' for writing");
    csv << "stage,modality,task,score,sup_score,relative_gain\n";
    csv.flush();

    auto m = base_model_for(cfg);
    FisherState fisher;
    int stages = static_cast<int>(order.size());
    for (int i = 1; i <= stages; ++i) {
        auto ctx = stage_context(cfg, i);
        std::vector<const ModalityDataset*> hist;
        for (int j = 0; j < i; ++j) hist.push_back(&data[static_cast<std::size_t>(j)]);

        StageArtifacts art;
        m = run_method_stage(m, hist, ctx, &fisher, &art);

        auto stage_dir = cfg.out_dir + "/stage" + std::to_string(i);
        fs::create_directories(stage_dir);
        save_checkpoint(m, run_meta(cfg, order, i), stage_dir + "/model.bin");
        if (art.has_vanilla) {
            auto meta = run_meta(cfg, order, i);
            meta["role"] = "vanilla";
            if (art.has_merge)
                meta["merge"] = {{"stage", art.merge_rec.stage},
                                 {"keep_coeff", art.merge_rec.keep_coeff},
                                 {"new_coeff", art.merge_rec.new_coeff}};
            save_checkpoint(art.vanilla, meta, stage_dir + "/vanilla.bin");
        }

        for (int j = 0; j < i; ++j) {
            const auto& ds = data[static_cast<std::size_t>(j)];
            for (const auto& t : ds.tasks) {
                double s = score_accuracy(m, ds.modality, t.task, t.test);
                table.add_score(i, ds.modality, t.task, s);
                double ref = table.sup(ds.modality, t.task);
                if (ref == 0.0)
                    throw NumericError("expert score for " + ds.modality + "/" + t.task +
                                       " is zero; relative gain undefined");
                csv << i << ',' << csv_escape_free(ds.modality) << ','
                    << csv_escape_free(t.task) << ',' << fmt_double(s) << ','
                    << fmt_double(ref) << ',' << fmt_double(s / ref * 100.0) << '\n';
            }
        }
        csv.flush();
        write_summary(cfg, order, table, i);
        log_line(log, "stage " + std::to_string(i) + " done: modality=" + order[static_cast<std::size_t>(i - 1)]);
    }

    RunResult result{order, table, aggregate(table, stages)};
    log_line(log, "run complete: bw_mean=" + fmt_double(result.report.bw_mean) +
                      " fw_mean=" + fmt_double(result.report.fw_mean));
    return result;
}

RunResult recompute_from_csv(const std::string& run_dir) {
    auto path = run_dir + "/scores.csv";
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");

    struct Row {
        int stage;
        std::string modality, task;
        double score, sup;
    };
    std::vector<Row> rows;
    std::string line;
    bool first = true;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty()) continue;
        if (first) {
            first = false;
            if (line != "stage,modality,task,score,sup_score,relative_gain")
                throw FormatError("scores file '" + path + "' has an unexpected header");
            continue;
        }
        auto parts = split_list(line);
        if (parts.size() != 6)
            throw FormatError("scores file '" + path + "' line " + std::to_string(lineno) +
                              ": expected 6 columns");
        Row r;
        r.stage = parse_int("scores csv stage", parts[0]);
        r.modality = parts[1];
        r.task = parts[2];
        r.score = parse_double("scores csv score", parts[3]);
        r.sup = parse_double("scores csv sup_score", parts[4]);
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw FormatError("scores file '" + path + "' holds no rows");

    // learning order falls out of first appearances
    std::map<std::string, int> first_stage;
    std::set<std::string> task_set;
    int max_stage = 0;
    for (const auto& r : rows) {
        auto it = first_stage.find(r.modality);
        if (it == first_stage.end() || r.stage < it->second) first_stage[r.modality] = r.stage;
        task_set.insert(r.task);
        max_stage = std::max(max_stage, r.stage);
    }
    std::vector<std::pair<int, std::string>> ranked;
    for (const auto& [mod, st] : first_stage) ranked.push_back({st, mod});
    std::sort(ranked.begin(), ranked.end());
    std::vector<std::string> order;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (ranked[i].first != static_cast<int>(i + 1))
            throw FormatError("scores file '" + path + "': stages are not contiguous from 1");
        order.push_back(ranked[i].second);
    }
    if (max_stage > static_cast<int>(order.size()))
        throw FormatError("scores file '" + path + "': more stages than modalities");

    ScoreTable table(order, std::vector<std::string>(task_set.begin(), task_set.end()));
    for (const auto& r : rows) {
        if (!table.has_sup(r.modality, r.task)) {
            table.add_sup(r.modality, r.task, r.sup);
        } else if (table.sup(r.modality, r.task) != r.sup) {
            throw FormatError("scores file '" + path + "': expert score for " + r.modality +
                              "/" + r.task + " is inconsistent across rows");
        }
        table.add_score(r.stage, r.modality, r.task, r.score);
    }
    return RunResult{order, table, aggregate(table, max_stage)};
}

} // namespace mera
