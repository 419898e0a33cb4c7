#include "mera/model.hpp"

#include <cmath>

#include "mera/error.hpp"
#include "mera/rng.hpp"

namespace mera {

namespace {

constexpr double ln_eps = 1e-5;

std::string second_segment(const std::string& name) {
    auto a = name.find('.');
    if (a == std::string::npos) throw ArgumentError("parameter name has no component id: " + name);
    auto b = name.find('.', a + 1);
    return name.substr(a + 1, b == std::string::npos ? std::string::npos : b - a - 1);
}

void require_known_task(const MultimodalModel& m, const std::string& task) {
    for (const auto& t : m.tasks)
        if (t == task) return;
    throw ArgumentError("unknown task: " + task);
}

Tensor ones(std::int64_t n) {
    Tensor t({n});
    for (float& f : t.data) f = 1.0f;
    return t;
}

} // namespace

ComponentTag tag_of(const std::string& param_name) {
    if (param_name.starts_with("encoder.")) return {ComponentKind::encoder, second_segment(param_name)};
    if (param_name.starts_with("connector.")) return {ComponentKind::connector, second_segment(param_name)};
    if (param_name.starts_with("backbone.")) return {ComponentKind::backbone, ""};
    if (param_name.starts_with("head.")) return {ComponentKind::head, second_segment(param_name)};
    throw ArgumentError("parameter name outside any component namespace: " + param_name);
}

MultimodalModel make_model(const ModelDims& dims, std::vector<std::string> tasks,
                           std::uint64_t init_seed) {
    if (dims.feat_dim <= 0 || dims.embed_dim <= 0 || dims.classes <= 0 || dims.encoder_hidden <= 0)
        throw ArgumentError("model dims must be positive");
    if (tasks.empty()) throw ArgumentError("model needs at least one task");
    MultimodalModel m;
    m.dims = dims;
    m.tasks = std::move(tasks);

    Rng brng(derive_seed(init_seed, "backbone"));
    m.params.add("backbone.l1.w", xavier_uniform(dims.embed_dim, dims.embed_dim, brng));
    m.params.add("backbone.l1.b", Tensor({dims.embed_dim}));
    m.params.add("backbone.ln1.g", ones(dims.embed_dim));
    m.params.add("backbone.ln1.b", Tensor({dims.embed_dim}));
    m.params.add("backbone.l2.w", xavier_uniform(dims.embed_dim, dims.embed_dim, brng));
    m.params.add("backbone.l2.b", Tensor({dims.embed_dim}));
    m.params.add("backbone.ln2.g", ones(dims.embed_dim));
    m.params.add("backbone.ln2.b", Tensor({dims.embed_dim}));

    for (const auto& task : m.tasks) {
        Rng hrng(derive_seed(init_seed, "head." + task));
        m.params.add("head." + task + ".w", xavier_uniform(dims.embed_dim, dims.classes, hrng));
        m.params.add("head." + task + ".b", Tensor({dims.classes}));
    }
    return m;
}

void register_modality(MultimodalModel& m, const std::string& id, std::int64_t input_dim,
                       std::uint64_t seed) {
    if (id.empty() || id.find('.') != std::string::npos)
        throw ArgumentError("bad modality id: '" + id + "'");
    if (has_modality(m, id)) throw ArgumentError("modality already registered: " + id);
    if (input_dim <= 0) throw ArgumentError("input_dim must be positive for modality " + id);

    Rng erng(derive_seed(seed, "encoder"));
    m.params.add("encoder." + id + ".l1.w", xavier_uniform(input_dim, m.dims.encoder_hidden, erng));
    m.params.add("encoder." + id + ".l1.b", Tensor({m.dims.encoder_hidden}));
    m.params.add("encoder." + id + ".l2.w", xavier_uniform(m.dims.encoder_hidden, m.dims.feat_dim, erng));
    m.params.add("encoder." + id + ".l2.b", Tensor({m.dims.feat_dim}));

    Rng crng(derive_seed(seed, "connector"));
    m.params.add("connector." + id + ".w", xavier_uniform(m.dims.feat_dim, m.dims.embed_dim, crng));
    m.params.add("connector." + id + ".b", Tensor({m.dims.embed_dim}));

    m.modalities.push_back({id, input_dim});
}

bool has_modality(const MultimodalModel& m, const std::string& id) {
    for (const auto& mi : m.modalities)
        if (mi.id == id) return true;
    return false;
}

const ModalityInfo& modality_info(const MultimodalModel& m, const std::string& id) {
    for (const auto& mi : m.modalities)
        if (mi.id == id) return mi;
    throw ArgumentError("modality not registered: " + id);
}

Graph::Ref encoder_nodes(Graph& g, MultimodalModel& m, const std::string& mod, Graph::Ref x) {
    const ModalityInfo& info = modality_info(m, mod);
    if (g.value(x).rank() != 2 || g.value(x).shape[1] != info.input_dim)
        throw ShapeError("encoder input width does not match modality " + mod);
    ParameterSet& p = m.params;
    Graph::Ref h = g.tanh_act(g.add_rowvec(g.matmul(x, g.param(p.at("encoder." + mod + ".l1.w"))),
                                           g.param(p.at("encoder." + mod + ".l1.b"))));
    return g.tanh_act(g.add_rowvec(g.matmul(h, g.param(p.at("encoder." + mod + ".l2.w"))),
                                   g.param(p.at("encoder." + mod + ".l2.b"))));
}

Graph::Ref connector_nodes(Graph& g, MultimodalModel& m, const std::string& mod, Graph::Ref feat) {
    modality_info(m, mod);
    ParameterSet& p = m.params;
    return g.add_rowvec(g.matmul(feat, g.param(p.at("connector." + mod + ".w"))),
                        g.param(p.at("connector." + mod + ".b")));
}

Graph::Ref backbone_nodes(Graph& g, MultimodalModel& m, Graph::Ref emb) {
    ParameterSet& p = m.params;
    Graph::Ref h = g.add_rowvec(g.matmul(emb, g.param(p.at("backbone.l1.w"))), g.param(p.at("backbone.l1.b")));
    h = g.tanh_act(g.layer_norm(h, g.param(p.at("backbone.ln1.g")), g.param(p.at("backbone.ln1.b")), ln_eps));
    h = g.add_rowvec(g.matmul(h, g.param(p.at("backbone.l2.w"))), g.param(p.at("backbone.l2.b")));
    return g.tanh_act(g.layer_norm(h, g.param(p.at("backbone.ln2.g")), g.param(p.at("backbone.ln2.b")), ln_eps));
}

Graph::Ref head_nodes(Graph& g, MultimodalModel& m, const std::string& task, Graph::Ref emb) {
    require_known_task(m, task);
    ParameterSet& p = m.params;
    return g.add_rowvec(g.matmul(emb, g.param(p.at("head." + task + ".w"))),
                        g.param(p.at("head." + task + ".b")));
}

Graph::Ref forward_graph(Graph& g, MultimodalModel& m, const std::string& mod,
                         const std::string& task, Graph::Ref x) {
    return head_nodes(g, m, task, backbone_nodes(g, m, connector_nodes(g, m, mod, encoder_nodes(g, m, mod, x))));
}

// eval wrappers never run backward, so treating the model as mutable for
// the tape's param leaves is safe
Tensor encode_eval(const MultimodalModel& m, const std::string& mod, const Tensor& x) {
    Graph g;
    auto& mm = const_cast<MultimodalModel&>(m);
    return g.value(encoder_nodes(g, mm, mod, g.input(x)));
}

Tensor connect_eval(const MultimodalModel& m, const std::string& mod, const Tensor& feat) {
    Graph g;
    auto& mm = const_cast<MultimodalModel&>(m);
    return g.value(connector_nodes(g, mm, mod, g.input(feat)));
}

Tensor backbone_eval(const MultimodalModel& m, const Tensor& emb) {
    Graph g;
    auto& mm = const_cast<MultimodalModel&>(m);
    return g.value(backbone_nodes(g, mm, g.input(emb)));
}

Tensor head_eval(const MultimodalModel& m, const std::string& task, const Tensor& emb) {
    Graph g;
    auto& mm = const_cast<MultimodalModel&>(m);
    return g.value(head_nodes(g, mm, task, g.input(emb)));
}

Tensor forward_eval(const MultimodalModel& m, const std::string& mod, const std::string& task,
                    const Tensor& x) {
    Graph g;
    auto& mm = const_cast<MultimodalModel&>(m);
    return g.value(forward_graph(g, mm, mod, task, g.input(x)));
}

bool mask_admits(const FreezeMask& mask, const ComponentTag& tag) {
    switch (tag.kind) {
    case ComponentKind::backbone: return mask.backbone;
    case ComponentKind::head: return mask.heads;
    case ComponentKind::encoder: return mask.all_encoders || mask.encoders.count(tag.id) != 0;
    case ComponentKind::connector: return mask.all_connectors || mask.connectors.count(tag.id) != 0;
    }
    return false;
}

void apply_freeze(MultimodalModel& m, const FreezeMask& mask) {
    for (auto& [name, e] : m.params)
        e.trainable = mask_admits(mask, tag_of(name));
}

std::vector<std::string> trainable_names(const MultimodalModel& m) {
    std::vector<std::string> out;
    for (const auto& [name, e] : m.params)
        if (e.trainable) out.push_back(name);
    return out;
}

FeatureProbe snapshot_probe(const MultimodalModel& m, const std::string& mod,
                            const Tensor& probe_inputs, ProbePoint point) {
    if (probe_inputs.rank() != 2 || probe_inputs.shape[0] == 0)
        throw ArgumentError("probe inputs must be a non-empty batch");
    Tensor rep = connect_eval(m, mod, encode_eval(m, mod, probe_inputs));
    if (point == ProbePoint::backbone_out) rep = backbone_eval(m, rep);

    FeatureProbe p;
    p.modality = mod;
    p.point = point;
    p.count = rep.shape[0];
    std::int64_t n = rep.shape[0], w = rep.shape[1];
    p.mean.assign(static_cast<std::size_t>(w), 0.0);
    p.var.assign(static_cast<std::size_t>(w), 0.0);
    for (std::int64_t j = 0; j < w; ++j) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) acc += rep.at(i, j);
        double mu = acc / static_cast<double>(n);
        double vacc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            double d = rep.at(i, j) - mu;
            vacc += d * d;
        }
        p.mean[static_cast<std::size_t>(j)] = mu;
        p.var[static_cast<std::size_t>(j)] = vacc / static_cast<double>(n);
    }
    return p;
}

double probe_drift(const FeatureProbe& a, const FeatureProbe& b) {
    if (a.mean.size() != b.mean.size())
        throw ArgumentError("probe drift: dimension mismatch");
    if (a.point != b.point)
        throw ArgumentError("probe drift: probes taken at different points");
    if (a.modality != b.modality)
        throw ArgumentError("probe drift: probes of different modalities");
    double acc = 0.0;
    for (std::size_t j = 0; j < a.mean.size(); ++j) {
        double dm = a.mean[j] - b.mean[j];
        double ds = std::sqrt(a.var[j]) - std::sqrt(b.var[j]);
        acc += dm * dm + ds * ds;
    }
    return acc / static_cast<double>(a.mean.size());
}

} // namespace mera
