#pragma once

#include <set>
#include <string>
#include <vector>

#include "mera/graph.hpp"
#include "mera/params.hpp"

namespace mera {

// Parameter names are dotted paths under four component namespaces:
//   encoder.<modality>.l1.w   connector.<modality>.w
//   backbone.l1.w             head.<task>.w
// The tag of a name decides who trains it, what merges, and what a
// checkpoint labels it as.
enum class ComponentKind { encoder, connector, backbone, head };

struct ComponentTag {
    ComponentKind kind;
    std::string id; // modality for encoder/connector, task for head, empty for backbone
};

ComponentTag tag_of(const std::string& param_name);

struct ModelDims {
    std::int64_t encoder_hidden = 32;
    std::int64_t feat_dim = 32;
    std::int64_t embed_dim = 32;
    std::int64_t classes = 8;
};

struct ModalityInfo {
    std::string id;
    std::int64_t input_dim = 0;
};

// Shared backbone and task heads plus per-modality encoder/connector pairs.
// Everything lives in one ParameterSet; routing is purely by name prefix.
struct MultimodalModel {
    ModelDims dims;
    std::vector<std::string> tasks;
    std::vector<ModalityInfo> modalities; // registration order
    ParameterSet params;
};

// backbone (2x linear + layer norm + tanh) and one linear head per task
MultimodalModel make_model(const ModelDims& dims, std::vector<std::string> tasks,
                           std::uint64_t init_seed);

// fresh encoder (2-layer tanh MLP) and connector (single linear map)
void register_modality(MultimodalModel& m, const std::string& id, std::int64_t input_dim,
                       std::uint64_t seed);

bool has_modality(const MultimodalModel& m, const std::string& id);
const ModalityInfo& modality_info(const MultimodalModel& m, const std::string& id);

// ---- forward ----
// Graph builders append the stage onto a tape; the _eval wrappers run the
// same builders on a throwaway tape, so both paths produce bitwise
// identical values.

Graph::Ref encoder_nodes(Graph& g, MultimodalModel& m, const std::string& mod, Graph::Ref x);
Graph::Ref connector_nodes(Graph& g, MultimodalModel& m, const std::string& mod, Graph::Ref feat);
Graph::Ref backbone_nodes(Graph& g, MultimodalModel& m, Graph::Ref emb);
Graph::Ref head_nodes(Graph& g, MultimodalModel& m, const std::string& task, Graph::Ref emb);
Graph::Ref forward_graph(Graph& g, MultimodalModel& m, const std::string& mod,
                         const std::string& task, Graph::Ref x);

Tensor encode_eval(const MultimodalModel& m, const std::string& mod, const Tensor& x);
Tensor connect_eval(const MultimodalModel& m, const std::string& mod, const Tensor& feat);
Tensor backbone_eval(const MultimodalModel& m, const Tensor& emb);
Tensor head_eval(const MultimodalModel& m, const std::string& task, const Tensor& emb);
Tensor forward_eval(const MultimodalModel& m, const std::string& mod, const std::string& task,
                    const Tensor& x);

// ---- freezing ----
// A mask lists what trains; apply_freeze sets the trainable bit on every
// parameter accordingly. Phase conventions (who sets which mask) live in
// the method runners.
struct FreezeMask {
    bool backbone = false;
    bool heads = false;
    bool all_encoders = false;
    bool all_connectors = false;
    std::set<std::string> encoders;
    std::set<std::string> connectors;
};

bool mask_admits(const FreezeMask& mask, const ComponentTag& tag);
void apply_freeze(MultimodalModel& m, const FreezeMask& mask);

// names of currently trainable parameters, for tests and logs
std::vector<std::string> trainable_names(const MultimodalModel& m);

// ---- probes ----
// Per-dimension mean and population variance of a representation on a
// fixed probe batch. Drift between two probes of the same shape is the
// mean over dimensions of (d mean)^2 + (d stddev)^2.
enum class ProbePoint { connector_out, backbone_out };

struct FeatureProbe {
    std::string modality;
    ProbePoint point = ProbePoint::connector_out;
    std::int64_t count = 0;
    std::vector<double> mean;
    std::vector<double> var;
};

FeatureProbe snapshot_probe(const MultimodalModel& m, const std::string& mod,
                            const Tensor& probe_inputs,
                            ProbePoint point = ProbePoint::connector_out);
double probe_drift(const FeatureProbe& a, const FeatureProbe& b);

} // namespace mera
