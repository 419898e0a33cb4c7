#include "mera/clmethods.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mera/error.hpp"
#include "mera/graph.hpp"

namespace mera {

namespace {

constexpr double kFisherFraction = 0.01;

std::string stage_tag(int stage) { return "stage." + std::to_string(stage); }

} // namespace

const std::string& StageContext::current() const {
    if (stage < 1 || stage > static_cast<int>(order.size()))
        throw ArgumentError("stage " + std::to_string(stage) + " outside an order of " +
                            std::to_string(order.size()) + " modalities");
    return order[static_cast<std::size_t>(stage - 1)];
}

std::uint64_t stage_replay_seed(std::uint64_t replay_seed, int stage) {
    return derive_seed(replay_seed, "replay." + stage_tag(stage));
}

std::vector<Batch> plan_batches(const std::vector<SampleGroup>& groups, std::int64_t batch_size,
                                Rng& rng) {
    if (batch_size < 1) throw ArgumentError("batch size must be positive");
    std::vector<Batch> out;
    for (const auto& g : groups) {
        auto n = g.inputs.rows();
        if (n == 0) throw ArgumentError("empty sample group " + g.modality + "/" + g.task);
        if (static_cast<std::int64_t>(g.labels.size()) != n)
            throw ArgumentError("group " + g.modality + "/" + g.task + " has " +
                                std::to_string(n) + " inputs but " +
                                std::to_string(g.labels.size()) + " labels");
        auto cols = g.inputs.cols();
        std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        rng.shuffle(idx);
        for (std::int64_t start = 0; start < n; start += batch_size) {
            auto take = std::min(batch_size, n - start);
            Batch b;
            b.modality = g.modality;
            b.task = g.task;
            b.inputs = Tensor({take, cols});
            b.labels.reserve(static_cast<std::size_t>(take));
            for (std::int64_t r = 0; r < take; ++r) {
                auto src = idx[static_cast<std::size_t>(start + r)];
                for (std::int64_t c = 0; c < cols; ++c)
                    b.inputs.data[static_cast<std::size_t>(r * cols + c)] =
                        g.inputs.data[static_cast<std::size_t>(src * cols + c)];
                b.labels.push_back(g.labels[static_cast<std::size_t>(src)]);
            }
            out.push_back(std::move(b));
        }
    }
    rng.shuffle(out);
    return out;
}

std::vector<SampleGroup> replay_groups(const ReplaySet& replay) {
    std::map<std::string, std::vector<const ReplayItem*>> buckets;
    for (const auto& item : replay.items)
        buckets[item.modality + "\x1f" + item.task].push_back(&item);
    std::vector<SampleGroup> out;
    for (auto& [key, items] : buckets) {
        (void)key;
        SampleGroup g;
        g.modality = items.front()->modality;
        g.task = items.front()->task;
        auto dim = static_cast<std::int64_t>(items.front()->input.size());
        g.inputs = Tensor({static_cast<std::int64_t>(items.size()), dim});
        for (std::size_t r = 0; r < items.size(); ++r) {
            if (static_cast<std::int64_t>(items[r]->input.size()) != dim)
                throw ArgumentError("replay item width varies inside " + g.modality + "/" +
                                    g.task);
            std::copy(items[r]->input.begin(), items[r]->input.end(),
                      g.inputs.data.begin() + static_cast<std::ptrdiff_t>(r) * dim);
            g.labels.push_back(items[r]->label);
        }
        out.push_back(std::move(g));
    }
    return out;
}

double eval_loss(const MultimodalModel& m, const std::string& modality, const std::string& task,
                 const SplitData& split) {
    if (split.inputs.rows() == 0) throw ArgumentError("cannot evaluate an empty split");
    if (static_cast<std::int64_t>(split.labels.size()) != split.inputs.rows())
        throw ArgumentError("split inputs and labels disagree in length");
    Tensor logits = forward_eval(m, modality, task, split.inputs);
    return cross_entropy_mean(logits, split.labels, nullptr);
}

// ---- phase runner ----

namespace {

struct PhaseHyper {
    int epochs = 0;
    std::int64_t batch = 1;
    OptKind optimizer = OptKind::adam;
    double warmup_ratio = 0.03;
    double lr_encoder = 0.0;
    double lr_connector = 0.0;
    double lr_backbone = 0.0;
    double lr_head = 0.0;
};

double peak_lr(const PhaseHyper& h, const std::string& name) {
    switch (tag_of(name).kind) {
    case ComponentKind::encoder: return h.lr_encoder;
    case ComponentKind::connector: return h.lr_connector;
    case ComponentKind::backbone: return h.lr_backbone;
    case ComponentKind::head: return h.lr_head;
    }
    return 0.0;
}

std::int64_t batches_per_epoch(const std::vector<SampleGroup>& data, std::int64_t batch) {
    std::int64_t n = 0;
    for (const auto& g : data) n += (g.inputs.rows() + batch - 1) / batch;
    return n;
}

void run_phase(MultimodalModel& m, const std::vector<SampleGroup>& data, const FreezeMask& mask,
               const PhaseHyper& h, Rng& rng, const FisherState* ewc_hist, double lambda) {
    if (h.epochs <= 0 || data.empty()) return;
    apply_freeze(m, mask);
    m.params.zero_grads();
    LrSchedule sched;
    sched.total_steps = static_cast<int>(h.epochs * batches_per_epoch(data, h.batch));
    sched.warmup_ratio = h.warmup_ratio;
    Optimizer opt(h.optimizer, sched);
    opt.configure(m.params, [&](const std::string& name) { return peak_lr(h, name); });
    for (int epoch = 0; epoch < h.epochs; ++epoch) {
        for (auto& b : plan_batches(data, h.batch, rng)) {
            Graph g;
            auto loss = g.softmax_ce(forward_graph(g, m, b.modality, b.task, g.input(b.inputs)),
                                     b.labels);
            g.backward(loss);
            if (ewc_hist) ewc_accumulate_grads(m.params, *ewc_hist, lambda);
            opt.step(m.params);
        }
    }
}

} // namespace

// ---- fisher / ewc ----

FisherSnapshot fisher_estimate(const MultimodalModel& m, const std::vector<SampleGroup>& samples,
                               int stage) {
    std::int64_t total = 0;
    for (const auto& g : samples) total += g.inputs.rows();
    if (total == 0) throw ArgumentError("fisher estimate needs at least one sample");

    // grads and trainable bits stay on a working copy, never on the caller's model
    MultimodalModel work = m;
    FreezeMask mask;
    mask.backbone = true;
    mask.heads = true;
    apply_freeze(work, mask);

    std::map<std::string, std::vector<double>> acc;
    for (const auto& [name, e] : work.params)
        if (e.trainable) acc[name].assign(e.value.data.size(), 0.0);

    for (const auto& grp : samples) {
        auto cols = grp.inputs.cols();
        if (static_cast<std::int64_t>(grp.labels.size()) != grp.inputs.rows())
            throw ArgumentError("fisher group " + grp.modality + "/" + grp.task +
                                " has mismatched labels");
        for (std::int64_t r = 0; r < grp.inputs.rows(); ++r) {
            work.params.zero_grads();
            Tensor one({1, cols});
            std::copy(grp.inputs.data.begin() + static_cast<std::ptrdiff_t>(r * cols),
                      grp.inputs.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols),
                      one.data.begin());
            Graph g;
            auto loss = g.softmax_ce(forward_graph(g, work, grp.modality, grp.task, g.input(one)),
                                     {grp.labels[static_cast<std::size_t>(r)]});
            g.backward(loss);
            for (const auto& [name, e] : work.params) {
                if (!e.trainable || !e.has_grad) continue;
                auto& a = acc[name];
                for (std::size_t i = 0; i < a.size(); ++i) {
                    double gr = static_cast<double>(e.grad.data[i]);
                    a[i] += gr * gr;
                }
            }
        }
    }

    FisherSnapshot snap;
    snap.stage = stage;
    for (const auto& [name, sums] : acc) {
        const auto& e = m.params.at(name);
        Tensor f(e.value.shape);
        for (std::size_t i = 0; i < sums.size(); ++i)
            f.data[i] = static_cast<float>(sums[i] / static_cast<double>(total));
        snap.fisher.emplace(name, std::move(f));
        snap.anchor.emplace(name, e.value);
    }
    return snap;
}

namespace {

// shared walk over every (snapshot, entry) pair; displacement is always
// against the most recent anchor
template <typename Fn>
void ewc_walk(const ParameterSet& ps, const FisherState& hist, Fn&& fn) {
    if (hist.snaps.empty()) return;
    const auto& anchor = hist.snaps.back().anchor;
    for (const auto& snap : hist.snaps) {
        for (const auto& [name, f] : snap.fisher) {
            if (!ps.has(name))
                throw StateError("fisher history names '" + name + "' which the model lacks");
            const auto& e = ps.at(name);
            if (!e.value.same_shape(f))
                throw StateError("fisher shape mismatch for '" + name + "'");
            auto ait = anchor.find(name);
            if (ait == anchor.end())
                throw StateError("anchor missing for '" + name + "'");
            if (!e.value.same_shape(ait->second))
                throw StateError("anchor shape mismatch for '" + name + "'");
            fn(name, e, f, ait->second);
        }
    }
}

} // namespace

double ewc_penalty(const ParameterSet& ps, const FisherState& hist, double lambda) {
    if (lambda < 0.0) throw ArgumentError("ewc lambda must be >= 0");
    double pen = 0.0;
    ewc_walk(ps, hist, [&](const std::string&, const ParamEntry& e, const Tensor& f,
                           const Tensor& anchor) {
        for (std::size_t i = 0; i < f.data.size(); ++i) {
            double d = static_cast<double>(e.value.data[i]) - static_cast<double>(anchor.data[i]);
            pen += 0.5 * lambda * static_cast<double>(f.data[i]) * d * d;
        }
    });
    return pen;
}

double ewc_loss(double base_loss, const ParameterSet& ps, const FisherState& hist, double lambda) {
    return base_loss + ewc_penalty(ps, hist, lambda);
}

void ewc_accumulate_grads(ParameterSet& ps, const FisherState& hist, double lambda) {
    if (lambda < 0.0) throw ArgumentError("ewc lambda must be >= 0");
    // a zero penalty must not touch grad flags, or optimizer state would
    // start ticking on parameters the loss never reached
    if (lambda == 0.0 || hist.snaps.empty()) return;
    ewc_walk(ps, hist, [&](const std::string& name, const ParamEntry&, const Tensor& f,
                           const Tensor& anchor) {
        auto& e = ps.at(name);
        if (!e.trainable) return; // frozen parameters take no penalty pull
        for (std::size_t i = 0; i < f.data.size(); ++i) {
            double d = static_cast<double>(e.value.data[i]) - static_cast<double>(anchor.data[i]);
            e.grad.data[i] += static_cast<float>(lambda * static_cast<double>(f.data[i]) * d);
        }
        e.has_grad = true;
    });
}

// ---- stage procedures ----

namespace {

struct StageVariant {
    const std::vector<SampleGroup>* extra_phase2 = nullptr;
    bool freeze_shared_phase2 = false;
    const FisherState* ewc = nullptr;
    double lambda = 0.0;
};

MultimodalModel stage_train(const MultimodalModel& prev, const ModalityDataset& cur,
                            const StageContext& ctx, const StageVariant& var) {
    const std::string& mod = ctx.current();
    if (cur.modality != mod)
        throw ArgumentError("stage " + std::to_string(ctx.stage) + " trains " + mod +
                            " but was given data for " + cur.modality);
    if (!has_modality(prev, mod))
        throw ArgumentError("modality " + mod + " is not registered on the model");
    if (cur.tasks.empty()) throw ArgumentError("dataset for " + mod + " has no tasks");

    MultimodalModel out = prev;
    const auto& tp = ctx.train;

    // phase 1: the fresh connector alone, on the first (captioning) split
    {
        const auto& cap = cur.tasks.front();
        std::vector<SampleGroup> data{{mod, cap.task, cap.train.inputs, cap.train.labels}};
        FreezeMask mask;
        mask.connectors.insert(mod);
        PhaseHyper h;
        h.epochs = tp.pretrain_epochs;
        h.batch = tp.pretrain_batch;
        h.optimizer = tp.optimizer;
        h.warmup_ratio = tp.warmup_ratio;
        h.lr_connector = tp.lr_connector_pretrain;
        Rng rng(derive_seed(ctx.shuffle_seed, stage_tag(ctx.stage) + ".phase1"));
        run_phase(out, data, mask, h, rng, nullptr, 0.0);
    }

    // phase 2: connector, backbone and heads together on every split
    {
        std::vector<SampleGroup> data;
        for (const auto& t : cur.tasks)
            data.push_back({mod, t.task, t.train.inputs, t.train.labels});
        if (var.extra_phase2)
            data.insert(data.end(), var.extra_phase2->begin(), var.extra_phase2->end());
        FreezeMask mask;
        mask.connectors.insert(mod);
        if (!var.freeze_shared_phase2) {
            mask.backbone = true;
            mask.heads = true;
        }
        PhaseHyper h;
        h.epochs = tp.finetune_epochs;
        h.batch = tp.finetune_batch;
        h.optimizer = tp.optimizer;
        h.warmup_ratio = tp.warmup_ratio;
        h.lr_connector = tp.lr_connector_finetune;
        h.lr_backbone = tp.lr_backbone;
        h.lr_head = tp.lr_backbone;
        Rng rng(derive_seed(ctx.shuffle_seed, stage_tag(ctx.stage) + ".phase2"));
        run_phase(out, data, mask, h, rng, var.ewc, var.lambda);
    }
    return out;
}

} // namespace

MultimodalModel train_stage_standard(const MultimodalModel& prev, const ModalityDataset& cur,
                                     const StageContext& ctx) {
    return stage_train(prev, cur, ctx, StageVariant{});
}

MultimodalModel merge(const MultimodalModel& prev, const MultimodalModel& vanilla, int stage,
                      MergeRecord* rec) {
    if (stage < 1) throw ArgumentError("merge stage must be >= 1");
    for (const auto& [name, e] : prev.params) {
        (void)e;
        if (!vanilla.params.has(name))
            throw StateError("merge namespace mismatch: trained model lacks '" + name + "'");
    }

    MultimodalModel out = vanilla;
    out.params.zero_grads();
    MergeRecord r;
    r.stage = stage;
    r.keep_coeff = static_cast<double>(stage - 1) / static_cast<double>(stage);
    r.new_coeff = 1.0 / static_cast<double>(stage);

    for (auto& [name, e] : out.params) {
        auto tag = tag_of(name);
        bool shared = tag.kind == ComponentKind::backbone || tag.kind == ComponentKind::head;
        if (shared) {
            if (!prev.params.has(name))
                throw StateError("merge namespace mismatch: previous model lacks '" + name + "'");
            const auto& pv = prev.params.at(name).value;
            if (!pv.same_shape(e.value))
                throw StateError("merge shape mismatch for '" + name + "'");
            r.merged.push_back(name);
            if (stage == 1) continue; // coefficient on prev is exactly zero, keep vanilla bits
            for (std::size_t i = 0; i < e.value.data.size(); ++i)
                e.value.data[i] =
                    static_cast<float>(r.keep_coeff * static_cast<double>(pv.data[i]) +
                                       r.new_coeff * static_cast<double>(e.value.data[i]));
        } else if (prev.params.has(name)) {
            const auto& pv = prev.params.at(name).value;
            if (!pv.same_shape(e.value))
                throw StateError("merge shape mismatch for '" + name + "'");
            e.value = pv;
            r.carried_prev.push_back(name);
        } else {
            r.carried_new.push_back(name);
        }
    }
    if (rec) *rec = std::move(r);
    return out;
}

MultimodalModel realign(const MultimodalModel& merged, const ReplaySet& replay,
                        const StageContext& ctx) {
    if (replay.items.empty()) throw ArgumentError("realign needs a nonempty replay set");
    auto groups = replay_groups(replay);
    for (const auto& g : groups)
        if (!has_modality(merged, g.modality))
            throw ArgumentError("replay references unregistered modality " + g.modality);

    MultimodalModel out = merged;
    FreezeMask mask;
    mask.all_connectors = true;
    PhaseHyper h;
    h.epochs = ctx.train.realign_epochs;
    h.batch = ctx.train.realign_batch;
    h.optimizer = ctx.train.optimizer;
    h.warmup_ratio = ctx.train.warmup_ratio;
    h.lr_connector = ctx.train.lr_connector_realign;
    Rng rng(derive_seed(stage_replay_seed(ctx.replay_seed, ctx.stage), "realign.shuffle"));
    run_phase(out, groups, mask, h, rng, nullptr, 0.0);
    return out;
}

ReplaySet stage_replay(const std::vector<const ModalityDataset*>& history,
                       const StageContext& ctx, bool include_current) {
    auto seed = stage_replay_seed(ctx.replay_seed, ctx.stage);
    auto r = sample_replay(history, ctx.replay_fraction, seed, include_current);
    if (ctx.mispair_fraction > 0.0)
        r = corrupt_mispair(r, ctx.mispair_fraction, derive_seed(seed, "mispair"));
    return r;
}

namespace {

std::vector<SampleGroup> fisher_subset(const ModalityDataset& cur, const StageContext& ctx) {
    std::vector<std::pair<std::size_t, std::int64_t>> pool; // (task index, row)
    for (std::size_t t = 0; t < cur.tasks.size(); ++t)
        for (std::int64_t r = 0; r < cur.tasks[t].train.inputs.rows(); ++r)
            pool.emplace_back(t, r);
    if (pool.empty()) throw ArgumentError("dataset for " + cur.modality + " has no train rows");
    auto want = static_cast<std::size_t>(std::max<std::int64_t>(
        1, std::llround(kFisherFraction * static_cast<double>(pool.size()))));

    Rng rng(derive_seed(ctx.fisher_seed, "fisher." + stage_tag(ctx.stage)));
    for (std::size_t i = 0; i < want; ++i) {
        auto j = i + static_cast<std::size_t>(rng.uniform_index(pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(want);
    std::sort(pool.begin(), pool.end());

    std::vector<SampleGroup> out;
    for (std::size_t t = 0; t < cur.tasks.size(); ++t) {
        const auto& task = cur.tasks[t];
        auto cols = task.train.inputs.cols();
        std::vector<std::int64_t> rows;
        for (const auto& [ti, r] : pool)
            if (ti == t) rows.push_back(r);
        if (rows.empty()) continue;
        SampleGroup g;
        g.modality = cur.modality;
        g.task = task.task;
        g.inputs = Tensor({static_cast<std::int64_t>(rows.size()), cols});
        for (std::size_t r = 0; r < rows.size(); ++r) {
            std::copy(task.train.inputs.data.begin() +
                          static_cast<std::ptrdiff_t>(rows[r] * cols),
                      task.train.inputs.data.begin() +
                          static_cast<std::ptrdiff_t>((rows[r] + 1) * cols),
                      g.inputs.data.begin() + static_cast<std::ptrdiff_t>(r) * cols);
            g.labels.push_back(task.train.labels[static_cast<std::size_t>(rows[r])]);
        }
        out.push_back(std::move(g));
    }
    return out;
}

void check_history(const std::vector<const ModalityDataset*>& history, const StageContext& ctx) {
    if (static_cast<int>(history.size()) != ctx.stage)
        throw ArgumentError("history holds " + std::to_string(history.size()) +
                            " datasets for stage " + std::to_string(ctx.stage));
    for (std::size_t i = 0; i < history.size(); ++i) {
        if (!history[i]) throw ArgumentError("history entry " + std::to_string(i) + " is null");
        if (history[i]->modality != ctx.order[i])
            throw ArgumentError("history entry " + std::to_string(i) + " is " +
                                history[i]->modality + ", order says " + ctx.order[i]);
    }
}

} // namespace

MultimodalModel run_method_stage(const MultimodalModel& prev,
                                 const std::vector<const ModalityDataset*>& history,
                                 const StageContext& ctx, FisherState* fisher,
                                 StageArtifacts* artifacts) {
    const std::string& mod = ctx.current();
    check_history(history, ctx);
    const ModalityDataset& cur = *history.back();
    if (has_modality(prev, mod))
        throw ArgumentError("modality " + mod + " is already on the model before its stage");

    MultimodalModel reg = prev;
    register_modality(reg, mod, cur.input_dim, derive_seed(ctx.init_seed, "register." + mod));

    MultimodalModel out;
    if (ctx.method == "ft") {
        out = stage_train(reg, cur, ctx, StageVariant{});
    } else if (ctx.method == "replay") {
        StageVariant var;
        std::vector<SampleGroup> extra;
        if (ctx.stage > 1) {
            extra = replay_groups(stage_replay(history, ctx, false));
            var.extra_phase2 = &extra;
        }
        out = stage_train(reg, cur, ctx, var);
    } else if (ctx.method == "ewc") {
        if (!fisher) throw ArgumentError("ewc needs a fisher state to carry across stages");
        StageVariant var;
        var.ewc = fisher;
        var.lambda = ctx.lambda;
        out = stage_train(reg, cur, ctx, var);
        // snapshot before any composed realign so the composition law holds
        fisher->snaps.push_back(fisher_estimate(out, fisher_subset(cur, ctx), ctx.stage));
    } else if (ctx.method == "eproj") {
        StageVariant var;
        var.freeze_shared_phase2 = true;
        out = stage_train(reg, cur, ctx, var);
    } else if (ctx.method == "mera") {
        auto vanilla = stage_train(reg, cur, ctx, StageVariant{});
        // prev, not reg: the fresh components must look new to the carry rule
        MergeRecord rec;
        auto merged = merge(prev, vanilla, ctx.stage, &rec);
        out = realign(merged, stage_replay(history, ctx, true), ctx);
        if (artifacts) {
            artifacts->has_vanilla = true;
            artifacts->vanilla = std::move(vanilla);
            artifacts->has_merge = true;
            artifacts->merge_rec = std::move(rec);
        }
    } else {
        throw ConfigError("unknown method '" + ctx.method + "'");
    }

    if (ctx.realign_flag) out = realign(out, stage_replay(history, ctx, true), ctx);
    return out;
}

std::vector<MisalignmentEntry> diagnose_misalignment(
    const MultimodalModel& m, const std::vector<FeatureProbe>& learn_probes,
    const std::vector<FeatureProbe>& current_probes,
    const std::vector<const ModalityDataset*>& history, const StageContext& ctx) {
    if (ctx.stage <= 1) return {};
    check_history(history, ctx);

    auto find_probe = [](const std::vector<FeatureProbe>& probes, const std::string& mod)
        -> const FeatureProbe& {
        for (const auto& p : probes)
            if (p.modality == mod) return p;
        throw StateError("no probe recorded for modality " + mod);
    };

    auto realigned = realign(m, stage_replay(history, ctx, true), ctx);

    std::vector<MisalignmentEntry> report;
    for (int j = 0; j + 1 < ctx.stage; ++j) {
        const auto& ds = *history[static_cast<std::size_t>(j)];
        MisalignmentEntry entry;
        entry.modality = ds.modality;
        entry.drift = probe_drift(find_probe(learn_probes, ds.modality),
                                  find_probe(current_probes, ds.modality));
        double before = 0.0, after = 0.0;
        for (const auto& t : ds.tasks) {
            before += eval_loss(m, ds.modality, t.task, t.test);
            after += eval_loss(realigned, ds.modality, t.task, t.test);
        }
        entry.loss_before = before / static_cast<double>(ds.tasks.size());
        entry.loss_after = after / static_cast<double>(ds.tasks.size());
        report.push_back(std::move(entry));
    }
    return report;
}

} // namespace mera
