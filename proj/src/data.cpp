#include "mera/data.hpp"

#include <algorithm>
#include <cmath>

#include "mera/error.hpp"
#include "mera/rng.hpp"

namespace mera {

namespace {

// largest remainder apportionment of `total` by weights, |alloc - quota| < 1
std::vector<std::int64_t> apportion(std::int64_t total, const std::vector<std::int64_t>& weights) {
    std::int64_t wsum = 0;
    for (std::int64_t w : weights) wsum += w;
    std::vector<std::int64_t> alloc(weights.size(), 0);
    if (wsum == 0 || total == 0) return alloc;
    std::vector<std::pair<double, std::size_t>> rema;
    std::int64_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        double quota = static_cast<double>(total) * static_cast<double>(weights[i]) / static_cast<double>(wsum);
        alloc[i] = static_cast<std::int64_t>(std::floor(quota));
        assigned += alloc[i];
        rema.push_back({quota - std::floor(quota), i});
    }
    std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t k = 0; assigned < total; ++k, ++assigned)
        alloc[rema[k % rema.size()].second] += 1;
    return alloc;
}

SplitData make_split(const ModalitySpec& spec, const DataShape& shape, const Tensor& rule,
                     std::int64_t n, const std::string& task, const char* split,
                     std::uint64_t global_task_seed) {
    // latents and labels are shared across modalities by construction
    Rng zrng(derive_seed(global_task_seed, "latent." + task + "." + split));
    Tensor z = normal_tensor({n, shape.latent_dim}, 1.0, zrng);
    Tensor scores = matmul(z, rule);

    SplitData out;
    out.labels.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out.labels.push_back(argmax_row(scores, i));

    Rng arng(derive_seed(spec.render_seed, "render"));
    double ascale = 1.0 / std::sqrt(static_cast<double>(shape.latent_dim));
    Tensor a({shape.latent_dim, spec.input_dim});
    for (float& f : a.data) f = static_cast<float>(arng.normal() * ascale);

    out.inputs = tanh_map(matmul(z, a));
    if (spec.noise_sigma > 0.0) {
        Rng nrng(derive_seed(spec.render_seed, "noise." + task + "." + split));
        for (float& f : out.inputs.data)
            f = static_cast<float>(static_cast<double>(f) + nrng.normal() * spec.noise_sigma);
    }
    return out;
}

} // namespace

std::int64_t ModalityDataset::train_total() const {
    std::int64_t n = 0;
    for (const auto& t : tasks) n += t.train.inputs.shape[0];
    return n;
}

const TaskData& ModalityDataset::task(const std::string& name) const {
    for (const auto& t : tasks)
        if (t.task == name) return t;
    throw ArgumentError("dataset has no task " + name);
}

ModalityDataset generate_modality(const ModalitySpec& spec, const DataShape& shape,
                                  const std::vector<std::string>& tasks,
                                  std::uint64_t global_task_seed) {
    if (spec.input_dim <= 0) throw ArgumentError("modality input_dim must be positive");
    if (shape.latent_dim <= 0 || shape.classes <= 0) throw ArgumentError("bad data shape");
    if (shape.classes > shape.latent_dim)
        throw ArgumentError("task rules need latent_dim >= classes");
    if (shape.train_per_task <= 0 || shape.test_per_task <= 0) throw ArgumentError("split sizes must be positive");
    if (spec.noise_sigma < 0.0) throw ArgumentError("noise_sigma must be non-negative");
    if (tasks.empty()) throw ArgumentError("no tasks to generate");

    ModalityDataset out;
    out.modality = spec.id;
    out.input_dim = spec.input_dim;
    for (const auto& task : tasks) {
        // orthonormal class directions make the scores i.i.d. standard
        // normal, so the label prior is uniform for every rule draw; raw or
        // merely normalized gaussian columns skew it by up to a third
        Rng wrng(derive_seed(global_task_seed, "rule." + task));
        Tensor rule = normal_tensor({shape.latent_dim, shape.classes}, 1.0, wrng);
        std::vector<std::vector<double>> cols(static_cast<std::size_t>(shape.classes));
        for (std::int64_t j = 0; j < shape.classes; ++j) {
            std::vector<double>& c = cols[static_cast<std::size_t>(j)];
            c.resize(static_cast<std::size_t>(shape.latent_dim));
            for (std::int64_t i = 0; i < shape.latent_dim; ++i) c[static_cast<std::size_t>(i)] = rule.at(i, j);
            for (std::int64_t k = 0; k < j; ++k) {
                const std::vector<double>& prev = cols[static_cast<std::size_t>(k)];
                double dot = 0.0;
                for (std::int64_t i = 0; i < shape.latent_dim; ++i) dot += c[static_cast<std::size_t>(i)] * prev[static_cast<std::size_t>(i)];
                for (std::int64_t i = 0; i < shape.latent_dim; ++i) c[static_cast<std::size_t>(i)] -= dot * prev[static_cast<std::size_t>(i)];
            }
            double norm = 0.0;
            for (double v : c) norm += v * v;
            norm = std::sqrt(norm);
            if (norm < 1e-9) throw NumericError("degenerate task rule draw");
            for (std::int64_t i = 0; i < shape.latent_dim; ++i) {
                c[static_cast<std::size_t>(i)] /= norm;
                rule.at(i, j) = static_cast<float>(c[static_cast<std::size_t>(i)]);
            }
        }
        TaskData td;
        td.task = task;
        td.train = make_split(spec, shape, rule, shape.train_per_task, task, "train", global_task_seed);
        td.test = make_split(spec, shape, rule, shape.test_per_task, task, "test", global_task_seed);
        out.tasks.push_back(std::move(td));
    }
    return out;
}

std::int64_t ReplaySet::count_for(const std::string& modality) const {
    std::int64_t n = 0;
    for (const auto& it : items)
        if (it.modality == modality) ++n;
    return n;
}

std::int64_t ReplaySet::count_for(const std::string& modality, const std::string& task) const {
    std::int64_t n = 0;
    for (const auto& it : items)
        if (it.modality == modality && it.task == task) ++n;
    return n;
}

ReplaySet sample_replay(const std::vector<const ModalityDataset*>& learned, double fraction,
                        std::uint64_t seed, bool include_current) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw ArgumentError("replay fraction must be in (0, 1]");
    std::vector<const ModalityDataset*> sources = learned;
    if (!include_current && !sources.empty()) sources.pop_back();

    ReplaySet out;
    out.fraction = fraction;
    if (sources.empty()) return out;

    std::vector<std::int64_t> totals;
    std::int64_t grand = 0;
    for (const auto* d : sources) {
        totals.push_back(d->train_total());
        grand += totals.back();
    }
    if (grand == 0) return out;

    std::int64_t budget = static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(grand)));
    std::vector<std::int64_t> per_modality = apportion(budget, totals);
    for (std::size_t j = 0; j < per_modality.size(); ++j)
        if (per_modality[j] == 0 && totals[j] > 0) per_modality[j] = 1;

    for (std::size_t j = 0; j < sources.size(); ++j) {
        const ModalityDataset& d = *sources[j];
        std::vector<std::int64_t> task_sizes;
        for (const auto& t : d.tasks) task_sizes.push_back(t.train.inputs.shape[0]);
        std::vector<std::int64_t> per_task = apportion(per_modality[j], task_sizes);
        for (std::size_t t = 0; t < d.tasks.size(); ++t) {
            std::int64_t take = per_task[t];
            if (take == 0) continue;
            const TaskData& td = d.tasks[t];
            std::int64_t n = td.train.inputs.shape[0];
            // partial Fisher-Yates, first `take` entries are the draw
            std::vector<std::int64_t> rows(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
            Rng rng(derive_seed(seed, "pick." + d.modality + "." + td.task));
            for (std::int64_t i = 0; i < take; ++i) {
                std::int64_t k = i + static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(n - i)));
                std::swap(rows[static_cast<std::size_t>(i)], rows[static_cast<std::size_t>(k)]);
            }
            rows.resize(static_cast<std::size_t>(take));
            std::sort(rows.begin(), rows.end());
            for (std::int64_t row : rows) {
                ReplayItem item;
                item.modality = d.modality;
                item.task = td.task;
                item.row = row;
                const float* src = td.train.inputs.data.data() + row * d.input_dim;
                item.input.assign(src, src + d.input_dim);
                item.label = td.train.labels[static_cast<std::size_t>(row)];
                out.items.push_back(std::move(item));
            }
        }
    }
    return out;
}

ReplaySet corrupt_mispair(const ReplaySet& replay, double p, std::uint64_t seed) {
    if (p < 0.0 || p > 1.0) throw ArgumentError("mispair fraction must be in [0, 1]");
    ReplaySet out = replay;
    std::int64_t n = static_cast<std::int64_t>(out.items.size());
    std::int64_t corrupt = static_cast<std::int64_t>(std::floor(p * static_cast<double>(n)));
    if (corrupt == 0) return out;

    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng which(derive_seed(seed, "which"));
    for (std::int64_t i = 0; i < corrupt; ++i) {
        std::int64_t k = i + static_cast<std::int64_t>(which.uniform_index(static_cast<std::uint64_t>(n - i)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(k)]);
    }
    order.resize(static_cast<std::size_t>(corrupt));
    std::sort(order.begin(), order.end());

    // donors hand out their labels as they were before any corruption
    std::vector<int> original;
    original.reserve(out.items.size());
    for (const auto& it : out.items) original.push_back(it.label);

    Rng donor_rng(derive_seed(seed, "donor"));
    for (std::int64_t idx : order) {
        ReplayItem& item = out.items[static_cast<std::size_t>(idx)];
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < out.items.size(); ++i)
            if (static_cast<std::int64_t>(i) != idx && out.items[i].task == item.task)
                pool.push_back(i);
        if (pool.empty()) continue;
        std::size_t pick = static_cast<std::size_t>(donor_rng.uniform_index(pool.size()));
        item.label = original[pool[pick]];
    }
    return out;
}

} // namespace mera
