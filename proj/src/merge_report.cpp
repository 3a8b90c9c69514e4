// SPDX-License-Identifier: Apache-2.0

#include "vecmerge/merge_report.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

#include "vecmerge/ties.hpp"

namespace vecmerge {

using nlohmann::json;

namespace {

json pair_json(const PairAgreement& p) {
    auto f = p.fraction();
    return {{"first", p.first},
            {"second", p.second},
            {"joint", p.joint},
            {"agree", p.agree},
            {"agreement", f ? json(*f) : json(nullptr)}};
}

}  // namespace

json DiffReport::to_json() const {
    json j;
    j["numel"] = numel;
    j["l2"] = l2;
    j["max_abs"] = max_abs;
    j["equal_fraction"] = equal_fraction;
    j["only_in_a"] = only_in_a;
    j["only_in_b"] = only_in_b;
    j["shape_mismatch"] = shape_mismatch;
    j["tensors"] = json::array();
    for (const auto& t : tensors) {
        j["tensors"].push_back({{"name", t.name},
                                {"numel", t.numel},
                                {"l2", t.l2},
                                {"max_abs", t.max_abs},
                                {"equal_fraction", t.equal_fraction}});
    }
    return j;
}

DiffReport diff_stats(const Checkpoint& a, const Checkpoint& b) {
    DiffReport report;
    double sum_sq = 0.0;
    std::uint64_t equal = 0;
    for (const auto& [name, ta] : a.tensors) {
        auto it = b.tensors.find(name);
        if (it == b.tensors.end()) {
            report.only_in_a.push_back(name);
            continue;
        }
        if (it->second.shape() != ta.shape()) {
            report.shape_mismatch.push_back(name);
            continue;
        }
        const auto va = ta.to_f64();
        const auto vb = it->second.to_f64();
        TensorDiff d;
        d.name = name;
        d.numel = va.size();
        double tensor_sq = 0.0;
        std::uint64_t tensor_equal = 0;
        for (std::size_t i = 0; i < va.size(); ++i) {
            const double delta = vb[i] - va[i];
            tensor_sq += delta * delta;
            d.max_abs = std::max(d.max_abs, std::fabs(delta));
            if (va[i] == vb[i]) ++tensor_equal;
        }
        d.l2 = std::sqrt(tensor_sq);
        d.equal_fraction = d.numel == 0 ? 1.0 : static_cast<double>(tensor_equal) / static_cast<double>(d.numel);
        sum_sq += tensor_sq;
        equal += tensor_equal;
        report.numel += d.numel;
        report.max_abs = std::max(report.max_abs, d.max_abs);
        report.tensors.push_back(std::move(d));
    }
    for (const auto& [name, tb] : b.tensors) {
        if (!a.tensors.count(name)) report.only_in_b.push_back(name);
    }
    if (report.tensors.empty()) throw MergeError("no shared tensors");
    report.l2 = std::sqrt(sum_sq);
    report.equal_fraction =
        report.numel == 0 ? 1.0 : static_cast<double>(equal) / static_cast<double>(report.numel);
    return report;
}

std::optional<double> PairAgreement::fraction() const {
    if (joint == 0) return std::nullopt;
    return static_cast<double>(agree) / static_cast<double>(joint);
}

double TensorInterference::trimmed_mass_fraction(std::size_t t) const {
    return total_mass[t] == 0.0 ? 1.0 : kept_mass[t] / total_mass[t];
}

std::vector<double> InterferenceReport::trimmed_mass_fraction() const {
    std::vector<double> kept(vector_count, 0.0), total(vector_count, 0.0);
    for (const auto& t : tensors) {
        for (std::size_t v = 0; v < vector_count; ++v) {
            kept[v] += t.kept_mass[v];
            total[v] += t.total_mass[v];
        }
    }
    std::vector<double> out(vector_count);
    for (std::size_t v = 0; v < vector_count; ++v) out[v] = total[v] == 0.0 ? 1.0 : kept[v] / total[v];
    return out;
}

std::vector<PairAgreement> InterferenceReport::pairs() const {
    std::vector<PairAgreement> out;
    for (auto [i, j] : interference_pairs(vector_count)) out.push_back({i, j, 0, 0});
    for (const auto& t : tensors) {
        for (std::size_t k = 0; k < out.size() && k < t.pairs.size(); ++k) {
            out[k].joint += t.pairs[k].joint;
            out[k].agree += t.pairs[k].agree;
        }
    }
    return out;
}

std::uint64_t InterferenceReport::zero_sign_count() const {
    std::uint64_t n = 0;
    for (const auto& t : tensors) n += t.zero_sign_count;
    return n;
}

std::uint64_t InterferenceReport::numel() const {
    std::uint64_t n = 0;
    for (const auto& t : tensors) n += t.numel;
    return n;
}

json InterferenceReport::to_json() const {
    json j;
    j["vector_count"] = vector_count;
    j["density"] = density;
    j["numel"] = numel();
    j["zero_sign_count"] = zero_sign_count();
    j["trimmed_mass_fraction"] = trimmed_mass_fraction();
    j["pairs"] = json::array();
    for (const auto& p : pairs()) j["pairs"].push_back(pair_json(p));
    j["tensors"] = json::array();
    for (const auto& t : tensors) {
        json tj;
        tj["name"] = t.name;
        tj["numel"] = t.numel;
        tj["zero_sign_count"] = t.zero_sign_count;
        tj["trimmed_mass_fraction"] = json::array();
        for (std::size_t v = 0; v < t.kept_mass.size(); ++v) tj["trimmed_mass_fraction"].push_back(t.trimmed_mass_fraction(v));
        tj["pairs"] = json::array();
        for (const auto& p : t.pairs) tj["pairs"].push_back(pair_json(p));
        j["tensors"].push_back(std::move(tj));
    }
    return j;
}

std::vector<std::pair<std::size_t, std::size_t>> interference_pairs(std::size_t vector_count) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (vector_count <= 8) {
        for (std::size_t i = 0; i < vector_count; ++i) {
            for (std::size_t j = i + 1; j < vector_count; ++j) out.emplace_back(i, j);
        }
    } else {
        for (std::size_t i = 0; i + 1 < vector_count; ++i) out.emplace_back(i, i + 1);
    }
    return out;
}

InterferenceReport interference_stats(std::span<const TaskVector> tvs, double density,
                                      std::span<const double> weights) {
    std::vector<double> ones(tvs.size(), 1.0);
    if (weights.empty()) weights = ones;
    TiesConfig config{density, std::vector<double>(weights.begin(), weights.end()), 1.0};
    config.validate(tvs.size());

    std::map<std::string, Shape> shapes;
    for (const auto& tv : tvs) {
        for (const auto& [name, delta] : tv.deltas) {
            auto [it, inserted] = shapes.try_emplace(name, delta.shape);
            if (!inserted && it->second != delta.shape) {
                throw MergeError(fmt::format("tensor '{}' has shape {} in one vector and {} in another", name,
                                             format_shape(it->second), format_shape(delta.shape)));
            }
        }
    }

    InterferenceReport report;
    report.vector_count = tvs.size();
    report.density = density;
    for (const auto& [name, shape] : shapes) {
        std::vector<std::span<const double>> views;
        for (const auto& tv : tvs) {
            auto it = tv.deltas.find(name);
            views.push_back(it == tv.deltas.end() ? std::span<const double>{}
                                                  : std::span<const double>(it->second.values));
        }
        TensorInterference stats;
        stats.name = name;
        ties_merge_tensor(views, config.weights, density, shape_numel(shape), &stats);
        report.tensors.push_back(std::move(stats));
    }
    return report;
}

double cosine(const TaskVector& a, const TaskVector& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    bool shared = false;
    for (const auto& [name, da] : a.deltas) {
        auto it = b.deltas.find(name);
        if (it == b.deltas.end()) continue;
        if (it->second.shape != da.shape) {
            throw MergeError(fmt::format("tensor '{}' has shape {} in one vector and {} in the other", name,
                                         format_shape(da.shape), format_shape(it->second.shape)));
        }
        shared = true;
        const auto& va = da.values;
        const auto& vb = it->second.values;
        for (std::size_t i = 0; i < va.size(); ++i) {
            dot += va[i] * vb[i];
            na += va[i] * va[i];
            nb += vb[i] * vb[i];
        }
    }
    if (!shared) throw MergeError("no shared tensors");
    if (na == 0.0 || nb == 0.0) throw MergeError("undefined cosine: a task vector is zero on the shared tensors");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

}  // namespace vecmerge
