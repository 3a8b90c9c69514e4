// SPDX-License-Identifier: Apache-2.0

#include "vecmerge/ties.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <fmt/core.h>

#include "vecmerge/parallel.hpp"

namespace vecmerge {

namespace {

// Sum that depends only on the multiset of terms, so permuting the input
// vectors cannot change a merged value or an elected sign.
double canonical_sum(std::span<double> terms) {
    switch (terms.size()) {
        case 0: return 0.0;
        case 1: return terms[0];
        case 2: return terms[0] + terms[1];
        default: break;
    }
    std::sort(terms.begin(), terms.end());
    double s = 0.0;
    for (double t : terms) s += t;
    return s;
}

std::int8_t sign_of(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }

void check_weights(std::span<const double> weights, std::size_t count) {
    if (weights.size() != count) {
        throw MergeError(fmt::format("{} weights given for {} task vectors", weights.size(), count));
    }
    for (double w : weights) {
        if (!std::isfinite(w) || w <= 0.0) throw MergeError(fmt::format("TIES weight {} is not a positive number", w));
    }
}

void check_density(double density) {
    if (!(density > 0.0 && density <= 1.0)) {
        throw MergeError(fmt::format("density {} is outside (0, 1]", density));
    }
}

// Union of tensor names with a consistent shape across vectors.
std::map<std::string, Shape> union_shapes(std::span<const TaskVector> tvs) {
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
    return shapes;
}

std::vector<std::span<const double>> spans_for(std::span<const TaskVector> tvs, const std::string& name) {
    std::vector<std::span<const double>> out;
    for (const auto& tv : tvs) {
        auto it = tv.deltas.find(name);
        out.push_back(it == tv.deltas.end() ? std::span<const double>{} : std::span<const double>(it->second.values));
    }
    return out;
}

double at_or_zero(std::span<const double> v, std::size_t i) { return v.empty() ? 0.0 : v[i]; }

}  // namespace

void TiesConfig::validate(std::size_t vector_count) const {
    if (vector_count == 0) throw MergeError("TIES merge needs at least one task vector");
    check_density(density);
    check_weights(weights, vector_count);
    if (!std::isfinite(lambda)) throw MergeError(fmt::format("TIES lambda {} is not finite", lambda));
}

std::uint64_t kept_count(double density, std::uint64_t numel) {
    check_density(density);
    const double exact = density * static_cast<double>(numel);
    const double nearest = std::round(exact);
    const double k = std::fabs(exact - nearest) <= 1e-9 * std::max(1.0, exact) ? nearest : std::ceil(exact);
    return std::min<std::uint64_t>(numel, static_cast<std::uint64_t>(k));
}

void trim_values(std::span<const double> values, double density, std::span<double> out) {
    const std::uint64_t k = kept_count(density, values.size());
    for (double v : values) {
        if (!std::isfinite(v)) throw MergeError("cannot trim a task vector holding non-finite values");
    }
    if (k == values.size()) {
        std::copy(values.begin(), values.end(), out.begin());
        return;
    }
    std::vector<std::uint64_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    auto larger = [&](std::uint64_t a, std::uint64_t b) {
        const double ma = std::fabs(values[a]);
        const double mb = std::fabs(values[b]);
        return ma > mb || (ma == mb && a < b);
    };
    if (k > 0) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), larger);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::uint64_t i = 0; i < k; ++i) out[order[i]] = values[order[i]];
}

TaskVector trim(const TaskVector& tv, double density) {
    check_density(density);
    TaskVector out;
    out.origin = tv.origin;
    out.extras = tv.extras;
    for (const auto& [name, delta] : tv.deltas) {
        Delta trimmed{delta.shape, std::vector<double>(delta.values.size())};
        trim_values(delta.values, density, trimmed.values);
        out.deltas.emplace(name, std::move(trimmed));
    }
    return out;
}

void elect_tensor_signs(std::span<const std::span<const double>> trimmed, std::span<const double> weights,
                        std::span<std::int8_t> signs) {
    parallel_for(signs.size(), [&](std::size_t begin, std::size_t end) {
        std::vector<double> terms;
        terms.reserve(trimmed.size());
        for (std::size_t p = begin; p < end; ++p) {
            terms.clear();
            for (std::size_t t = 0; t < trimmed.size(); ++t) {
                const double v = at_or_zero(trimmed[t], p);
                if (v != 0.0) terms.push_back(weights[t] * v);
            }
            signs[p] = sign_of(canonical_sum(terms));
        }
    });
}

void disjoint_merge_tensor(std::span<const std::span<const double>> trimmed, std::span<const double> weights,
                           std::span<const std::int8_t> signs, std::span<double> merged) {
    parallel_for(merged.size(), [&](std::size_t begin, std::size_t end) {
        std::vector<double> numerator;
        std::vector<double> denominator;
        for (std::size_t p = begin; p < end; ++p) {
            merged[p] = 0.0;
            if (signs[p] == 0) continue;
            numerator.clear();
            denominator.clear();
            double only = 0.0;
            for (std::size_t t = 0; t < trimmed.size(); ++t) {
                const double v = at_or_zero(trimmed[t], p);
                if (sign_of(v) != signs[p]) continue;
                numerator.push_back(weights[t] * v);
                denominator.push_back(weights[t]);
                only = v;
            }
            if (numerator.size() == 1) {
                merged[p] = only;
            } else if (!numerator.empty()) {
                merged[p] = canonical_sum(numerator) / canonical_sum(denominator);
            }
        }
    });
}

std::vector<double> ties_merge_tensor(std::span<const std::span<const double>> deltas,
                                      std::span<const double> weights, double density, std::uint64_t numel,
                                      TensorInterference* stats) {
    const std::size_t n = deltas.size();
    std::vector<std::vector<double>> trimmed(n);
    std::vector<std::span<const double>> views(n);
    for (std::size_t t = 0; t < n; ++t) {
        if (deltas[t].empty()) continue;
        trimmed[t].resize(numel);
        trim_values(deltas[t], density, trimmed[t]);
        views[t] = trimmed[t];
    }
    std::vector<std::int8_t> signs(numel);
    elect_tensor_signs(views, weights, signs);
    std::vector<double> merged(numel);
    disjoint_merge_tensor(views, weights, signs, merged);

    if (stats != nullptr) {
        stats->numel = numel;
        stats->kept_mass.assign(n, 0.0);
        stats->total_mass.assign(n, 0.0);
        for (std::size_t t = 0; t < n; ++t) {
            for (double v : deltas[t]) stats->total_mass[t] += std::fabs(v);
            for (double v : views[t]) stats->kept_mass[t] += std::fabs(v);
        }
        stats->pairs.clear();
        for (auto [i, j] : interference_pairs(n)) {
            PairAgreement pair{i, j, 0, 0};
            if (!views[i].empty() && !views[j].empty()) {
                for (std::uint64_t p = 0; p < numel; ++p) {
                    const auto si = sign_of(views[i][p]);
                    const auto sj = sign_of(views[j][p]);
                    if (si == 0 || sj == 0) continue;
                    ++pair.joint;
                    if (si == sj) ++pair.agree;
                }
            }
            stats->pairs.push_back(pair);
        }
        stats->zero_sign_count = static_cast<std::uint64_t>(std::count(signs.begin(), signs.end(), 0));
    }
    return merged;
}

SignMap elect_signs(std::span<const TaskVector> trimmed, std::span<const double> weights) {
    check_weights(weights, trimmed.size());
    SignMap out;
    for (const auto& [name, shape] : union_shapes(trimmed)) {
        const auto views = spans_for(trimmed, name);
        SignArray signs{shape, std::vector<std::int8_t>(shape_numel(shape))};
        elect_tensor_signs(views, weights, signs.signs);
        out.emplace(name, std::move(signs));
    }
    return out;
}

TaskVector disjoint_merge(std::span<const TaskVector> trimmed, std::span<const double> weights, const SignMap& signs) {
    check_weights(weights, trimmed.size());
    const auto shapes = union_shapes(trimmed);
    TaskVector out;
    out.origin = "ties";
    for (const auto& [name, sign_array] : signs) {
        if (auto it = shapes.find(name); it != shapes.end() && it->second != sign_array.shape) {
            throw MergeError(fmt::format("sign map for '{}' has shape {} but the vectors have {}", name,
                                         format_shape(sign_array.shape), format_shape(it->second)));
        }
        const auto views = spans_for(trimmed, name);
        Delta merged{sign_array.shape, std::vector<double>(sign_array.signs.size())};
        disjoint_merge_tensor(views, weights, sign_array.signs, merged.values);
        out.deltas.emplace(name, std::move(merged));
    }
    for (const auto& tv : trimmed) merge_extras(out.extras, tv.extras);
    return out;
}

TiesResult ties_merge(const Checkpoint& base, std::span<const TaskVector> tvs, const TiesConfig& config) {
    config.validate(tvs.size());
    const auto shapes = union_shapes(tvs);
    std::map<std::string, Tensor> extras;
    for (const auto& tv : tvs) merge_extras(extras, tv.extras);
    for (const auto& [name, shape] : shapes) {
        auto it = base.tensors.find(name);
        if (it == base.tensors.end()) {
            throw MergeError(fmt::format("task vector tensor '{}' is missing from the base", name));
        }
        if (it->second.shape() != shape) {
            throw MergeError(fmt::format("task vector tensor '{}' has shape {} but the base has {}", name,
                                         format_shape(shape), format_shape(it->second.shape())));
        }
    }

    TiesResult result;
    result.report.vector_count = tvs.size();
    result.report.density = config.density;
    result.merged.metadata = base.metadata;
    for (const auto& [name, tensor] : base.tensors) {
        if (!shapes.count(name)) {
            result.merged.tensors.emplace(name, tensor);
            continue;
        }
        TensorInterference stats;
        stats.name = name;
        auto acc = ties_merge_tensor(spans_for(tvs, name), config.weights, config.density, tensor.numel(), &stats);
        for (auto& v : acc) v *= config.lambda;
        std::vector<std::byte> bytes(tensor.bytes().size());
        add_into(tensor.dtype(), tensor.bytes(), acc, tensor.dtype(), bytes);
        result.merged.tensors.emplace(name, Tensor(tensor.dtype(), tensor.shape(), std::move(bytes)));
        result.report.tensors.push_back(std::move(stats));
    }
    for (auto& [name, tensor] : extras) result.merged.tensors.insert_or_assign(name, std::move(tensor));
    return result;
}

}  // namespace vecmerge
