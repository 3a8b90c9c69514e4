// SPDX-License-Identifier: Apache-2.0
//
// Merge diagnostics: checkpoint diffs, task-vector geometry and the sign
// interference statistics that TIES merging acts on.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vecmerge/tensor_store.hpp"
#include "vecmerge/tv_algebra.hpp"

namespace vecmerge {

struct TensorDiff {
    std::string name;
    std::uint64_t numel = 0;
    double l2 = 0.0;
    double max_abs = 0.0;
    double equal_fraction = 1.0;
};

struct DiffReport {
    std::vector<TensorDiff> tensors;
    std::uint64_t numel = 0;
    double l2 = 0.0;
    double max_abs = 0.0;
    double equal_fraction = 1.0;
    std::vector<std::string> only_in_a;
    std::vector<std::string> only_in_b;
    std::vector<std::string> shape_mismatch;

    nlohmann::json to_json() const;
};

/// Statistics of `b - a` over tensors both checkpoints hold with equal shape.
DiffReport diff_stats(const Checkpoint& a, const Checkpoint& b);

/// Sign agreement between two trimmed vectors over the positions where both
/// kept a nonzero entry.
struct PairAgreement {
    std::size_t first = 0;
    std::size_t second = 0;
    std::uint64_t joint = 0;
    std::uint64_t agree = 0;

    /// Undefined (nullopt) when the vectors share no kept position.
    std::optional<double> fraction() const;
};

struct TensorInterference {
    std::string name;
    std::uint64_t numel = 0;
    std::vector<double> kept_mass;   // per vector: sum |kept|
    std::vector<double> total_mass;  // per vector: sum |all|
    std::vector<PairAgreement> pairs;
    std::uint64_t zero_sign_count = 0;

    /// sum|kept| / sum|all| for vector t; an all-zero tensor loses nothing and reports 1.
    double trimmed_mass_fraction(std::size_t t) const;
};

struct InterferenceReport {
    std::size_t vector_count = 0;
    double density = 1.0;
    std::vector<TensorInterference> tensors;

    /// Aggregates over all tensors.
    std::vector<double> trimmed_mass_fraction() const;
    std::vector<PairAgreement> pairs() const;
    std::uint64_t zero_sign_count() const;
    std::uint64_t numel() const;

    nlohmann::json to_json() const;
};

/// Vector pairs compared by interference statistics: all pairs up to 8
/// vectors, adjacent pairs beyond that.
std::vector<std::pair<std::size_t, std::size_t>> interference_pairs(std::size_t vector_count);

/// Trims each vector to `density` and reports kept mass, pairwise sign
/// agreement and elected-zero counts. `weights` defaults to all ones.
InterferenceReport interference_stats(std::span<const TaskVector> tvs, double density,
                                      std::span<const double> weights = {});

/// Cosine similarity of the flattened deltas over shared tensor names.
double cosine(const TaskVector& a, const TaskVector& b);

}  // namespace vecmerge
