// SPDX-License-Identifier: Apache-2.0
//
// TIES merging: trim each task vector to its largest-magnitude entries,
// elect a per-parameter sign from the weighted sum, and average only the
// entries that agree with the elected sign.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vecmerge/merge_report.hpp"
#include "vecmerge/tv_algebra.hpp"

namespace vecmerge {

inline constexpr double kDefaultDensity = 0.2;
inline constexpr double kDefaultTiesLambda = 1.0;

struct TiesConfig {
    double density = kDefaultDensity;
    std::vector<double> weights;  // one positive weight per vector
    double lambda = kDefaultTiesLambda;

    /// Throws MergeError unless density is in (0, 1], weights are finite and
    /// positive, their count equals `vector_count`, and lambda is finite.
    void validate(std::size_t vector_count) const;
};

struct SignArray {
    Shape shape;
    std::vector<std::int8_t> signs;

    friend bool operator==(const SignArray&, const SignArray&) = default;
};

using SignMap = std::map<std::string, SignArray>;

/// Entries kept per tensor: ceil(density * numel), with products within
/// 1e-9 of an integer treated as that integer.
std::uint64_t kept_count(double density, std::uint64_t numel);

/// Keeps the kept_count largest |values|; equal magnitudes at the cut go to
/// the smaller index. Other entries become zero.
void trim_values(std::span<const double> values, double density, std::span<double> out);

TaskVector trim(const TaskVector& tv, double density);

/// gamma_p = sign(sum_t w_t * trimmed_t[p]) with sign(0) = 0.
SignMap elect_signs(std::span<const TaskVector> trimmed, std::span<const double> weights);

/// Weighted mean over the vectors whose entry has the elected sign; zero
/// where the elected sign is zero.
TaskVector disjoint_merge(std::span<const TaskVector> trimmed, std::span<const double> weights,
                          const SignMap& signs);

struct TiesResult {
    Checkpoint merged;
    InterferenceReport report;
};

TiesResult ties_merge(const Checkpoint& base, std::span<const TaskVector> tvs, const TiesConfig& config);

// Per-tensor kernels. `deltas[t]` is vector t's full tensor, or empty when
// the vector does not carry this tensor.

void elect_tensor_signs(std::span<const std::span<const double>> trimmed, std::span<const double> weights,
                        std::span<std::int8_t> signs);

void disjoint_merge_tensor(std::span<const std::span<const double>> trimmed, std::span<const double> weights,
                           std::span<const std::int8_t> signs, std::span<double> merged);

/// Trim + elect + disjoint merge for one tensor of `numel` elements. Fills
/// `stats` (kept mass, pair agreement, zero-sign count) when non-null.
std::vector<double> ties_merge_tensor(std::span<const std::span<const double>> deltas,
                                      std::span<const double> weights, double density, std::uint64_t numel,
                                      TensorInterference* stats);

}  // namespace vecmerge
