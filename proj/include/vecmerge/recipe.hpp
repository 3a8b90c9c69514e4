// SPDX-License-Identifier: Apache-2.0
//
// Declarative merge recipes (JSON), sweep expansion over weight grids and
// metric-driven selection of the best assignment.
//
// Recipe schema:
//   {
//     "base":        "path",                      required
//     "method":      "tv" | "ties",               required
//     "vectors":     [ {"source": "path",         task-vector archive or fine-tuned checkpoint
//                       "weight": 0.5 | {"grid": [0.1, 0.2]} | {"grid": "default"}} ],
//     "density":     0.2,                         ties only, default 0.2
//     "lambda":      1.0 | {"grid": ...},         ties only, default 1.0
//     "mismatch":    "error" | "ignore" | "copy", default "error"
//     "dtype":       "keep" | "F64" | "F32" | "F16" | "BF16", default "keep"
//     "output":      "path",                      required
//     "description": "free text"                  optional
//   }
// Unknown keys are rejected. A vector weight defaults to 1.0.

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "vecmerge/dtype.hpp"
#include "vecmerge/tv_algebra.hpp"

namespace vecmerge {

/// Schema or validation failure; `pointer()` is a JSON pointer (or CSV line) locating it.
class RecipeError : public std::runtime_error {
public:
    RecipeError(std::string pointer, const std::string& message);
    const std::string& pointer() const { return pointer_; }

private:
    std::string pointer_;
};

enum class MergeMethod { tv, ties };

/// A scalar weight or a sweep grid.
struct WeightSpec {
    double value = 1.0;
    std::vector<double> grid;

    bool is_grid() const { return !grid.empty(); }
    friend bool operator==(const WeightSpec&, const WeightSpec&) = default;
};

struct VectorEntry {
    std::string source;
    WeightSpec weight;

    friend bool operator==(const VectorEntry&, const VectorEntry&) = default;
};

struct MergeRecipe {
    std::string base;
    MergeMethod method = MergeMethod::tv;
    std::vector<VectorEntry> vectors;
    double density = 0.2;
    WeightSpec lambda;
    MismatchPolicy mismatch = MismatchPolicy::error;
    std::optional<DType> dtype;  // nullopt keeps each tensor's dtype
    std::string output;
    std::string description;

    bool has_grid() const;
    friend bool operator==(const MergeRecipe&, const MergeRecipe&) = default;
};

/// {0.1, 0.2, ..., 1.0}
std::vector<double> default_lambda_grid();

MergeRecipe parse_recipe(std::string_view text);
MergeRecipe recipe_from_json(const nlohmann::json& document);
nlohmann::json recipe_to_json(const MergeRecipe& recipe);

/// Joins relative base/source/output paths onto `dir`.
MergeRecipe resolve_paths(MergeRecipe recipe, const std::filesystem::path& dir);

/// Sweep parameter name to value, e.g. {"w0": 0.3, "lambda": 1.0}.
using Assignment = std::map<std::string, double>;

std::string format_assignment(const Assignment& assignment);

struct ExpandedRecipe {
    MergeRecipe recipe;
    Assignment assignment;
};

inline constexpr std::size_t kDefaultSweepCap = 1000;

/// Cartesian product over every grid slot (vector weights `w<i>` in order,
/// then the TIES `lambda`), first slot varying slowest. Outputs gain a
/// `_<name>=<value>` suffix per grid slot before the extension.
std::vector<ExpandedRecipe> expand_sweep(const MergeRecipe& recipe, std::size_t cap = kDefaultSweepCap);

struct MergeOutcome {
    std::filesystem::path output;
    std::size_t tensor_count = 0;
    double wall_seconds = 0.0;
    nlohmann::json report;
};

/// Streams the merge tensor by tensor (chunked for vector addition) into a
/// temporary file that is renamed over `recipe.output` on success. The
/// resolved recipe is embedded as metadata under `vecmerge.recipe`.
MergeOutcome execute_recipe(const MergeRecipe& recipe);

struct MetricsRow {
    Assignment assignment;
    double metric = 0.0;
};

using MetricsTable = std::vector<MetricsRow>;

/// CSV with header `assignment,metric`; assignments are `k=v;k=v`.
MetricsTable parse_metrics_csv(std::string_view text);

/// Highest metric; ties go to the lexicographically smallest assignment
/// (values compared in parameter-name order).
Assignment select_best(const MetricsTable& table);

}  // namespace vecmerge
