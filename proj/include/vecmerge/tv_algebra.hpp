// SPDX-License-Identifier: Apache-2.0
//
// Task vectors: per-tensor deltas between a fine-tuned checkpoint and its
// base, and the scaled-addition merge `base + sum_i lambda_i * tau_i`.
// All arithmetic is binary64; results are cast to the base tensor's dtype once.

#pragma once

#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vecmerge/tensor_store.hpp"

namespace vecmerge {

inline constexpr std::string_view kKindKey = "vecmerge.kind";
inline constexpr std::string_view kTaskVectorKind = "task_vector";
inline constexpr std::string_view kExtrasKey = "vecmerge.extras";
inline constexpr std::string_view kOriginKey = "vecmerge.origin";

/// Invalid merge inputs: missing tensors, shape conflicts, bad weights.
class MergeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Delta {
    Shape shape;
    std::vector<double> values;

    friend bool operator==(const Delta&, const Delta&) = default;
};

struct TaskVector {
    std::map<std::string, Delta> deltas;
    /// Fine-tuned-only tensors (e.g. task heads) re-attached verbatim on apply.
    std::map<std::string, Tensor> extras;
    std::string origin;

    friend bool operator==(const TaskVector&, const TaskVector&) = default;
};

/// What to do with tensors that are not shared with equal shape by base and fine-tuned.
enum class MismatchPolicy { error, ignore, copy_from_finetuned };

MismatchPolicy parse_mismatch_policy(std::string_view text);
std::string_view mismatch_policy_name(MismatchPolicy policy);

/// Name-level pairing of two checkpoints.
struct ExtractionPlan {
    std::vector<std::string> shared;      // same name and shape
    std::vector<std::string> mismatched;  // only in fine-tuned, or shape differs
    std::vector<std::string> base_only;
};

ExtractionPlan plan_extraction(const std::map<std::string, Shape>& base,
                               const std::map<std::string, Shape>& finetuned);

/// Applies `policy` to a plan: throws for `error` with mismatches or for an empty intersection.
void check_extraction_plan(const ExtractionPlan& plan, MismatchPolicy policy);

struct Extraction {
    TaskVector vector;
    std::vector<std::string> ignored;
};

Extraction extract_task_vector(const Checkpoint& base, const Checkpoint& finetuned,
                               MismatchPolicy policy = MismatchPolicy::error);

TaskVector scale(const TaskVector& tv, double lambda);

/// Element-wise sum over the union of names, accumulated in list order.
TaskVector add_vectors(std::span<const TaskVector> tvs);

Checkpoint apply(const Checkpoint& base, const TaskVector& tv);

struct WeightedVector {
    std::reference_wrapper<const TaskVector> vector;
    double weight;
};

/// `apply(base, add_vectors([scale(tv_i, w_i)]))` with one accumulation and one cast.
Checkpoint tv_merge(const Checkpoint& base, std::span<const WeightedVector> weighted);

/// Stores deltas as tensors of `storage` dtype, tagged as a task vector.
Checkpoint to_checkpoint(const TaskVector& tv, DType storage = DType::F64);
TaskVector task_vector_from_checkpoint(const Checkpoint& checkpoint);
bool is_task_vector(const std::map<std::string, std::string>& metadata);
std::vector<std::string> extras_names(const std::map<std::string, std::string>& metadata);

// Element kernels shared by the in-memory and streaming merge paths.

/// acc[i] += weight * delta[i]
void accumulate_scaled(std::span<double> acc, std::span<const double> delta, double weight);

/// Writes `base + acc` encoded as `out_dtype`. Elements whose accumulated delta
/// is exactly zero are re-encoded from the base value (bit-exact when the
/// dtype is unchanged), so a zero merge never perturbs the base.
void add_into(DType base_dtype, std::span<const std::byte> base, std::span<const double> acc, DType out_dtype,
              std::span<std::byte> out);

/// Merges extras from several vectors; a name supplied twice with different contents is an error.
void merge_extras(std::map<std::string, Tensor>& into, const std::map<std::string, Tensor>& from);

}  // namespace vecmerge
