// SPDX-License-Identifier: Apache-2.0
//
// Streaming recipe execution. Vector addition works on fixed-size element
// chunks so peak memory stays near a handful of chunk buffers regardless of
// checkpoint size; TIES needs whole tensors (trimming is a per-tensor top-k)
// and streams one tensor at a time.

#include <algorithm>
#include <chrono>
#include <memory>
#include <set>

#include <fmt/core.h>

#include "vecmerge/merge_report.hpp"
#include "vecmerge/recipe.hpp"
#include "vecmerge/ties.hpp"

namespace vecmerge {

namespace {

constexpr std::uint64_t kChunkElements = std::uint64_t{1} << 20;

struct Source {
    std::unique_ptr<ArchiveReader> reader;
    bool is_task_vector = false;
    double weight = 1.0;
    std::set<std::string> deltas;  // tensors contributing a delta
    std::vector<std::string> extras;
};

std::map<std::string, Shape> shapes_of(const ArchiveReader& reader) {
    std::map<std::string, Shape> out;
    for (const auto& [name, spec] : reader.specs()) out.emplace(name, spec.shape);
    return out;
}

Source open_source(const VectorEntry& entry, const ArchiveReader& base, MismatchPolicy policy) {
    Source s;
    s.reader = std::make_unique<ArchiveReader>(entry.source);
    s.weight = entry.weight.value;
    s.is_task_vector = is_task_vector(s.reader->metadata());
    if (s.is_task_vector) {
        s.extras = extras_names(s.reader->metadata());
        const std::set<std::string> extra_set(s.extras.begin(), s.extras.end());
        for (const auto& [name, spec] : s.reader->specs()) {
            if (extra_set.count(name)) continue;
            if (!base.contains(name)) {
                throw MergeError(fmt::format("task vector '{}' has tensor '{}' that is missing from the base",
                                             entry.source, name));
            }
            if (base.spec(name).shape != spec.shape) {
                throw MergeError(fmt::format("task vector '{}' tensor '{}' has shape {} but the base has {}",
                                             entry.source, name, format_shape(spec.shape),
                                             format_shape(base.spec(name).shape)));
            }
            s.deltas.insert(name);
        }
        for (const auto& name : s.extras) {
            if (!s.reader->contains(name)) {
                throw MergeError(fmt::format("task vector '{}' lists extra '{}' that it does not contain",
                                             entry.source, name));
            }
        }
    } else {
        const auto plan = plan_extraction(shapes_of(base), shapes_of(*s.reader));
        try {
            check_extraction_plan(plan, policy);
        } catch (const MergeError& e) {
            throw MergeError(fmt::format("{}: {}", entry.source, e.what()));
        }
        s.deltas.insert(plan.shared.begin(), plan.shared.end());
        if (policy == MismatchPolicy::copy_from_finetuned) s.extras = plan.mismatched;
    }
    return s;
}

// Delta of `source` for elements [first, first + count) of `name`.
std::vector<double> read_delta(Source& s, const std::string& name, std::uint64_t first, std::uint64_t count,
                               std::span<const double> base_values) {
    auto values = s.reader->read_f64(name, first, count);
    if (!s.is_task_vector) {
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= base_values[i];
    }
    return values;
}

void copy_tensor(ArchiveReader& reader, const std::string& name, DType out_dtype, ArchiveWriter& writer) {
    const auto& spec = reader.spec(name);
    const std::uint64_t numel = spec.numel();
    for (std::uint64_t first = 0; first < numel; first += kChunkElements) {
        const std::uint64_t count = std::min(kChunkElements, numel - first);
        if (spec.dtype == out_dtype) {
            writer.append(reader.read_bytes(name, first, count));
        } else {
            const auto values = reader.read_f64(name, first, count);
            std::vector<std::byte> out(count * dtype_size(out_dtype));
            encode_f64(out_dtype, values, out);
            writer.append(out);
        }
    }
}

}  // namespace

MergeOutcome execute_recipe(const MergeRecipe& recipe) {
    if (recipe.has_grid()) throw RecipeError("", "recipe contains sweep grids; expand it before running");
    if (recipe.vectors.empty()) throw RecipeError("/vectors", "at least one vector is required");
    const auto start = std::chrono::steady_clock::now();

    ArchiveReader base(recipe.base);
    std::vector<Source> sources;
    for (const auto& entry : recipe.vectors) sources.push_back(open_source(entry, base, recipe.mismatch));

    TiesConfig ties_config;
    if (recipe.method == MergeMethod::ties) {
        ties_config.density = recipe.density;
        ties_config.lambda = recipe.lambda.value;
        for (const auto& s : sources) ties_config.weights.push_back(s.weight);
        ties_config.validate(sources.size());
    }

    // Extras: the first source supplying a name wins; any later source must agree bit for bit.
    std::map<std::string, std::size_t> extra_owner;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        for (const auto& name : sources[i].extras) {
            auto [it, inserted] = extra_owner.emplace(name, i);
            if (inserted) continue;
            if (sources[it->second].reader->read_tensor(name) != sources[i].reader->read_tensor(name)) {
                throw MergeError(fmt::format("extra tensor '{}' differs between '{}' and '{}'", name,
                                             sources[it->second].reader->path().string(),
                                             sources[i].reader->path().string()));
            }
        }
    }

    std::vector<OutputTensor> layout;
    for (const auto& [name, spec] : base.specs()) {
        if (extra_owner.count(name)) continue;
        layout.push_back({name, recipe.dtype.value_or(spec.dtype), spec.shape});
    }
    for (const auto& [name, owner] : extra_owner) {
        const auto& spec = sources[owner].reader->spec(name);
        layout.push_back({name, recipe.dtype.value_or(spec.dtype), spec.shape});
    }

    auto metadata = base.metadata();
    metadata[std::string(kKindKey)] = "merged";
    metadata["vecmerge.recipe"] = recipe_to_json(recipe).dump();

    ArchiveWriter writer(recipe.output, layout, metadata);
    InterferenceReport interference;
    interference.vector_count = sources.size();
    interference.density = recipe.density;
    std::size_t merged_count = 0;
    std::size_t copied_count = 0;

    for (const auto& out : writer.layout()) {
        if (auto it = extra_owner.find(out.name); it != extra_owner.end()) {
            copy_tensor(*sources[it->second].reader, out.name, out.dtype, writer);
            continue;
        }
        std::vector<std::size_t> contributing;
        for (std::size_t i = 0; i < sources.size(); ++i) {
            if (sources[i].deltas.count(out.name)) contributing.push_back(i);
        }
        if (contributing.empty()) {
            copy_tensor(base, out.name, out.dtype, writer);
            ++copied_count;
            continue;
        }
        ++merged_count;
        const auto& spec = base.spec(out.name);
        const std::uint64_t numel = spec.numel();

        if (recipe.method == MergeMethod::tv) {
            for (std::uint64_t first = 0; first < numel; first += kChunkElements) {
                const std::uint64_t count = std::min(kChunkElements, numel - first);
                const auto raw = base.read_bytes(out.name, first, count);
                std::vector<double> base_values(count);
                decode_f64(spec.dtype, raw, base_values);
                std::vector<double> acc(count, 0.0);
                for (auto i : contributing) {
                    const auto delta = read_delta(sources[i], out.name, first, count, base_values);
                    accumulate_scaled(acc, delta, sources[i].weight);
                }
                std::vector<std::byte> bytes(count * dtype_size(out.dtype));
                add_into(spec.dtype, raw, acc, out.dtype, bytes);
                writer.append(bytes);
            }
        } else {
            const auto raw = base.read_bytes(out.name, 0, numel);
            std::vector<double> base_values(numel);
            decode_f64(spec.dtype, raw, base_values);
            std::vector<std::vector<double>> deltas(sources.size());
            std::vector<std::span<const double>> views(sources.size());
            for (auto i : contributing) {
                deltas[i] = read_delta(sources[i], out.name, 0, numel, base_values);
                views[i] = deltas[i];
            }
            TensorInterference stats;
            stats.name = out.name;
            auto acc = ties_merge_tensor(views, ties_config.weights, ties_config.density, numel, &stats);
            for (auto& v : acc) v *= ties_config.lambda;
            std::vector<std::byte> bytes(numel * dtype_size(out.dtype));
            add_into(spec.dtype, raw, acc, out.dtype, bytes);
            writer.append(bytes);
            interference.tensors.push_back(std::move(stats));
        }
    }
    writer.finish();

    MergeOutcome outcome;
    outcome.output = recipe.output;
    outcome.tensor_count = layout.size();
    outcome.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    outcome.report = {{"method", recipe.method == MergeMethod::tv ? "tv" : "ties"},
                      {"output", recipe.output},
                      {"tensor_count", layout.size()},
                      {"merged_tensors", merged_count},
                      {"copied_tensors", copied_count},
                      {"extra_tensors", extra_owner.size()}};
    if (recipe.method == MergeMethod::ties) outcome.report["interference"] = interference.to_json();
    return outcome;
}

}  // namespace vecmerge
