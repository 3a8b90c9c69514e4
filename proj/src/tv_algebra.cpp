// SPDX-License-Identifier: Apache-2.0

#include "vecmerge/tv_algebra.hpp"

#include <cmath>
#include <cstring>
#include <set>

#include <fmt/core.h>
#include <fmt/ranges.h>
#include <json.hpp>

#include "vecmerge/parallel.hpp"

namespace vecmerge {

namespace {

std::map<std::string, Shape> shapes_of(const Checkpoint& c) {
    std::map<std::string, Shape> out;
    for (const auto& [name, t] : c.tensors) out.emplace(name, t.shape());
    return out;
}

void check_weight(double w) {
    if (!std::isfinite(w)) throw MergeError(fmt::format("merge weight {} is not finite", w));
}

}  // namespace

MismatchPolicy parse_mismatch_policy(std::string_view text) {
    if (text == "error") return MismatchPolicy::error;
    if (text == "ignore") return MismatchPolicy::ignore;
    if (text == "copy" || text == "copy_from_finetuned") return MismatchPolicy::copy_from_finetuned;
    throw std::invalid_argument(fmt::format("unknown mismatch policy '{}' (expected error, ignore or copy)", text));
}

std::string_view mismatch_policy_name(MismatchPolicy policy) {
    switch (policy) {
        case MismatchPolicy::error: return "error";
        case MismatchPolicy::ignore: return "ignore";
        case MismatchPolicy::copy_from_finetuned: return "copy";
    }
    return "error";
}

ExtractionPlan plan_extraction(const std::map<std::string, Shape>& base,
                               const std::map<std::string, Shape>& finetuned) {
    ExtractionPlan plan;
    for (const auto& [name, shape] : finetuned) {
        auto it = base.find(name);
        if (it != base.end() && it->second == shape) {
            plan.shared.push_back(name);
        } else {
            plan.mismatched.push_back(name);
        }
    }
    for (const auto& [name, shape] : base) {
        if (!finetuned.count(name)) plan.base_only.push_back(name);
    }
    return plan;
}

void check_extraction_plan(const ExtractionPlan& plan, MismatchPolicy policy) {
    if (plan.shared.empty()) {
        throw MergeError("base and fine-tuned checkpoints share no tensor with equal name and shape");
    }
    if (policy == MismatchPolicy::error && (!plan.mismatched.empty() || !plan.base_only.empty())) {
        std::vector<std::string> names = plan.mismatched;
        names.insert(names.end(), plan.base_only.begin(), plan.base_only.end());
        throw MergeError(fmt::format("tensors not shared by base and fine-tuned checkpoints: {}",
                                     fmt::join(names, ", ")));
    }
}

Extraction extract_task_vector(const Checkpoint& base, const Checkpoint& finetuned, MismatchPolicy policy) {
    const auto plan = plan_extraction(shapes_of(base), shapes_of(finetuned));
    check_extraction_plan(plan, policy);

    Extraction out;
    out.vector.origin = "extracted";
    for (const auto& name : plan.shared) {
        const auto b = base.tensors.at(name).to_f64();
        auto f = finetuned.tensors.at(name).to_f64();
        for (std::size_t i = 0; i < f.size(); ++i) f[i] -= b[i];
        out.vector.deltas.emplace(name, Delta{finetuned.tensors.at(name).shape(), std::move(f)});
    }
    for (const auto& name : plan.mismatched) {
        if (policy == MismatchPolicy::copy_from_finetuned) {
            out.vector.extras.emplace(name, finetuned.tensors.at(name));
        } else {
            out.ignored.push_back(name);
        }
    }
    out.ignored.insert(out.ignored.end(), plan.base_only.begin(), plan.base_only.end());
    return out;
}

TaskVector scale(const TaskVector& tv, double lambda) {
    check_weight(lambda);
    TaskVector out = tv;
    for (auto& [name, delta] : out.deltas) {
        for (auto& v : delta.values) v *= lambda;
    }
    return out;
}

TaskVector add_vectors(std::span<const TaskVector> tvs) {
    if (tvs.empty()) throw MergeError("add_vectors needs at least one task vector");
    TaskVector out;
    out.origin = "sum";
    for (const auto& tv : tvs) {
        for (const auto& [name, delta] : tv.deltas) {
            auto [it, inserted] = out.deltas.try_emplace(name, delta);
            if (inserted) continue;
            if (it->second.shape != delta.shape) {
                throw MergeError(fmt::format("tensor '{}' has shape {} in one vector and {} in another", name,
                                             format_shape(it->second.shape), format_shape(delta.shape)));
            }
            auto& acc = it->second.values;
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += delta.values[i];
        }
        merge_extras(out.extras, tv.extras);
    }
    return out;
}

void accumulate_scaled(std::span<double> acc, std::span<const double> delta, double weight) {
    parallel_for(acc.size(), [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) acc[i] += weight * delta[i];
    });
}

void add_into(DType base_dtype, std::span<const std::byte> base, std::span<const double> acc, DType out_dtype,
              std::span<std::byte> out) {
    const std::size_t in_width = dtype_size(base_dtype);
    const std::size_t out_width = dtype_size(out_dtype);
    parallel_for(acc.size(), [&](std::size_t begin, std::size_t end) {
        const std::size_t n = end - begin;
        std::vector<double> values(n);
        decode_f64(base_dtype, base.subspan(begin * in_width, n * in_width), values);
        for (std::size_t i = 0; i < n; ++i) {
            if (acc[begin + i] != 0.0) values[i] += acc[begin + i];
        }
        encode_f64(out_dtype, values, out.subspan(begin * out_width, n * out_width));
        if (out_dtype == base_dtype) {
            for (std::size_t i = 0; i < n; ++i) {
                if (acc[begin + i] == 0.0) {
                    std::memcpy(out.data() + (begin + i) * out_width, base.data() + (begin + i) * in_width,
                                in_width);
                }
            }
        }
    });
}

void merge_extras(std::map<std::string, Tensor>& into, const std::map<std::string, Tensor>& from) {
    for (const auto& [name, tensor] : from) {
        auto [it, inserted] = into.try_emplace(name, tensor);
        if (!inserted && !(it->second == tensor)) {
            throw MergeError(fmt::format("extra tensor '{}' is supplied by several vectors with different contents",
                                         name));
        }
    }
}

Checkpoint tv_merge(const Checkpoint& base, std::span<const WeightedVector> weighted) {
    std::set<std::string> touched;
    std::map<std::string, Tensor> extras;
    for (const auto& wv : weighted) {
        check_weight(wv.weight);
        for (const auto& [name, delta] : wv.vector.get().deltas) {
            auto it = base.tensors.find(name);
            if (it == base.tensors.end()) {
                throw MergeError(fmt::format("task vector tensor '{}' is missing from the base", name));
            }
            if (it->second.shape() != delta.shape) {
                throw MergeError(fmt::format("task vector tensor '{}' has shape {} but the base has {}", name,
                                             format_shape(delta.shape), format_shape(it->second.shape())));
            }
            touched.insert(name);
        }
        merge_extras(extras, wv.vector.get().extras);
    }

    Checkpoint out;
    out.metadata = base.metadata;
    for (const auto& [name, tensor] : base.tensors) {
        if (!touched.count(name)) {
            out.tensors.emplace(name, tensor);
            continue;
        }
        std::vector<double> acc(tensor.numel(), 0.0);
        for (const auto& wv : weighted) {
            const auto& deltas = wv.vector.get().deltas;
            if (auto it = deltas.find(name); it != deltas.end()) accumulate_scaled(acc, it->second.values, wv.weight);
        }
        std::vector<std::byte> bytes(tensor.bytes().size());
        add_into(tensor.dtype(), tensor.bytes(), acc, tensor.dtype(), bytes);
        out.tensors.emplace(name, Tensor(tensor.dtype(), tensor.shape(), std::move(bytes)));
    }
    for (auto& [name, tensor] : extras) out.tensors.insert_or_assign(name, std::move(tensor));
    return out;
}

Checkpoint apply(const Checkpoint& base, const TaskVector& tv) {
    const WeightedVector single{tv, 1.0};
    return tv_merge(base, std::span(&single, 1));
}

Checkpoint to_checkpoint(const TaskVector& tv, DType storage) {
    Checkpoint out;
    for (const auto& [name, delta] : tv.deltas) {
        out.tensors.emplace(name, Tensor::from_f64(storage, delta.shape, delta.values));
    }
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, tensor] : tv.extras) {
        if (!out.tensors.emplace(name, tensor).second) {
            throw MergeError(fmt::format("tensor '{}' is both a delta and an extra", name));
        }
        names.push_back(name);
    }
    out.metadata[std::string(kKindKey)] = kTaskVectorKind;
    if (!tv.extras.empty()) out.metadata[std::string(kExtrasKey)] = names.dump();
    if (!tv.origin.empty()) out.metadata[std::string(kOriginKey)] = tv.origin;
    return out;
}

bool is_task_vector(const std::map<std::string, std::string>& metadata) {
    auto it = metadata.find(std::string(kKindKey));
    return it != metadata.end() && it->second == kTaskVectorKind;
}

std::vector<std::string> extras_names(const std::map<std::string, std::string>& metadata) {
    auto it = metadata.find(std::string(kExtrasKey));
    if (it == metadata.end()) return {};
    auto parsed = nlohmann::json::parse(it->second, nullptr, false);
    if (!parsed.is_array()) throw MergeError("metadata 'vecmerge.extras' is not a JSON list of names");
    std::vector<std::string> out;
    for (const auto& n : parsed) {
        if (!n.is_string()) throw MergeError("metadata 'vecmerge.extras' is not a JSON list of names");
        out.push_back(n.get<std::string>());
    }
    return out;
}

TaskVector task_vector_from_checkpoint(const Checkpoint& checkpoint) {
    if (!is_task_vector(checkpoint.metadata)) {
        throw MergeError(fmt::format("checkpoint is not a task vector (metadata '{}' is not '{}')", kKindKey,
                                     kTaskVectorKind));
    }
    const auto extra = extras_names(checkpoint.metadata);
    const std::set<std::string> extra_set(extra.begin(), extra.end());
    TaskVector tv;
    auto origin = checkpoint.metadata.find(std::string(kOriginKey));
    tv.origin = origin != checkpoint.metadata.end() ? origin->second : "loaded from archive";
    for (const auto& [name, tensor] : checkpoint.tensors) {
        if (extra_set.count(name)) {
            tv.extras.emplace(name, tensor);
        } else {
            tv.deltas.emplace(name, Delta{tensor.shape(), tensor.to_f64()});
        }
    }
    return tv;
}

}  // namespace vecmerge
