// SPDX-License-Identifier: Apache-2.0

#include "vecmerge/recipe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

#include <fmt/core.h>

namespace vecmerge {

using nlohmann::json;

namespace {

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys{"base", "method", "vectors", "density", "lambda",
                                            "mismatch", "dtype", "output", "description"};
    return keys;
}

std::string require_string(const json& doc, const std::string& key, const std::string& pointer) {
    if (!doc.contains(key)) throw RecipeError(pointer, fmt::format("missing required key '{}'", key));
    const auto& v = doc.at(key);
    if (!v.is_string() || v.get<std::string>().empty()) {
        throw RecipeError(pointer, "expected a non-empty string");
    }
    return v.get<std::string>();
}

double finite_number(const json& v, const std::string& pointer) {
    if (!v.is_number()) throw RecipeError(pointer, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw RecipeError(pointer, "expected a finite number");
    return d;
}

WeightSpec parse_weight(const json& v, const std::string& pointer) {
    WeightSpec w;
    if (v.is_number()) {
        w.value = finite_number(v, pointer);
        return w;
    }
    if (!v.is_object()) throw RecipeError(pointer, "expected a number or a {\"grid\": ...} object");
    for (const auto& [key, _] : v.items()) {
        if (key != "grid") throw RecipeError(pointer + "/" + key, "unknown key");
    }
    if (!v.contains("grid")) throw RecipeError(pointer, "missing required key 'grid'");
    const auto& grid = v.at("grid");
    const std::string grid_ptr = pointer + "/grid";
    if (grid.is_string()) {
        if (grid.get<std::string>() != "default") {
            throw RecipeError(grid_ptr, "grid must be a list of numbers or \"default\"");
        }
        w.grid = default_lambda_grid();
    } else if (grid.is_array()) {
        if (grid.empty()) throw RecipeError(grid_ptr, "grid must not be empty");
        for (std::size_t i = 0; i < grid.size(); ++i) {
            w.grid.push_back(finite_number(grid[i], fmt::format("{}/{}", grid_ptr, i)));
        }
    } else {
        throw RecipeError(grid_ptr, "grid must be a list of numbers or \"default\"");
    }
    w.value = w.grid.front();
    return w;
}

json weight_json(const WeightSpec& w) {
    if (w.is_grid()) return json{{"grid", w.grid}};
    return w.value;
}

void check_positive(const WeightSpec& w, const std::string& pointer) {
    auto bad = [](double x) { return !(x > 0.0); };
    if (w.is_grid() ? std::any_of(w.grid.begin(), w.grid.end(), bad) : bad(w.value)) {
        throw RecipeError(pointer, "TIES vector weights must be positive");
    }
}

std::string format_value(double v) { return fmt::format("{}", v); }

std::filesystem::path with_suffix(const std::string& output, const std::string& suffix) {
    const std::filesystem::path p(output);
    return p.parent_path() / (p.stem().string() + suffix + p.extension().string());
}

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

double parse_double(const std::string& text, const std::string& where) {
    double v = 0.0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
        throw RecipeError(where, fmt::format("'{}' is not a finite number", text));
    }
    return v;
}

}  // namespace

RecipeError::RecipeError(std::string pointer, const std::string& message)
    : std::runtime_error(pointer.empty() ? message : fmt::format("{}: {}", pointer, message)),
      pointer_(std::move(pointer)) {}

bool MergeRecipe::has_grid() const {
    if (lambda.is_grid()) return true;
    return std::any_of(vectors.begin(), vectors.end(), [](const VectorEntry& v) { return v.weight.is_grid(); });
}

std::vector<double> default_lambda_grid() {
    std::vector<double> grid;
    for (int k = 1; k <= 10; ++k) grid.push_back(k / 10.0);
    return grid;
}

MergeRecipe parse_recipe(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw RecipeError("", fmt::format("recipe is not valid JSON: {}", e.what()));
    }
    return recipe_from_json(doc);
}

MergeRecipe recipe_from_json(const json& doc) {
    if (!doc.is_object()) throw RecipeError("", "recipe must be a JSON object");
    for (const auto& [key, _] : doc.items()) {
        if (!known_keys().count(key)) throw RecipeError("/" + key, "unknown key");
    }

    MergeRecipe r;
    r.base = require_string(doc, "base", doc.contains("base") ? "/base" : "");
    r.output = require_string(doc, "output", doc.contains("output") ? "/output" : "");

    const auto method = require_string(doc, "method", doc.contains("method") ? "/method" : "");
    if (method == "tv") {
        r.method = MergeMethod::tv;
    } else if (method == "ties") {
        r.method = MergeMethod::ties;
    } else {
        throw RecipeError("/method", fmt::format("unknown method '{}' (expected tv or ties)", method));
    }

    if (!doc.contains("vectors")) throw RecipeError("", "missing required key 'vectors'");
    const auto& vectors = doc.at("vectors");
    if (!vectors.is_array()) throw RecipeError("/vectors", "expected a list");
    if (vectors.empty()) throw RecipeError("/vectors", "at least one vector is required");
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        const std::string ptr = fmt::format("/vectors/{}", i);
        const auto& entry = vectors[i];
        if (!entry.is_object()) throw RecipeError(ptr, "expected an object");
        for (const auto& [key, _] : entry.items()) {
            if (key != "source" && key != "weight") throw RecipeError(ptr + "/" + key, "unknown key");
        }
        VectorEntry v;
        v.source = require_string(entry, "source", entry.contains("source") ? ptr + "/source" : ptr);
        if (entry.contains("weight")) v.weight = parse_weight(entry.at("weight"), ptr + "/weight");
        if (r.method == MergeMethod::ties) check_positive(v.weight, ptr + "/weight");
        r.vectors.push_back(std::move(v));
    }

    if (r.method == MergeMethod::tv) {
        for (const char* key : {"density", "lambda"}) {
            if (doc.contains(key)) {
                throw RecipeError(std::string("/") + key, "only valid for method \"ties\"");
            }
        }
    } else {
        if (doc.contains("density")) {
            r.density = finite_number(doc.at("density"), "/density");
            if (!(r.density > 0.0 && r.density <= 1.0)) throw RecipeError("/density", "density must be in (0, 1]");
        }
        if (doc.contains("lambda")) r.lambda = parse_weight(doc.at("lambda"), "/lambda");
    }

    if (doc.contains("mismatch")) {
        const auto& m = doc.at("mismatch");
        if (!m.is_string()) throw RecipeError("/mismatch", "expected a string");
        try {
            r.mismatch = parse_mismatch_policy(m.get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw RecipeError("/mismatch", e.what());
        }
    }
    if (doc.contains("dtype")) {
        const auto& d = doc.at("dtype");
        if (!d.is_string()) throw RecipeError("/dtype", "expected a string");
        const auto name = d.get<std::string>();
        if (name != "keep") {
            r.dtype = parse_dtype(name);
            if (!r.dtype) throw RecipeError("/dtype", fmt::format("unknown dtype '{}'", name));
        }
    }
    if (doc.contains("description")) {
        if (!doc.at("description").is_string()) throw RecipeError("/description", "expected a string");
        r.description = doc.at("description").get<std::string>();
    }
    return r;
}

json recipe_to_json(const MergeRecipe& r) {
    json j;
    j["base"] = r.base;
    j["method"] = r.method == MergeMethod::tv ? "tv" : "ties";
    j["vectors"] = json::array();
    for (const auto& v : r.vectors) j["vectors"].push_back({{"source", v.source}, {"weight", weight_json(v.weight)}});
    if (r.method == MergeMethod::ties) {
        j["density"] = r.density;
        j["lambda"] = weight_json(r.lambda);
    }
    j["mismatch"] = mismatch_policy_name(r.mismatch);
    j["dtype"] = r.dtype ? std::string(dtype_name(*r.dtype)) : "keep";
    j["output"] = r.output;
    if (!r.description.empty()) j["description"] = r.description;
    return j;
}

MergeRecipe resolve_paths(MergeRecipe recipe, const std::filesystem::path& dir) {
    auto resolve = [&](std::string& p) {
        if (!p.empty() && std::filesystem::path(p).is_relative()) p = (dir / p).lexically_normal().string();
    };
    resolve(recipe.base);
    resolve(recipe.output);
    for (auto& v : recipe.vectors) resolve(v.source);
    return recipe;
}

std::string format_assignment(const Assignment& assignment) {
    std::string out;
    for (const auto& [k, v] : assignment) {
        if (!out.empty()) out += ';';
        out += fmt::format("{}={}", k, format_value(v));
    }
    return out;
}

std::vector<ExpandedRecipe> expand_sweep(const MergeRecipe& recipe, std::size_t cap) {
    struct Slot {
        std::string name;
        const std::vector<double>* grid;
    };
    std::vector<Slot> slots;
    for (std::size_t i = 0; i < recipe.vectors.size(); ++i) {
        if (recipe.vectors[i].weight.is_grid()) slots.push_back({fmt::format("w{}", i), &recipe.vectors[i].weight.grid});
    }
    if (recipe.method == MergeMethod::ties && recipe.lambda.is_grid()) slots.push_back({"lambda", &recipe.lambda.grid});

    std::size_t total = 1;
    for (const auto& s : slots) {
        if (__builtin_mul_overflow(total, s.grid->size(), &total) || total > cap) {
            throw RecipeError("", fmt::format("sweep expands to more than {} recipes", cap));
        }
    }

    std::vector<ExpandedRecipe> out;
    out.reserve(total);
    std::vector<std::size_t> index(slots.size(), 0);
    for (std::size_t n = 0; n < total; ++n) {
        ExpandedRecipe e{recipe, {}};
        std::string suffix;
        for (std::size_t s = 0; s < slots.size(); ++s) {
            const double value = (*slots[s].grid)[index[s]];
            e.assignment[slots[s].name] = value;
            suffix += fmt::format("_{}={}", slots[s].name, format_value(value));
        }
        for (std::size_t i = 0; i < e.recipe.vectors.size(); ++i) {
            auto& w = e.recipe.vectors[i].weight;
            if (w.is_grid()) w = WeightSpec{e.assignment.at(fmt::format("w{}", i)), {}};
        }
        if (e.recipe.lambda.is_grid()) {
            e.recipe.lambda = WeightSpec{e.recipe.method == MergeMethod::ties ? e.assignment.at("lambda")
                                                                               : e.recipe.lambda.value,
                                         {}};
        }
        if (!slots.empty()) e.recipe.output = with_suffix(recipe.output, suffix).string();
        out.push_back(std::move(e));

        for (std::size_t s = slots.size(); s-- > 0;) {
            if (++index[s] < slots[s].grid->size()) break;
            index[s] = 0;
        }
    }
    return out;
}

MetricsTable parse_metrics_csv(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    MetricsTable table;
    while (std::getline(in, line)) {
        ++line_no;
        const auto row = trim(line);
        if (row.empty()) continue;
        const std::string where = fmt::format("line {}", line_no);
        if (!header_seen) {
            if (row != "assignment,metric") throw RecipeError(where, "expected header 'assignment,metric'");
            header_seen = true;
            continue;
        }
        const auto comma = row.rfind(',');
        if (comma == std::string::npos) throw RecipeError(where, "expected 'assignment,metric'");
        MetricsRow r;
        r.metric = parse_double(trim(std::string_view(row).substr(comma + 1)), where);
        std::istringstream pairs(row.substr(0, comma));
        std::string pair;
        while (std::getline(pairs, pair, ';')) {
            const auto kv = trim(pair);
            if (kv.empty()) continue;
            const auto eq = kv.find('=');
            if (eq == std::string::npos || eq == 0) throw RecipeError(where, fmt::format("bad assignment '{}'", kv));
            const auto key = trim(std::string_view(kv).substr(0, eq));
            if (!r.assignment.emplace(key, parse_double(trim(std::string_view(kv).substr(eq + 1)), where)).second) {
                throw RecipeError(where, fmt::format("parameter '{}' assigned twice", key));
            }
        }
        table.push_back(std::move(r));
    }
    if (!header_seen) throw RecipeError("line 1", "expected header 'assignment,metric'");
    return table;
}

Assignment select_best(const MetricsTable& table) {
    if (table.empty()) throw RecipeError("", "metrics table is empty");
    std::set<std::string> keys;
    for (const auto& [k, v] : table.front().assignment) keys.insert(k);
    const MetricsRow* best = nullptr;
    for (const auto& row : table) {
        std::set<std::string> row_keys;
        for (const auto& [k, v] : row.assignment) row_keys.insert(k);
        if (row_keys != keys) {
            throw RecipeError("", fmt::format("assignment '{}' does not cover the same parameters as '{}'",
                                              format_assignment(row.assignment),
                                              format_assignment(table.front().assignment)));
        }
        if (!std::isfinite(row.metric)) throw RecipeError("", "metric values must be finite");
        if (best == nullptr || row.metric > best->metric ||
            (row.metric == best->metric &&
             std::lexicographical_compare(row.assignment.begin(), row.assignment.end(), best->assignment.begin(),
                                          best->assignment.end(), [](const auto& a, const auto& b) {
                                              return a.second < b.second;
                                          }))) {
            best = &row;
        }
    }
    return best->assignment;
}

}  // namespace vecmerge
