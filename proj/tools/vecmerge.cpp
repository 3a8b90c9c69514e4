// SPDX-License-Identifier: Apache-2.0
//
// vecmerge command-line interface.
//
// Exit codes: 0 success, 2 invalid input (bad arguments, malformed archive or
// recipe, failed validation), 3 merge or runtime failure.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "vecmerge/merge_report.hpp"
#include "vecmerge/parallel.hpp"
#include "vecmerge/recipe.hpp"
#include "vecmerge/tensor_store.hpp"
#include "vecmerge/ties.hpp"
#include "vecmerge/toy_bench.hpp"
#include "vecmerge/tv_algebra.hpp"

namespace {

using namespace vecmerge;
using nlohmann::json;

constexpr int kExitInvalid = 2;
constexpr int kExitFailure = 3;

// Invalid command-line input detected after parsing.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError(fmt::format("cannot open '{}'", path));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path));
    out << text;
}

std::optional<DType> dtype_option(const std::string& name) {
    if (name == "keep") return std::nullopt;
    auto d = parse_dtype(name);
    if (!d) throw UsageError(fmt::format("unknown dtype '{}'", name));
    return d;
}

MismatchPolicy mismatch_option(const std::string& name) {
    try {
        return parse_mismatch_policy(name);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

std::vector<double> weights_for(const std::vector<double>& weights, std::size_t vectors) {
    if (weights.empty()) return std::vector<double>(vectors, 1.0);
    if (weights.size() != vectors) {
        throw UsageError(fmt::format("{} --weight values given for {} --vector arguments", weights.size(), vectors));
    }
    return weights;
}

struct MergeArgs {
    std::string base;
    std::vector<std::string> vectors;
    std::vector<double> weights;
    std::string out;
    std::string dtype = "keep";
    std::string mismatch = "error";
    double density = kDefaultDensity;
    double lambda = kDefaultTiesLambda;
    std::string report;
};

int run_merge(const MergeArgs& a, MergeMethod method) {
    MergeRecipe r;
    r.base = a.base;
    r.method = method;
    r.output = a.out;
    r.dtype = dtype_option(a.dtype);
    r.mismatch = mismatch_option(a.mismatch);
    r.density = a.density;
    r.lambda.value = a.lambda;
    const auto weights = weights_for(a.weights, a.vectors.size());
    for (std::size_t i = 0; i < a.vectors.size(); ++i) r.vectors.push_back({a.vectors[i], {weights[i], {}}});
    // Round-trip through the schema so CLI merges obey the same validation as recipe files.
    r = recipe_from_json(recipe_to_json(r));
    const auto outcome = execute_recipe(r);
    if (!a.report.empty()) {
        write_text(a.report, (method == MergeMethod::ties ? outcome.report.at("interference") : outcome.report).dump(2) + "\n");
    }
    std::cout << outcome.report.dump(2) << "\n";
    std::cerr << fmt::format("merged {} tensors into {} in {:.3f} s\n", outcome.tensor_count, outcome.output.string(),
                             outcome.wall_seconds);
    return 0;
}

Checkpoint load_task_vector_or_die(const std::string& path) {
    auto ckpt = read_archive(std::filesystem::path(path));
    if (!is_task_vector(ckpt.metadata)) {
        throw UsageError(fmt::format("'{}' is not a task-vector archive (run `vecmerge extract` first)", path));
    }
    return ckpt;
}

std::string human_inspect(const ValidationReport& r) {
    std::string s = fmt::format("{}: {} tensors, {} bytes (header {}, data {})\n", r.path, r.tensor_count, r.file_bytes,
                                r.header_bytes, r.data_bytes);
    for (const auto& [dtype, n] : r.dtype_counts) s += fmt::format("  {}: {}\n", dtype, n);
    if (r.valid()) {
        s += "valid\n";
    } else {
        for (const auto& v : r.violations) {
            s += fmt::format("  violation [{}] tensor='{}' offset={}: {}\n", v.kind, v.tensor, v.offset, v.message);
        }
    }
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vecmerge: task-vector extraction, merging and inspection for tensor archives"};
    app.require_subcommand(1);
    std::size_t threads = 0;
    app.add_option("--threads", threads, "worker threads (default: hardware concurrency)");

    // inspect
    auto* inspect = app.add_subcommand("inspect", "validate an archive and summarize its contents");
    std::string inspect_path;
    bool inspect_summary = false;
    inspect->add_option("archive", inspect_path)->required();
    inspect->add_flag("--summary", inspect_summary, "human-readable summary instead of JSON");

    // extract
    auto* extract = app.add_subcommand("extract", "write the task vector finetuned - base");
    std::string ex_base, ex_ft, ex_out, ex_mismatch = "error", ex_dtype = "F64";
    extract->add_option("--base", ex_base)->required();
    extract->add_option("--finetuned", ex_ft)->required();
    extract->add_option("--out", ex_out)->required();
    extract->add_option("--on-mismatch", ex_mismatch, "error | ignore | copy");
    extract->add_option("--dtype", ex_dtype, "storage dtype of the deltas (default F64)");

    // merge tv / merge ties
    auto* merge = app.add_subcommand("merge", "merge task vectors into a base checkpoint");
    merge->require_subcommand(1);
    MergeArgs tv_args, ties_args;
    auto add_common = [](CLI::App* cmd, MergeArgs& a) {
        cmd->add_option("--base", a.base)->required();
        cmd->add_option("--vector", a.vectors, "task-vector archive or fine-tuned checkpoint (repeatable)")
            ->required();
        cmd->add_option("--weight", a.weights, "per-vector weight, in --vector order (default 1)");
        cmd->add_option("--out", a.out)->required();
        cmd->add_option("--dtype", a.dtype, "output dtype: keep | F64 | F32 | F16 | BF16");
        cmd->add_option("--on-mismatch", a.mismatch, "for fine-tuned sources: error | ignore | copy");
    };
    auto* merge_tv = merge->add_subcommand("tv", "base + sum_i w_i * tau_i");
    add_common(merge_tv, tv_args);
    auto* merge_ties = merge->add_subcommand("ties", "trim, elect signs, disjoint mean");
    add_common(merge_ties, ties_args);
    merge_ties->add_option("--density", ties_args.density, "fraction kept per tensor (default 0.2)");
    merge_ties->add_option("--lambda", ties_args.lambda, "scale on the merged vector (default 1)");
    merge_ties->add_option("--report", ties_args.report, "write the interference report JSON here");
    for (auto* cmd : {merge_tv, merge_ties}) {
        // --vector/--weight are repeated flags; collect every occurrence
        cmd->get_option("--vector")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        cmd->get_option("--weight")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    }

    // run
    auto* run = app.add_subcommand("run", "execute a JSON merge recipe");
    std::string recipe_path, metrics_path;
    bool sweep = false;
    run->add_option("--recipe", recipe_path)->required();
    run->add_flag("--sweep", sweep, "expand weight grids and run every assignment");
    run->add_option("--metrics", metrics_path, "CSV of assignment,metric; runs only the best assignment");

    // diff
    auto* diff = app.add_subcommand("diff", "per-tensor delta statistics of B - A");
    std::string diff_a, diff_b;
    bool diff_json = false;
    diff->add_option("a", diff_a)->required();
    diff->add_option("b", diff_b)->required();
    diff->add_flag("--json", diff_json);

    // interference
    auto* interf = app.add_subcommand("interference", "TIES trim/sign statistics for task vectors");
    std::vector<std::string> if_vectors;
    std::vector<double> if_weights;
    double if_density = kDefaultDensity;
    bool if_json = false;
    interf->add_option("--vector", if_vectors)->required()->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    interf->add_option("--weight", if_weights)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    interf->add_option("--density", if_density);
    interf->add_flag("--json", if_json);

    // bench
    auto* bench = app.add_subcommand("bench", "toy merge-then-fine-tune comparison");
    std::vector<std::string> bench_scenarios{"all"};
    std::size_t bench_seeds = 5;
    std::string bench_out, bench_ckpt;
    bench->add_option("--scenario", bench_scenarios, "all | full_ft | seq_ft | joint_ft | tv_merge_ft | ties_merge_ft")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    bench->add_option("--seeds", bench_seeds, "run seeds 0..N-1 (default 5)");
    bench->add_option("--out", bench_out, "write the report JSON here");
    bench->add_option("--checkpoint-dir", bench_ckpt, "write every model as an archive under this directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitInvalid;
    }

    try {
        if (threads > 0) set_thread_count(threads);

        if (inspect->parsed()) {
            const auto report = validate_archive(std::filesystem::path(inspect_path));
            std::cout << (inspect_summary ? human_inspect(report) : report.to_json() + "\n");
            return report.valid() ? 0 : kExitInvalid;
        }

        if (extract->parsed()) {
            const auto storage = parse_dtype(ex_dtype);
            if (!storage) throw UsageError(fmt::format("unknown dtype '{}'", ex_dtype));
            const auto base = read_archive(std::filesystem::path(ex_base));
            const auto ft = read_archive(std::filesystem::path(ex_ft));
            const auto result = extract_task_vector(base, ft, mismatch_option(ex_mismatch));
            save_archive(to_checkpoint(result.vector, *storage), ex_out);
            json j{{"output", ex_out},
                   {"deltas", result.vector.deltas.size()},
                   {"extras", result.vector.extras.size()},
                   {"ignored", result.ignored}};
            std::cout << j.dump(2) << "\n";
            return 0;
        }

        if (merge_tv->parsed()) return run_merge(tv_args, MergeMethod::tv);
        if (merge_ties->parsed()) return run_merge(ties_args, MergeMethod::ties);

        if (run->parsed()) {
            const auto dir = std::filesystem::path(recipe_path).parent_path();
            const auto recipe = resolve_paths(parse_recipe(read_text(recipe_path)), dir);
            if (!metrics_path.empty()) {
                const auto best = select_best(parse_metrics_csv(read_text(metrics_path)));
                for (const auto& e : expand_sweep(recipe)) {
                    if (e.assignment != best) continue;
                    const auto outcome = execute_recipe(e.recipe);
                    json j;
                    j["assignment"] = format_assignment(best);
                    j["output"] = outcome.output.string();
                    j["report"] = outcome.report;
                    std::cout << j.dump(2) << "\n";
                    return 0;
                }
                throw UsageError(fmt::format("selected assignment '{}' is not a point of the recipe's sweep",
                                             format_assignment(best)));
            }
            if (recipe.has_grid() && !sweep) {
                throw UsageError("recipe has weight grids; pass --sweep to run all assignments or --metrics to pick one");
            }
            json runs = json::array();
            for (const auto& e : expand_sweep(recipe)) {
                const auto outcome = execute_recipe(e.recipe);
                json j;
                j["assignment"] = format_assignment(e.assignment);
                j["output"] = outcome.output.string();
                j["report"] = outcome.report;
                runs.push_back(std::move(j));
                std::cerr << fmt::format("wrote {} ({:.3f} s)\n", outcome.output.string(), outcome.wall_seconds);
            }
            std::cout << (sweep ? runs : runs.front()).dump(2) << "\n";
            return 0;
        }

        if (diff->parsed()) {
            const auto report = diff_stats(read_archive(std::filesystem::path(diff_a)),
                                           read_archive(std::filesystem::path(diff_b)));
            if (diff_json) {
                std::cout << report.to_json().dump(2) << "\n";
            } else {
                for (const auto& t : report.tensors) {
                    std::cout << fmt::format("{:<40} numel={:<10} l2={:<12.6g} max_abs={:<12.6g} equal={:.4f}\n",
                                             t.name, t.numel, t.l2, t.max_abs, t.equal_fraction);
                }
                std::cout << fmt::format("total: numel={} l2={:.6g} max_abs={:.6g} equal={:.4f}\n", report.numel,
                                         report.l2, report.max_abs, report.equal_fraction);
                for (const auto& n : report.only_in_a) std::cout << "only in a: " << n << "\n";
                for (const auto& n : report.only_in_b) std::cout << "only in b: " << n << "\n";
                for (const auto& n : report.shape_mismatch) std::cout << "shape differs: " << n << "\n";
            }
            return 0;
        }

        if (interf->parsed()) {
            std::vector<TaskVector> tvs;
            for (const auto& p : if_vectors) tvs.push_back(task_vector_from_checkpoint(load_task_vector_or_die(p)));
            const auto weights = weights_for(if_weights, tvs.size());
            const auto report = interference_stats(tvs, if_density, weights);
            if (if_json) {
                std::cout << report.to_json().dump(2) << "\n";
            } else {
                const auto mass = report.trimmed_mass_fraction();
                for (std::size_t v = 0; v < mass.size(); ++v) {
                    std::cout << fmt::format("vector {}: kept mass {:.4f}\n", v, mass[v]);
                }
                for (const auto& p : report.pairs()) {
                    const auto f = p.fraction();
                    std::cout << fmt::format("pair ({}, {}): sign agreement {} over {} jointly kept\n", p.first,
                                             p.second, f ? fmt::format("{:.4f}", *f) : "n/a", p.joint);
                }
                std::cout << fmt::format("elected sign zero: {} of {}\n", report.zero_sign_count(), report.numel());
            }
            return 0;
        }

        if (bench->parsed()) {
            std::vector<Scenario> scenarios;
            for (const auto& name : bench_scenarios) {
                if (name == "all") {
                    for (auto s : all_scenarios()) {
                        if (std::find(scenarios.begin(), scenarios.end(), s) == scenarios.end()) scenarios.push_back(s);
                    }
                    continue;
                }
                auto s = parse_scenario(name);
                if (!s) throw UsageError(fmt::format("unknown scenario '{}'", name));
                if (std::find(scenarios.begin(), scenarios.end(), *s) == scenarios.end()) scenarios.push_back(*s);
            }
            if (bench_seeds == 0) throw UsageError("--seeds must be at least 1");
            BenchConfig config;
            config.seeds.clear();
            for (std::uint64_t s = 0; s < bench_seeds; ++s) config.seeds.push_back(s);
            const auto start = std::chrono::steady_clock::now();
            std::optional<std::filesystem::path> dir;
            if (!bench_ckpt.empty()) dir = bench_ckpt;
            const auto report = run_bench(config, scenarios, dir);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            const auto text = report.to_json().dump(2) + "\n";
            if (bench_out.empty()) {
                std::cout << text;
            } else {
                write_text(bench_out, text);
            }
            for (const auto& s : report.scenarios) {
                std::cerr << fmt::format("{:<14} mean macro-F1 {:.4f}\n", scenario_name(s.scenario), s.mean());
            }
            std::cerr << fmt::format("bench finished in {:.2f} s\n", secs);
            return 0;
        }
    } catch (const UsageError& e) {
        std::cerr << "vecmerge: error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const RecipeError& e) {
        std::cerr << "vecmerge: invalid recipe: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const ArchiveError& e) {
        std::cerr << "vecmerge: invalid archive: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const std::exception& e) {
        std::cerr << "vecmerge: error: " << e.what() << "\n";
        return kExitFailure;
    }
    return 0;
}
