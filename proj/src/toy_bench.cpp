// SPDX-License-Identifier: Apache-2.0

#include "vecmerge/toy_bench.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <fmt/core.h>

#include "vecmerge/parallel.hpp"
#include "vecmerge/recipe.hpp"
#include "vecmerge/ties.hpp"
#include "vecmerge/tv_algebra.hpp"

namespace vecmerge {

namespace {

constexpr const char* kW0 = "layer0.weight";
constexpr const char* kB0 = "layer0.bias";
constexpr const char* kW1 = "layer1.weight";
constexpr const char* kB1 = "layer1.bias";

// Unpacked F64 parameters; the hot loops work on these rather than on archive bytes.
struct Params {
    ModelSpec spec;
    std::vector<double> w0, b0, w1, b1;

    static Params from(const Checkpoint& model) {
        Params p;
        p.spec = spec_of(model);
        p.w0 = model.tensors.at(kW0).to_f64();
        p.b0 = model.tensors.at(kB0).to_f64();
        p.w1 = model.tensors.at(kW1).to_f64();
        p.b1 = model.tensors.at(kB1).to_f64();
        return p;
    }

    Checkpoint to_checkpoint(std::map<std::string, std::string> metadata) const {
        const auto d = spec.input_dim, h = spec.hidden_dim, c = spec.class_count;
        Checkpoint out;
        out.metadata = std::move(metadata);
        out.tensors.emplace(kB0, Tensor::from_f64(DType::F64, {h}, b0));
        out.tensors.emplace(kW0, Tensor::from_f64(DType::F64, {h, d}, w0));
        out.tensors.emplace(kB1, Tensor::from_f64(DType::F64, {c}, b1));
        out.tensors.emplace(kW1, Tensor::from_f64(DType::F64, {c, h}, w1));
        return out;
    }
};

void check_width(const Params& p, const Dataset& data) {
    if (data.dim != p.spec.input_dim) {
        throw std::invalid_argument(
            fmt::format("dataset width {} does not match model input dim {}", data.dim, p.spec.input_dim));
    }
}

// Hidden pre-activations and logits for one sample.
void forward_one(const Params& p, std::span<const double> x, std::span<double> a, std::span<double> z) {
    const auto d = p.spec.input_dim, h = p.spec.hidden_dim, c = p.spec.class_count;
    for (std::size_t j = 0; j < h; ++j) {
        double s = p.b0[j];
        const double* w = p.w0.data() + j * d;
        for (std::size_t i = 0; i < d; ++i) s += w[i] * x[i];
        a[j] = s;
    }
    for (std::size_t k = 0; k < c; ++k) {
        double s = p.b1[k];
        const double* w = p.w1.data() + k * h;
        for (std::size_t j = 0; j < h; ++j) s += w[j] * std::max(a[j], 0.0);
        z[k] = s;
    }
}

double loss_and_grads(const Params& p, const Dataset& data, Params* g) {
    check_width(p, data);
    const auto d = p.spec.input_dim, h = p.spec.hidden_dim, c = p.spec.class_count;
    const std::size_t n = data.size();
    if (n == 0) throw std::invalid_argument("cannot compute a loss over an empty dataset");
    if (g != nullptr) {
        g->spec = p.spec;
        g->w0.assign(h * d, 0.0);
        g->b0.assign(h, 0.0);
        g->w1.assign(c * h, 0.0);
        g->b1.assign(c, 0.0);
    }
    std::vector<double> a(h), z(c), dz(c), da(h);
    const double inv_n = 1.0 / static_cast<double>(n);
    double loss = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        const auto x = data.row(s);
        const int y = data.labels[s];
        forward_one(p, x, a, z);
        const double zmax = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            dz[k] = std::exp(z[k] - zmax);
            sum += dz[k];
        }
        loss -= z[y] - zmax - std::log(sum);
        if (g == nullptr) continue;

        for (std::size_t k = 0; k < c; ++k) dz[k] = (dz[k] / sum - (static_cast<int>(k) == y ? 1.0 : 0.0)) * inv_n;
        std::fill(da.begin(), da.end(), 0.0);
        for (std::size_t k = 0; k < c; ++k) {
            g->b1[k] += dz[k];
            double* gw = g->w1.data() + k * h;
            const double* w = p.w1.data() + k * h;
            for (std::size_t j = 0; j < h; ++j) {
                gw[j] += dz[k] * std::max(a[j], 0.0);
                da[j] += dz[k] * w[j];
            }
        }
        for (std::size_t j = 0; j < h; ++j) {
            if (!(a[j] > 0.0)) continue;
            g->b0[j] += da[j];
            double* gw = g->w0.data() + j * d;
            for (std::size_t i = 0; i < d; ++i) gw[i] += da[j] * x[i];
        }
    }
    return loss * inv_n;
}

std::vector<double> class_mean(DataKind kind, std::size_t k, std::size_t d) {
    std::vector<double> mu(d, 0.0);
    mu[k % d] = kind == DataKind::L2 ? -2.0 : 2.0;
    return mu;
}

constexpr double kNoise = 0.5;

}  // namespace

std::uint64_t Prng::next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Prng::uniform() { return static_cast<double>(next() >> 11) * 0x1p-53; }

double Prng::gaussian() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag) {
    Prng p(seed);
    for (std::uint64_t i = 0; i < tag; ++i) p.next();
    return p.next();
}

void ModelSpec::validate() const {
    if (input_dim < 1 || hidden_dim < 1 || class_count < 1) {
        throw std::invalid_argument(
            fmt::format("model dims must be >= 1 (got d={}, h={}, c={})", input_dim, hidden_dim, class_count));
    }
}

ModelSpec spec_of(const Checkpoint& model) {
    auto get = [&](const char* name) -> const Tensor& {
        auto it = model.tensors.find(name);
        if (it == model.tensors.end()) throw std::invalid_argument(fmt::format("model is missing '{}'", name));
        if (it->second.dtype() != DType::F64) throw std::invalid_argument(fmt::format("'{}' must be F64", name));
        return it->second;
    };
    if (model.tensors.size() != 4) {
        throw std::invalid_argument(fmt::format("model must hold exactly 4 tensors, found {}", model.tensors.size()));
    }
    const auto& w0 = get(kW0);
    const auto& b0 = get(kB0);
    const auto& w1 = get(kW1);
    const auto& b1 = get(kB1);
    if (w0.shape().size() != 2 || w1.shape().size() != 2) throw std::invalid_argument("weights must be 2-D");
    ModelSpec spec{w0.shape()[1], w0.shape()[0], w1.shape()[0]};
    if (b0.shape() != Shape{spec.hidden_dim} || w1.shape()[1] != spec.hidden_dim ||
        b1.shape() != Shape{spec.class_count}) {
        throw std::invalid_argument("model tensor shapes are inconsistent");
    }
    spec.validate();
    return spec;
}

Dataset gen_dataset(DataKind kind, std::size_t n, const ModelSpec& spec, std::uint64_t seed, Split split) {
    spec.validate();
    const auto d = spec.input_dim, c = spec.class_count;
    if (n < c) throw std::invalid_argument(fmt::format("need at least {} samples for {} classes, got {}", c, c, n));
    Prng prng(seed);
    Dataset out;
    out.dim = d;
    out.split = split;
    out.features.resize(n * d);
    out.labels.resize(n);
    std::vector<double> x1(d), x2(d);
    for (std::size_t s = 0; s < n; ++s) {
        const std::size_t k = s % c;
        out.labels[s] = static_cast<int>(k);
        double* row = out.features.data() + s * d;
        if (kind == DataKind::mixed) {
            const double alpha = 0.3 + 0.4 * prng.uniform();
            const auto m1 = class_mean(DataKind::L1, k, d);
            const auto m2 = class_mean(DataKind::L2, k, d);
            for (std::size_t j = 0; j < d; ++j) x1[j] = m1[j] + kNoise * prng.gaussian();
            for (std::size_t j = 0; j < d; ++j) x2[j] = m2[j] + kNoise * prng.gaussian();
            for (std::size_t j = 0; j < d; ++j) row[j] = alpha * x1[j] + (1.0 - alpha) * x2[j];
        } else {
            const auto mu = class_mean(kind, k, d);
            for (std::size_t j = 0; j < d; ++j) row[j] = mu[j] + kNoise * prng.gaussian();
        }
    }
    return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.dim != b.dim) throw std::invalid_argument("cannot concatenate datasets of different width");
    Dataset out = a;
    out.features.insert(out.features.end(), b.features.begin(), b.features.end());
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    return out;
}

Checkpoint init_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    const auto d = spec.input_dim, h = spec.hidden_dim, c = spec.class_count;
    Prng prng(seed);
    Params p;
    p.spec = spec;
    p.b0.assign(h, 0.0);
    p.w0.resize(h * d);
    for (auto& w : p.w0) w = 0.1 * prng.gaussian();
    p.b1.assign(c, 0.0);
    p.w1.resize(c * h);
    for (auto& w : p.w1) w = 0.1 * prng.gaussian();
    return p.to_checkpoint({});
}

std::vector<double> forward(const Checkpoint& model, const Dataset& data) {
    const auto p = Params::from(model);
    check_width(p, data);
    const auto c = p.spec.class_count;
    std::vector<double> a(p.spec.hidden_dim);
    std::vector<double> logits(data.size() * c);
    for (std::size_t s = 0; s < data.size(); ++s) {
        forward_one(p, data.row(s), a, std::span<double>(logits.data() + s * c, c));
    }
    return logits;
}

std::vector<double> softmax_rows(std::span<const double> logits, std::size_t classes) {
    if (classes == 0 || logits.size() % classes != 0) throw std::invalid_argument("logits are not n x classes");
    std::vector<double> out(logits.size());
    for (std::size_t r = 0; r < logits.size(); r += classes) {
        const double zmax = *std::max_element(logits.begin() + r, logits.begin() + r + classes);
        double sum = 0.0;
        for (std::size_t k = 0; k < classes; ++k) sum += out[r + k] = std::exp(logits[r + k] - zmax);
        for (std::size_t k = 0; k < classes; ++k) out[r + k] /= sum;
    }
    return out;
}

double loss_and_gradients(const Checkpoint& model, const Dataset& data, Gradients* grads) {
    const auto p = Params::from(model);
    if (grads == nullptr) return loss_and_grads(p, data, nullptr);
    Params g;
    const double loss = loss_and_grads(p, data, &g);
    grads->clear();
    grads->emplace(kB0, std::move(g.b0));
    grads->emplace(kW0, std::move(g.w0));
    grads->emplace(kB1, std::move(g.b1));
    grads->emplace(kW1, std::move(g.w1));
    return loss;
}

Checkpoint train(const Checkpoint& model, const Dataset& data, const TrainConfig& config) {
    if (!std::isfinite(config.learning_rate) || config.learning_rate < 0.0) {
        throw std::invalid_argument(fmt::format("learning rate {} is not a finite non-negative number",
                                                config.learning_rate));
    }
    if (data.split != Split::train) throw std::invalid_argument("training data must be a train split");
    if (config.epochs == 0) return model;
    auto p = Params::from(model);
    Params g;
    const double lr = config.learning_rate;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double loss = loss_and_grads(p, data, &g);
        if (!std::isfinite(loss)) throw TrainingError(fmt::format("training diverged at epoch {}", epoch), epoch);
        // name order: layer0.bias, layer0.weight, layer1.bias, layer1.weight
        for (auto [param, grad] : {std::pair{&p.b0, &g.b0}, {&p.w0, &g.w0}, {&p.b1, &g.b1}, {&p.w1, &g.w1}}) {
            for (std::size_t i = 0; i < param->size(); ++i) (*param)[i] -= lr * (*grad)[i];
        }
    }
    return p.to_checkpoint(model.metadata);
}

std::vector<int> predict(const Checkpoint& model, const Dataset& data) {
    const auto c = spec_of(model).class_count;
    const auto logits = forward(model, data);
    std::vector<int> out(data.size());
    for (std::size_t s = 0; s < data.size(); ++s) {
        const auto row = logits.begin() + static_cast<std::ptrdiff_t>(s * c);
        out[s] = static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(c)) - row);
    }
    return out;
}

double macro_f1(std::span<const int> predictions, std::span<const int> truth, std::size_t classes) {
    if (predictions.size() != truth.size()) {
        throw std::invalid_argument(
            fmt::format("{} predictions for {} labels", predictions.size(), truth.size()));
    }
    if (classes == 0) throw std::invalid_argument("class count must be >= 1");
    std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int p = predictions[i], t = truth[i];
        if (p < 0 || t < 0 || static_cast<std::size_t>(p) >= classes || static_cast<std::size_t>(t) >= classes) {
            throw std::invalid_argument(fmt::format("label out of range [0, {})", classes));
        }
        if (p == t) {
            ++tp[p];
        } else {
            ++fp[p];
            ++fn[t];
        }
    }
    double total = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
        const double prec = tp[k] + fp[k] ? static_cast<double>(tp[k]) / static_cast<double>(tp[k] + fp[k]) : 0.0;
        const double rec = tp[k] + fn[k] ? static_cast<double>(tp[k]) / static_cast<double>(tp[k] + fn[k]) : 0.0;
        if (prec + rec > 0.0) total += 2.0 * prec * rec / (prec + rec);
    }
    return total / static_cast<double>(classes);
}

std::string_view scenario_name(Scenario scenario) {
    switch (scenario) {
        case Scenario::full_ft: return "full_ft";
        case Scenario::seq_ft: return "seq_ft";
        case Scenario::joint_ft: return "joint_ft";
        case Scenario::tv_merge_ft: return "tv_merge_ft";
        case Scenario::ties_merge_ft: return "ties_merge_ft";
    }
    return "?";
}

std::optional<Scenario> parse_scenario(std::string_view text) {
    for (auto s : all_scenarios()) {
        if (scenario_name(s) == text) return s;
    }
    return std::nullopt;
}

std::vector<Scenario> all_scenarios() {
    return {Scenario::full_ft, Scenario::seq_ft, Scenario::joint_ft, Scenario::tv_merge_ft, Scenario::ties_merge_ft};
}

std::vector<double> BenchConfig::lambdas() const { return lambda_grid.empty() ? default_lambda_grid() : lambda_grid; }

nlohmann::json BenchConfig::to_json() const {
    return {{"input_dim", spec.input_dim},
            {"hidden_dim", spec.hidden_dim},
            {"class_count", spec.class_count},
            {"n_target", n_target},
            {"n_aux", n_aux},
            {"n_dev", n_dev},
            {"n_test", n_test},
            {"learning_rate", learning_rate},
            {"pretrain_epochs", pretrain_epochs},
            {"aux_epochs", aux_epochs},
            {"ft_epochs", ft_epochs},
            {"ties_density", ties_density},
            {"lambda_grid", lambdas()},
            {"seeds", seeds}};
}

double ScenarioReport::mean() const {
    if (seeds.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : seeds) s += r.test_f1;
    return s / static_cast<double>(seeds.size());
}

nlohmann::json ScenarioReport::to_json() const {
    nlohmann::json j;
    j["scenario"] = scenario_name(scenario);
    j["mean_macro_f1"] = mean();
    j["per_seed"] = nlohmann::json::array();
    for (const auto& r : seeds) {
        nlohmann::json row{{"seed", r.seed}, {"test_macro_f1", r.test_f1}};
        if (r.lambda) row["lambda"] = *r.lambda;
        if (r.dev_f1) row["dev_macro_f1"] = *r.dev_f1;
        j["per_seed"].push_back(std::move(row));
    }
    return j;
}

const ScenarioReport& BenchReport::at(Scenario scenario) const {
    for (const auto& s : scenarios) {
        if (s.scenario == scenario) return s;
    }
    throw std::out_of_range(fmt::format("scenario {} was not run", scenario_name(scenario)));
}

nlohmann::json BenchReport::to_json() const {
    nlohmann::json j;
    j["config"] = config.to_json();
    j["scenarios"] = nlohmann::json::array();
    for (const auto& s : scenarios) j["scenarios"].push_back(s.to_json());
    return j;
}

namespace {

// Stream tags for stream_seed(seed, tag).
enum StreamTag : std::uint64_t { kInit = 0, kPretrainL1, kPretrainL2, kAuxTask, kTarget, kDev, kTest };

std::vector<SeedResult> run_seed(const BenchConfig& cfg, std::uint64_t seed, std::span<const Scenario> scenarios,
                                 const std::optional<std::filesystem::path>& dir) {
    const auto& spec = cfg.spec;
    const TrainConfig pretrain{cfg.learning_rate, cfg.pretrain_epochs, seed};
    const TrainConfig aux{cfg.learning_rate, cfg.aux_epochs, seed};
    const TrainConfig ft{cfg.learning_rate, cfg.ft_epochs, seed};

    std::optional<std::filesystem::path> seed_dir;
    if (dir) {
        seed_dir = *dir / fmt::format("seed{}", seed);
        std::filesystem::create_directories(*seed_dir);
    }
    auto save = [&](const Checkpoint& ckpt, std::string_view name) {
        if (seed_dir) save_archive(ckpt, *seed_dir / fmt::format("{}.safetensors", name));
    };

    const auto init = init_model(spec, stream_seed(seed, kInit));
    const auto pre = concat(gen_dataset(DataKind::L1, cfg.n_aux, spec, stream_seed(seed, kPretrainL1)),
                            gen_dataset(DataKind::L2, cfg.n_aux, spec, stream_seed(seed, kPretrainL2)));
    const auto theta = train(init, pre, pretrain);
    const auto aux_data = gen_dataset(DataKind::L1, cfg.n_aux, spec, stream_seed(seed, kAuxTask));
    const auto theta_aux = train(theta, aux_data, aux);
    const auto tau = extract_task_vector(theta, theta_aux).vector;
    save(theta, "theta");
    save(theta_aux, "theta_aux");
    save(to_checkpoint(tau), "tau_aux");

    const auto target = gen_dataset(DataKind::mixed, cfg.n_target, spec, stream_seed(seed, kTarget));
    const auto dev = gen_dataset(DataKind::mixed, cfg.n_dev, spec, stream_seed(seed, kDev), Split::dev);
    const auto test = gen_dataset(DataKind::mixed, cfg.n_test, spec, stream_seed(seed, kTest), Split::test);
    const auto c = spec.class_count;
    auto score = [&](const Checkpoint& m, const Dataset& data) { return macro_f1(predict(m, data), data.labels, c); };

    auto merged_ft = [&](Scenario s, SeedResult& r) {
        MetricsTable table;
        std::vector<Checkpoint> models;
        for (double lambda : cfg.lambdas()) {
            Checkpoint merged;
            if (s == Scenario::tv_merge_ft) {
                const WeightedVector wv{std::cref(tau), lambda};
                merged = tv_merge(theta, std::span(&wv, 1));
            } else {
                merged = ties_merge(theta, std::span(&tau, 1), TiesConfig{cfg.ties_density, {1.0}, lambda}).merged;
            }
            models.push_back(train(merged, target, ft));
            table.push_back({{{"lambda", lambda}}, score(models.back(), dev)});
        }
        const auto best = select_best(table);
        for (std::size_t i = 0; i < table.size(); ++i) {
            if (table[i].assignment != best) continue;
            r.lambda = best.at("lambda");
            r.dev_f1 = table[i].metric;
            r.test_f1 = score(models[i], test);
            return models[i];
        }
        throw std::logic_error("selected lambda missing from sweep");
    };

    std::vector<SeedResult> out;
    for (auto s : scenarios) {
        SeedResult r;
        r.seed = seed;
        Checkpoint final_model;
        switch (s) {
            case Scenario::full_ft: final_model = train(theta, target, ft); break;
            case Scenario::seq_ft: final_model = train(theta_aux, target, ft); break;
            case Scenario::joint_ft: final_model = train(theta, concat(aux_data, target), ft); break;
            case Scenario::tv_merge_ft:
            case Scenario::ties_merge_ft: final_model = merged_ft(s, r); break;
        }
        if (!r.lambda) r.test_f1 = score(final_model, test);
        save(final_model, scenario_name(s));
        out.push_back(r);
    }
    return out;
}

}  // namespace

BenchReport run_bench(const BenchConfig& config, std::span<const Scenario> scenarios,
                      const std::optional<std::filesystem::path>& checkpoint_dir) {
    config.spec.validate();
    if (config.seeds.empty()) throw std::invalid_argument("bench needs at least one seed");
    if (scenarios.empty()) throw std::invalid_argument("bench needs at least one scenario");
    std::vector<std::vector<SeedResult>> per_seed(config.seeds.size());
    parallel_tasks(config.seeds.size(), [&](std::size_t i) {
        per_seed[i] = run_seed(config, config.seeds[i], scenarios, checkpoint_dir);
    });
    BenchReport report;
    report.config = config;
    for (std::size_t k = 0; k < scenarios.size(); ++k) {
        ScenarioReport sr;
        sr.scenario = scenarios[k];
        for (const auto& results : per_seed) sr.seeds.push_back(results[k]);
        report.scenarios.push_back(std::move(sr));
    }
    return report;
}

ScenarioReport run_scenario(Scenario scenario, const BenchConfig& config) {
    const Scenario one[] = {scenario};
    return run_bench(config, one).scenarios.front();
}

}  // namespace vecmerge
