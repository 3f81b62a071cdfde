#include "csm/csm.hpp"
#include "csm/generator_config.hpp"
#include "csm/io.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using csm::io::json;

struct DataFlags {
    std::string counts;
    std::string trajectories;
    std::string anonymised;
    std::size_t categories = 0;

    void attach(CLI::App* app) {
        app->add_option("--counts", counts, "cross-sectional counts CSV (t,c0,...)")->check(CLI::ExistingFile);
        app->add_option("--trajectories", trajectories, "longitudinal trajectories CSV (id,t,k)")
            ->check(CLI::ExistingFile);
        app->add_option("--anonymised", anonymised, "same-cohort counts CSV without identities")
            ->check(CLI::ExistingFile);
        app->add_option("--categories", categories, "number of categories (default: from the data)");
    }

    bool any() const { return !counts.empty() || !trajectories.empty() || !anonymised.empty(); }

    std::vector<std::string> paths() const {
        std::vector<std::string> p;
        for (const auto* s : {&counts, &trajectories, &anonymised})
            if (!s->empty()) p.push_back(*s);
        return p;
    }

    csm::DataSources load() const {
        if (!any()) throw csm::DataError("no input data: give --counts, --trajectories or --anonymised");
        csm::DataSources d;
        if (!counts.empty()) d.cross_sectional = csm::io::load_counts(counts);
        if (!anonymised.empty()) d.anonymised = csm::io::load_counts(anonymised);
        std::size_t n = categories;
        if (n == 0 && d.cross_sectional) n = d.cross_sectional->n_categories();
        if (n == 0 && d.anonymised) n = d.anonymised->n_categories();
        if (!trajectories.empty()) d.longitudinal = csm::io::load_trajectories(trajectories, n);
        if (categories > 0) {
            if (d.cross_sectional && d.cross_sectional->n_categories() != categories)
                throw csm::DimensionMismatch("--categories disagrees with the counts header");
            if (d.anonymised && d.anonymised->n_categories() != categories)
                throw csm::DimensionMismatch("--categories disagrees with the anonymised counts header");
        }
        d.n_categories();
        return d;
    }
};

struct ModelFlags {
    std::size_t memory = 0;
    std::string penalty = "none";
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    std::size_t jump_threshold = 1;
    std::size_t multistart = 10;
    std::size_t max_evaluations = 200000;
    double tolerance = 1e-10;

    void attach(CLI::App* app, bool with_memory = true) {
        if (with_memory) app->add_option("--memory", memory, "memory depth lambda");
        app->add_option("--penalty", penalty, "regularisation")
            ->check(CLI::IsMember({"none", "ridge", "structured"}));
        app->add_option("--lambda1", lambda1, "penalty strength");
        app->add_option("--lambda2", lambda2, "ridge target on the diagonal");
        app->add_option("--jump-threshold", jump_threshold, "structured penalty: largest free category jump");
        app->add_option("--multistart", multistart, "optimiser restarts");
        app->add_option("--max-evaluations", max_evaluations, "objective evaluation budget per restart");
        app->add_option("--tolerance", tolerance, "relative objective tolerance");
    }

    csm::FitOptions options(std::uint64_t seed, std::size_t threads) const {
        csm::FitOptions o;
        o.memory = memory;
        o.penalty.kind = csm::io::parse_penalty(penalty);
        o.penalty.lambda1 = lambda1;
        o.penalty.lambda2 = lambda2;
        o.penalty.jump_threshold = jump_threshold;
        o.multistart = multistart;
        o.max_evaluations = max_evaluations;
        o.rel_tolerance = tolerance;
        o.seed = seed;
        o.threads = threads;
        o.validate();
        return o;
    }
};

struct RunFlags {
    std::string out;
    std::uint64_t seed = 0;
    std::size_t threads = csm::default_threads();

    void attach(CLI::App* app) {
        app->add_option("--out", out, "output file (default: standard output)");
        app->add_option("--seed", seed, "random seed");
        app->add_option("--threads", threads, "worker threads (default: CSM_THREADS or 1)")
            ->check(CLI::PositiveNumber);
    }
};

/// Options of a subcommand as given, or their defaults.
json echo_options(const CLI::App* app) {
    json j = json::object();
    for (const CLI::Option* opt : app->get_options()) {
        if (opt->get_lnames().empty()) continue;
        const std::string& key = opt->get_lnames().front();
        if (key == "help") continue;
        if (opt->count() > 0) {
            const auto& r = opt->results();
            j[key] = r.size() == 1 ? json(r.front()) : json(r);
        } else {
            j[key] = opt->get_default_str();
        }
    }
    return j;
}

class Emitter {
public:
    Emitter(std::string command, const RunFlags& run, const CLI::App* app, std::vector<std::string> arguments)
        : start_(std::chrono::steady_clock::now()), run_(run) {
        manifest_.command = std::move(command);
        manifest_.arguments = std::move(arguments);
        manifest_.options = echo_options(app);
        manifest_.seed = run.seed;
        manifest_.version = CSM_VERSION;
    }

    void add_input(const std::string& p) { manifest_.inputs.push_back(p); }
    void add_inputs(const std::vector<std::string>& ps) {
        for (const auto& p : ps) add_input(p);
    }
    json& extra() { return manifest_.options["results"]; }

    bool to_file() const { return !run_.out.empty(); }
    std::string manifest_name() const { return csm::io::manifest_path(run_.out).filename().string(); }

    /// Main output; side outputs share the manifest.
    void emit(const std::string& content, bool csv) { emit_to(run_.out, content, csv); }
    void emit_side(const std::string& suffix, const std::string& content) {
        emit_to(run_.out + suffix, content, true);
    }

    void finish() {
        if (!to_file()) return;
        manifest_.duration_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        csm::io::write_manifest(run_.out, manifest_);
    }

private:
    void emit_to(const std::string& path, const std::string& content, bool csv) {
        if (path.empty()) {
            std::cout << content;
            std::cout.flush();
            return;
        }
        if (csv) {
            auto out = csm::io::detail::open_output(path);
            out << "# manifest: " << manifest_name() << '\n' << content;
            if (!out) throw csm::DataError("failed writing " + path);
        } else {
            csm::io::write_output(path, content, false);
        }
        manifest_.outputs.push_back(path);
    }

    std::chrono::steady_clock::time_point start_;
    const RunFlags& run_;
    csm::io::RunManifest manifest_;
};

std::vector<double> parse_distribution(const std::string& text) {
    std::vector<double> p;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            std::size_t used = 0;
            p.push_back(std::stod(cell, &used));
            if (used != cell.size()) throw std::invalid_argument(cell);
        } catch (const std::exception&) {
            throw csm::DataError("--start entry '" + cell + "' is not a number");
        }
    }
    return p;
}

std::size_t data_horizon(const csm::DataSources& d) { return csm::detail::data_horizon(d); }

void add_steady_state(json& j, const csm::CsmFit& fit) {
    try {
        j["steady_state"] = csm::steady_state(fit.kernel).vector();
    } catch (const csm::NumericalError& e) {
        j["steady_state"] = nullptr;
        j["steady_state_error"] = e.what();
    }
}

std::vector<csm::ModelRecipe> parse_models(const std::vector<std::string>& names, const ModelFlags& flags,
                                           std::uint64_t seed, std::size_t threads) {
    std::vector<csm::ModelRecipe> recipes;
    for (const auto& name : names) {
        if (name == "mlr") {
            recipes.push_back(csm::mlr_recipe("mlr"));
            continue;
        }
        if (name.size() < 4 || name.rfind("csm", 0) != 0)
            throw csm::DataError("unknown model '" + name + "' (expected csm<memory> or mlr)");
        std::size_t memory = 0;
        try {
            std::size_t used = 0;
            memory = std::stoul(name.substr(3), &used);
            if (used != name.size() - 3) throw std::invalid_argument(name);
        } catch (const std::exception&) {
            throw csm::DataError("unknown model '" + name + "' (expected csm<memory> or mlr)");
        }
        ModelFlags f = flags;
        f.memory = memory;
        recipes.push_back(csm::csm_recipe(name, f.options(seed, threads)));
    }
    if (recipes.empty()) throw csm::DataError("no models to compare");
    return recipes;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Categorical state models: estimation, selection, forecasting and simulation"};
    app.set_version_flag("--version", CSM_VERSION);
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    const std::vector<std::string> arguments(argv + 1, argv + argc);

    DataFlags data;
    ModelFlags model;
    RunFlags run;

    auto* fit = app.add_subcommand("fit", "estimate initial state and kernel, write JSON");
    data.attach(fit);
    model.attach(fit);
    run.attach(fit);

    std::string fit_file;
    std::size_t horizon = 0;
    std::size_t joint_steps = 0;
    auto* forecast = app.add_subcommand("forecast", "trend table t,k,p,lo,hi from a fit file or fresh fit");
    data.attach(forecast);
    model.attach(forecast);
    run.attach(forecast);
    forecast->add_option("--fit", fit_file, "fit JSON to forecast from")->check(CLI::ExistingFile);
    forecast->add_option("--horizon", horizon, "number of time points (default: data horizon)");
    forecast->add_option("--joint-steps", joint_steps, "also write joint transition tables over this many steps");

    std::vector<std::string> models{"csm0", "csm1"};
    csm::CvOptions cv;
    bool no_cv = false;
    bool unweighted = false;
    auto* select = app.add_subcommand("select", "score candidate models by AIC, BIC and cross-validation");
    data.attach(select);
    model.attach(select, false);
    run.attach(select);
    select->add_option("--models", models, "comma-separated list of csm<memory> and mlr")->delimiter(',');
    select->add_option("--folds", cv.folds, "k-fold cross-validation folds");
    select->add_option("--iterations", cv.iterations, "k-fold repetitions");
    select->add_flag("--no-cv", no_cv, "information criteria only");
    select->add_flag("--unweighted", unweighted, "score cross-sectional folds without sample-size weights");

    csm::BootstrapConfig boot;
    auto* bootstrap = app.add_subcommand("bootstrap", "fit plus resampled confidence bands");
    data.attach(bootstrap);
    model.attach(bootstrap);
    run.attach(bootstrap);
    bootstrap->add_option("--replicates", boot.replicates, "bootstrap replicates");
    bootstrap->add_option("--alpha", boot.alpha, "confidence level");
    bootstrap->add_option("--horizon", boot.horizon, "extrapolated time points (default: data horizon)");

    std::string generator;
    std::optional<std::size_t> sim_size, sim_length;
    auto* simulate = app.add_subcommand("simulate", "generate synthetic trajectories from a TOML generator");
    run.attach(simulate);
    simulate->add_option("--generator", generator, "generator TOML")->required()->check(CLI::ExistingFile);
    simulate->add_option("--size", sim_size, "override the number of trajectories");
    simulate->add_option("--length", sim_length, "override the trajectory length");

    std::vector<std::string> bracket_fits;
    std::size_t bracket_length = 1;
    std::string start;
    auto* cohort = app.add_subcommand("cohort", "age-bracket projection from memoryless fits");
    run.attach(cohort);
    cohort->add_option("--fit", bracket_fits, "bracket fit JSON files in age order")
        ->required()
        ->check(CLI::ExistingFile);
    cohort->add_option("--bracket-length", bracket_length, "years per bracket")->check(CLI::PositiveNumber);
    cohort->add_option("--horizon", horizon, "years projected")->required();
    cohort->add_option("--start", start, "comma-separated start distribution (default: first fit's p0)");

    auto* reduce = app.add_subcommand("reduce", "count trajectories into a cross-sectional series");
    run.attach(reduce);
    reduce->add_option("--trajectories", data.trajectories, "trajectories CSV")->required()->check(CLI::ExistingFile);
    reduce->add_option("--categories", data.categories, "number of categories (default: from the data)");
    reduce->add_option("--horizon", horizon, "number of time points (default: last observed + 1)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (fit->parsed()) {
            Emitter em("fit", run, fit, arguments);
            em.add_inputs(data.paths());
            const auto d = data.load();
            const auto f = csm::fit_csm(d, model.options(run.seed, run.threads));
            auto j = csm::io::to_json(f);
            add_steady_state(j, f);
            if (em.to_file()) j["manifest"] = em.manifest_name();
            em.emit(j.dump(2) + "\n", false);
            em.finish();
        } else if (forecast->parsed()) {
            Emitter em("forecast", run, forecast, arguments);
            csm::CsmFit f;
            std::size_t h = horizon;
            if (!fit_file.empty()) {
                if (data.any()) throw csm::DataError("give either --fit or data inputs, not both");
                if (h == 0) throw csm::DataError("--horizon is required with --fit");
                em.add_input(fit_file);
                f = csm::io::load_fit(fit_file);
            } else {
                em.add_inputs(data.paths());
                const auto d = data.load();
                f = csm::fit_csm(d, model.options(run.seed, run.threads));
                if (h == 0) h = data_horizon(d);
            }
            std::ostringstream os;
            csm::io::write_forecast(os, f.trend(h));
            em.emit(os.str(), true);
            if (joint_steps > 0) {
                if (!em.to_file()) throw csm::DataError("--joint-steps needs --out");
                std::ostringstream js;
                csm::io::write_joint_tables(js, csm::joint_transition_probabilities(f, h, joint_steps),
                                            f.n_categories());
                em.emit_side(".joint.csv", js.str());
            }
            em.finish();
        } else if (select->parsed()) {
            Emitter em("select", run, select, arguments);
            em.add_inputs(data.paths());
            const auto d = data.load();
            cv.seed = run.seed;
            cv.threads = run.threads;
            cv.weighted = !unweighted;
            csm::SelectionOptions so{cv, !no_cv, !no_cv, !no_cv};
            const auto scores = csm::compare_models(d, parse_models(models, model, run.seed, 1), so);
            std::ostringstream os;
            csm::io::write_scores(os, scores);
            em.emit(os.str(), true);
            em.finish();
        } else if (bootstrap->parsed()) {
            Emitter em("bootstrap", run, bootstrap, arguments);
            em.add_inputs(data.paths());
            const auto d = data.load();
            boot.seed = run.seed;
            boot.threads = run.threads;
            const auto res = csm::bootstrap_pipeline(d, model.options(run.seed, 1), boot);
            std::ostringstream os;
            csm::io::write_forecast(os, res.band.point, &res.band);
            em.emit(os.str(), true);
            if (em.to_file()) {
                std::ostringstream ks;
                csm::io::write_kernel_band(ks, res.band);
                em.emit_side(".kernel.csv", ks.str());
            }
            em.extra()["failed_replicates"] = res.failed_replicates;
            em.finish();
        } else if (simulate->parsed()) {
            Emitter em("simulate", run, simulate, arguments);
            em.add_input(generator);
            auto spec = csm::load_generator(generator);
            if (simulate->count("--seed") > 0) spec.seed = run.seed;
            if (sim_size) spec.n_trajectories = *sim_size;
            if (sim_length) spec.length = *sim_length;
            const auto theta = csm::generate_synthetic(spec, run.threads);
            std::ostringstream os;
            csm::io::write_trajectories(os, theta);
            em.extra()["generator_seed"] = spec.seed;
            em.emit(os.str(), true);
            em.finish();
        } else if (cohort->parsed()) {
            Emitter em("cohort", run, cohort, arguments);
            csm::CohortSpec spec;
            spec.bracket_length = bracket_length;
            spec.horizon = horizon;
            std::optional<csm::CategoricalDistribution> first_p0;
            for (const auto& path : bracket_fits) {
                em.add_input(path);
                const auto f = csm::io::load_fit(path);
                if (!first_p0) first_p0 = f.trend(1).front();
                spec.bracket_kernels.push_back(f.kernel);
            }
            spec.start = start.empty() ? *first_p0 : csm::CategoricalDistribution(parse_distribution(start));
            std::ostringstream os;
            csm::io::write_forecast(os, csm::cohort_project(spec));
            em.emit(os.str(), true);
            em.finish();
        } else if (reduce->parsed()) {
            Emitter em("reduce", run, reduce, arguments);
            em.add_input(data.trajectories);
            const auto theta = csm::io::load_trajectories(data.trajectories, data.categories);
            const auto counts = horizon > 0 ? csm::reduce_to_cross_sectional(theta, horizon)
                                            : csm::reduce_to_cross_sectional(theta);
            std::ostringstream os;
            csm::io::write_counts(os, counts);
            em.emit(os.str(), true);
            em.finish();
        }
    } catch (const csm::DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const csm::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
