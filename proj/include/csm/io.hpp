#pragma once

#include "csm/bootstrap.hpp"
#include "csm/estimation.hpp"
#include "csm/selection.hpp"
#include "csm/simulate.hpp"
#include "csm/types.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace csm::io {

using json = nlohmann::json;

/// Fixed 17 significant digits: deterministic and lossless.
inline std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        cells.push_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return cells;
}

/// Reads data lines, skipping blank lines and '#' comments. Line numbers are 1-based.
class CsvReader {
public:
    CsvReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

    bool next(std::vector<std::string_view>& cells) {
        while (std::getline(in_, buffer_)) {
            ++line_;
            if (line_ == 1 && buffer_.starts_with("\xEF\xBB\xBF")) buffer_.erase(0, 3);
            const auto t = trim(buffer_);
            if (t.empty() || t.front() == '#') continue;
            cells = split(t);
            return true;
        }
        return false;
    }

    std::size_t line() const noexcept { return line_; }
    const std::string& source() const noexcept { return source_; }

    [[noreturn]] void fail(const std::string& what) const { throw ParseError(source_, line_, what); }

    template <class Int>
    Int integer(std::string_view cell, const char* what) const {
        Int value{};
        const auto* end = cell.data() + cell.size();
        const auto [ptr, ec] = std::from_chars(cell.data(), end, value);
        if (cell.empty() || ec != std::errc() || ptr != end)
            fail(std::string(what) + " '" + std::string(cell) + "' is not a valid non-negative integer");
        return value;
    }

private:
    std::istream& in_;
    std::string source_;
    std::string buffer_;
    std::size_t line_ = 0;
};

inline std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Counts CSV: header t,c0,...,c{N-1}; one row per observed time.
// ---------------------------------------------------------------------------

inline CountSeries read_counts(std::istream& in, const std::string& source = "<counts>") {
    detail::CsvReader reader(in, source);
    std::vector<std::string_view> cells;
    if (!reader.next(cells)) throw DataError(source + ": empty counts file");
    if (cells.size() < 2 || cells[0] != "t") reader.fail("counts header must start with 't' followed by category columns");
    const std::size_t n = cells.size() - 1;
    for (std::size_t k = 0; k < n; ++k)
        if (cells[k + 1] != "c" + std::to_string(k))
            reader.fail("counts header column " + std::to_string(k + 2) + " should be 'c" + std::to_string(k) + "'");

    std::map<std::size_t, std::pair<std::size_t, std::vector<std::uint64_t>>> rows;  // t -> (line, counts)
    while (reader.next(cells)) {
        if (cells.size() != n + 1)
            reader.fail("expected " + std::to_string(n + 1) + " columns, found " + std::to_string(cells.size()));
        if (!cells[0].empty() && cells[0].front() == '-') reader.fail("negative time");
        const auto t = reader.integer<std::size_t>(cells[0], "time");
        std::vector<std::uint64_t> counts(n);
        for (std::size_t k = 0; k < n; ++k) {
            if (!cells[k + 1].empty() && cells[k + 1].front() == '-') reader.fail("negative count");
            counts[k] = reader.integer<std::uint64_t>(cells[k + 1], "count");
        }
        const auto [it, fresh] = rows.emplace(t, std::make_pair(reader.line(), std::move(counts)));
        if (!fresh)
            reader.fail("duplicate row for t=" + std::to_string(t) + " (first seen on line " +
                        std::to_string(it->second.first) + ")");
    }
    if (rows.empty()) throw DataError(source + ": counts file has no data rows");
    CountSeries series(n, rows.rbegin()->first + 1);
    for (const auto& [t, row] : rows)
        for (std::size_t k = 0; k < n; ++k) series.set(t, k, row.second[k]);
    return series;
}

inline CountSeries load_counts(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    return read_counts(in, path.string());
}

/// Every time point is written, missing ones as zero rows, so the horizon survives a round trip.
inline void write_counts(std::ostream& out, const CountSeries& counts) {
    out << 't';
    for (std::size_t k = 0; k < counts.n_categories(); ++k) out << ",c" << k;
    out << '\n';
    for (std::size_t t = 0; t < counts.horizon(); ++t) {
        out << t;
        for (std::size_t k = 0; k < counts.n_categories(); ++k) out << ',' << counts.count(t, k);
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Trajectory CSV: header id,t,k in long format.
// ---------------------------------------------------------------------------

/// Groups rows by id in order of first appearance. With n_categories = 0 the
/// category count is one more than the largest category seen.
inline TrajectorySet read_trajectories(std::istream& in, const std::string& source = "<trajectories>",
                                       std::size_t n_categories = 0) {
    detail::CsvReader reader(in, source);
    std::vector<std::string_view> cells;
    if (!reader.next(cells)) throw DataError(source + ": empty trajectory file");
    if (cells.size() != 3 || cells[0] != "id" || cells[1] != "t" || cells[2] != "k")
        reader.fail("trajectory header must be 'id,t,k'");

    struct Row {
        int t;
        int k;
        std::size_t line;
    };
    std::vector<std::string> ids;
    std::vector<std::vector<Row>> rows;
    std::unordered_map<std::string, std::size_t> index;
    int max_category = -1;
    while (reader.next(cells)) {
        if (cells.size() != 3) reader.fail("expected 3 columns, found " + std::to_string(cells.size()));
        if (cells[0].empty()) reader.fail("empty trajectory id");
        if (!cells[1].empty() && cells[1].front() == '-') reader.fail("negative time");
        const int t = reader.integer<int>(cells[1], "time");
        if (!cells[2].empty() && cells[2].front() == '-') reader.fail("category " + std::string(cells[2]) + " out of range");
        const int k = reader.integer<int>(cells[2], "category");
        if (n_categories > 0 && static_cast<std::size_t>(k) >= n_categories)
            reader.fail("category " + std::to_string(k) + " out of range [0, " + std::to_string(n_categories) + ")");
        max_category = std::max(max_category, k);
        const std::string id(cells[0]);
        auto [it, fresh] = index.emplace(id, ids.size());
        if (fresh) {
            ids.push_back(id);
            rows.emplace_back();
        }
        auto& bucket = rows[it->second];
        for (const Row& r : bucket)
            if (r.t == t)
                reader.fail("duplicate observation for id '" + id + "' at t=" + std::to_string(t) +
                            " (first seen on line " + std::to_string(r.line) + ")");
        bucket.push_back({t, k, reader.line()});
    }
    if (ids.empty()) throw DataError(source + ": no trajectories");

    std::vector<Trajectory> out;
    out.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto& bucket = rows[i];
        std::stable_sort(bucket.begin(), bucket.end(), [](const Row& a, const Row& b) { return a.t < b.t; });
        Trajectory tr{ids[i], {}, {}};
        for (const Row& r : bucket) {
            tr.times.push_back(r.t);
            tr.categories.push_back(r.k);
        }
        out.push_back(std::move(tr));
    }
    const std::size_t n = n_categories > 0 ? n_categories : static_cast<std::size_t>(max_category + 1);
    return TrajectorySet(n, std::move(out));
}

inline TrajectorySet load_trajectories(const std::filesystem::path& path, std::size_t n_categories = 0) {
    auto in = detail::open_input(path);
    return read_trajectories(in, path.string(), n_categories);
}

inline void write_trajectories(std::ostream& out, const TrajectorySet& theta) {
    out << "id,t,k\n";
    for (const auto& tr : theta)
        for (std::size_t s = 0; s < tr.size(); ++s) out << tr.id << ',' << tr.times[s] << ',' << tr.categories[s] << '\n';
}

// ---------------------------------------------------------------------------
// Fit JSON
// ---------------------------------------------------------------------------

inline std::string penalty_name(PenaltyKind kind) {
    switch (kind) {
        case PenaltyKind::none: return "none";
        case PenaltyKind::ridge_to_target: return "ridge";
        case PenaltyKind::structured_jump: return "structured";
    }
    return "none";
}

inline PenaltyKind parse_penalty(const std::string& name) {
    if (name == "none") return PenaltyKind::none;
    if (name == "ridge") return PenaltyKind::ridge_to_target;
    if (name == "structured") return PenaltyKind::structured_jump;
    throw DataError("unknown penalty '" + name + "' (expected none, ridge or structured)");
}

inline json to_json(const PenaltyConfig& p) {
    return {{"kind", penalty_name(p.kind)},
            {"lambda1", p.lambda1},
            {"lambda2", p.lambda2},
            {"jump_threshold", p.jump_threshold}};
}

inline json to_json(const CsmFit& fit) {
    const auto p0 = fit.trend(1).front();
    json restarts = json::array();
    for (const auto& r : fit.restarts)
        restarts.push_back({{"objective", r.objective},
                            {"evaluations", r.evaluations},
                            {"converged", r.converged},
                            {"used_fallback", r.used_fallback}});
    return {{"format", "csm-fit"},
            {"n_categories", fit.n_categories()},
            {"memory", fit.memory()},
            {"p0", p0.vector()},
            {"initial", fit.initial.vector()},
            {"kernel_layout", "kernel[xi*N + k] = P(next = k | xi), xi = sum_j x_{t-j} N^j"},
            {"kernel", std::vector<double>(fit.kernel.entries().begin(), fit.kernel.entries().end())},
            {"log_likelihood", fit.log_likelihood},
            {"objective", fit.objective},
            {"dof", fit.dof},
            {"penalty", to_json(fit.penalty)},
            {"best_restart", fit.best_restart},
            {"restarts", restarts}};
}

inline CsmFit fit_from_json(const json& j) {
    try {
        if (j.value("format", std::string()) != "csm-fit") throw DataError("not a fit file");
        const auto n = j.at("n_categories").get<std::size_t>();
        const auto memory = j.at("memory").get<std::size_t>();
        CsmFit fit;
        fit.initial = CategoricalDistribution(j.at("initial").get<std::vector<double>>());
        fit.kernel = TransitionKernel(n, memory, j.at("kernel").get<std::vector<double>>());
        if (fit.initial.size() != fit.kernel.n_conditions())
            throw DimensionMismatch("fit file initial state does not match its kernel");
        fit.log_likelihood = j.value("log_likelihood", 0.0);
        fit.objective = j.value("objective", fit.log_likelihood);
        fit.dof = j.value("dof", dof(n, memory));
        if (j.contains("penalty")) {
            const auto& p = j.at("penalty");
            fit.penalty.kind = parse_penalty(p.value("kind", std::string("none")));
            fit.penalty.lambda1 = p.value("lambda1", 0.0);
            fit.penalty.lambda2 = p.value("lambda2", 0.0);
            fit.penalty.jump_threshold = p.value("jump_threshold", std::size_t{1});
        }
        fit.best_restart = j.value("best_restart", std::size_t{0});
        return fit;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed fit file: ") + e.what());
    }
}

inline CsmFit load_fit(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    try {
        return fit_from_json(j);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Forecast and auxiliary tables
// ---------------------------------------------------------------------------

/// Rows t,k,p,lo,hi; without a band lo = hi = p.
inline void write_forecast(std::ostream& out, const std::vector<CategoricalDistribution>& trend,
                           const TrendBand* band = nullptr, std::size_t first_time = 0) {
    out << "t,k,p,lo,hi\n";
    for (std::size_t t = 0; t < trend.size(); ++t)
        for (std::size_t k = 0; k < trend[t].size(); ++k) {
            const double p = trend[t][k];
            const double lo = band ? band->lower[t][k] : p;
            const double hi = band ? band->upper[t][k] : p;
            out << t + first_time << ',' << k << ',' << format_double(p) << ',' << format_double(lo) << ','
                << format_double(hi) << '\n';
        }
}

/// Rows condition,k,p,lo,hi over kernel entries; condition is the Z-state index.
inline void write_kernel_band(std::ostream& out, const TrendBand& band) {
    const auto& kernel = band.kernel_point;
    const std::size_t n = kernel.n_categories();
    out << "condition,k,p,lo,hi\n";
    for (std::size_t xi = 0; xi < kernel.n_conditions(); ++xi)
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t i = xi * n + k;
            out << xi << ',' << k << ',' << format_double(kernel.entries()[i]) << ','
                << format_double(band.kernel_lower[i]) << ',' << format_double(band.kernel_upper[i]) << '\n';
        }
}

/// Rows t,x_t,...,x_{t+s},p,model_implied.
inline void write_joint_tables(std::ostream& out, const std::vector<JointTransitionTable>& tables, std::size_t n) {
    if (tables.empty()) return;
    const std::size_t steps = tables.front().steps;
    out << 't';
    for (std::size_t s = 0; s <= steps; ++s) out << ",x" << s;
    out << ",p,model_implied\n";
    for (const auto& tab : tables)
        for (std::size_t i = 0; i < tab.probs.size(); ++i) {
            out << tab.time;
            // index digits run from x_{t+steps} (fastest) back to x_t
            for (std::size_t s = 0; s <= steps; ++s) out << ',' << (i / ipow(n, steps - s)) % n;
            out << ',' << format_double(tab.probs[i]) << ',' << (tab.model_implied ? 1 : 0) << '\n';
        }
}

inline void write_scores(std::ostream& out, const std::vector<ModelScore>& scores) {
    const auto deltas = score_deltas(scores);
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    out << "model,dof,log_likelihood,fit_error,aic,bic,loocv,kfcv,tscv,d_aic,d_bic,d_loocv,d_kfcv,d_tscv\n";
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto& s = scores[i];
        const auto& d = deltas[i];
        out << s.model_label << ',' << s.dof << ',' << format_double(s.log_likelihood) << ','
            << format_double(s.fit_error) << ',' << format_double(s.aic) << ',' << format_double(s.bic) << ','
            << opt(s.loocv) << ',' << opt(s.kfcv) << ',' << opt(s.tscv) << ',' << format_double(d.aic) << ','
            << format_double(d.bic) << ',' << opt(d.loocv) << ',' << opt(d.kfcv) << ',' << opt(d.tscv) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

struct RunManifest {
    std::string command;
    std::vector<std::string> arguments;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    json options = json::object();
    std::uint64_t seed = 0;
    std::string version;
    double duration_seconds = 0.0;

    json to_json() const {
        return {{"command", command},           {"arguments", arguments}, {"inputs", inputs},
                {"outputs", outputs},           {"options", options},     {"seed", seed},
                {"version", version},           {"duration_seconds", duration_seconds}};
    }
};

inline std::filesystem::path manifest_path(const std::filesystem::path& output) {
    return std::filesystem::path(output.string() + ".manifest.json");
}

inline void write_manifest(const std::filesystem::path& output, const RunManifest& manifest) {
    auto out = detail::open_output(manifest_path(output));
    out << manifest.to_json().dump(2) << '\n';
}

/// Writes `content` to `path`; CSV outputs get a leading comment naming the manifest.
inline void write_output(const std::filesystem::path& path, const std::string& content, bool csv) {
    auto out = detail::open_output(path);
    if (csv) out << "# manifest: " << manifest_path(path).filename().string() << '\n';
    out << content;
    if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace csm::io
