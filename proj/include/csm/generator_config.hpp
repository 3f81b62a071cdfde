#pragma once

#include "csm/simulate.hpp"
#include "csm/types.hpp"

#include <toml.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace csm {

namespace detail {

inline std::vector<double> toml_reals(const toml::array& arr, const std::string& what) {
    std::vector<double> out;
    out.reserve(arr.size());
    for (const auto& v : arr) {
        const auto x = v.value<double>();
        if (!x) throw DataError(what + " must contain only numbers");
        out.push_back(*x);
    }
    return out;
}

template <class T>
T toml_required(const toml::table& t, const char* key) {
    const auto v = t[key].value<T>();
    if (!v) throw DataError(std::string("generator config: missing or invalid '") + key + "'");
    return *v;
}

}  // namespace detail

/**
 * Generator config keys:
 *   categories, memory, trajectories, length, seed   integers
 *   initial   flat distribution over Z-states (index sum_j x_{-j} N^j)
 *   kernel    one row per conditioning Z-state, in index order; row k-th entry is P(next = k | state)
 */
inline GeneratorSpec parse_generator(const toml::table& t) {
    const auto n = detail::toml_required<std::int64_t>(t, "categories");
    const auto memory = t["memory"].value_or<std::int64_t>(0);
    const auto q = detail::toml_required<std::int64_t>(t, "trajectories");
    const auto length = detail::toml_required<std::int64_t>(t, "length");
    const auto seed = t["seed"].value_or<std::int64_t>(0);
    if (n < 1 || memory < 0 || q < 0 || length < 0 || seed < 0)
        throw DataError("generator config: integer fields must be non-negative (categories positive)");

    const auto* initial = t["initial"].as_array();
    if (!initial) throw DataError("generator config: missing 'initial' array");
    const auto* rows = t["kernel"].as_array();
    if (!rows) throw DataError("generator config: missing 'kernel' array of rows");

    const auto nn = static_cast<std::size_t>(n);
    std::vector<double> entries;
    for (const auto& row : *rows) {
        const auto* r = row.as_array();
        if (!r) throw DataError("generator config: every kernel row must be an array");
        const auto values = detail::toml_reals(*r, "kernel row");
        if (values.size() != nn)
            throw DimensionMismatch("generator config: kernel row has " + std::to_string(values.size()) +
                                    " entries, expected " + std::to_string(nn));
        entries.insert(entries.end(), values.begin(), values.end());
    }
    GeneratorSpec spec{CategoricalDistribution(detail::toml_reals(*initial, "initial")),
                       TransitionKernel(nn, static_cast<std::size_t>(memory), std::move(entries)),
                       static_cast<std::size_t>(q), static_cast<std::size_t>(length),
                       static_cast<std::uint64_t>(seed)};
    spec.validate();
    return spec;
}

inline GeneratorSpec load_generator(const std::filesystem::path& path) {
    try {
        return parse_generator(toml::parse_file(path.string()));
    } catch (const toml::parse_error& e) {
        throw DataError(path.string() + ": " + std::string(e.description()));
    }
}

}  // namespace csm
