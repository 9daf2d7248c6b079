#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "statesel/types.hpp"

namespace statesel::json_io {

using nlohmann::json;

inline json to_json(const Vector& v) { return std::vector<double>(v.begin(), v.end()); }

inline json to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
        rows.push_back(row);
    }
    return rows;
}

inline Vector vector_from(const json& j, const std::string& what) {
    if (!j.is_array()) throw ConfigError(what + ": expected an array of numbers");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw ConfigError(what + ": expected numbers");
        v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    }
    return v;
}

/// Accepts [[...],[...]] or, for a single row, a flat array.
inline Matrix matrix_from(const json& j, const std::string& what) {
    if (!j.is_array()) throw ConfigError(what + ": expected a matrix");
    if (j.empty()) return Matrix(0, 0);
    if (!j.front().is_array()) {
        const Vector row = vector_from(j, what);
        return row.transpose();
    }
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = static_cast<Eigen::Index>(j.front().size());
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Vector row = vector_from(j[static_cast<std::size_t>(r)], what);
        if (row.size() != cols) throw ConfigError(what + ": ragged matrix");
        m.row(r) = row.transpose();
    }
    return m;
}

/// Throws on any key of `j` not in `allowed`.
inline void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const auto& a : allowed) known = known || a == item.key();
        if (!known) throw ConfigError(where + ": unknown key '" + item.key() + "'");
    }
}

}  // namespace statesel::json_io
