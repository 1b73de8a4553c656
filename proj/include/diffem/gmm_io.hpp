#pragma once

#include <string>

#include <json.hpp>

#include "diffem/gmm.hpp"

namespace diffem {

// {"weights": [...], "means": [[...], ...], "covariances": [[[...], ...], ...]}
nlohmann::json gmm_to_json(const GmmParams& theta);
GmmParams gmm_from_json(const nlohmann::json& doc);
void write_gmm_json(const GmmParams& theta, const std::string& path);
GmmParams read_gmm_json(const std::string& path);

// One point per row, comma separated. A non-numeric first line is treated as a header.
Matrix read_csv_matrix(const std::string& path);
void write_csv_matrix(const Matrix& m, const std::string& path, const std::string& header = "");

// Little-endian: int32 rows, int32 cols, then rows*cols float64 values in row-major order.
Matrix read_binary_matrix(const std::string& path);
void write_binary_matrix(const Matrix& m, const std::string& path);

// Shortest round-trip decimal representation used by every CSV writer.
std::string format_double(double v);

}  // namespace diffem
