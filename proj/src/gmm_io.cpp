#include "diffem/gmm_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "diffem/errors.hpp"

namespace diffem {

namespace {

std::vector<double> parse_row(const std::string& line, bool& ok) {
    std::vector<double> out;
    std::stringstream ss(line);
    std::string cell;
    ok = true;
    while (std::getline(ss, cell, ',')) {
        const auto begin = cell.find_first_not_of(" \t\r");
        const auto end = cell.find_last_not_of(" \t\r");
        if (begin == std::string::npos) {
            ok = false;
            return out;
        }
        const std::string token = cell.substr(begin, end - begin + 1);
        char* stop = nullptr;
        const double v = std::strtod(token.c_str(), &stop);
        if (stop != token.c_str() + token.size()) {
            ok = false;
            return out;
        }
        out.push_back(v);
    }
    if (out.empty()) ok = false;
    return out;
}

template <typename T>
void write_le(std::ostream& os, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char bytes[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T)))
        throw ArgumentError("binary matrix: truncated file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

nlohmann::json gmm_to_json(const GmmParams& theta) {
    nlohmann::json doc;
    const int kc = theta.components();
    const int d = theta.dim();
    doc["weights"] = std::vector<double>(theta.weights().data(), theta.weights().data() + kc);
    nlohmann::json means = nlohmann::json::array();
    nlohmann::json covs = nlohmann::json::array();
    for (int k = 0; k < kc; ++k) {
        std::vector<double> row(d);
        for (int a = 0; a < d; ++a) row[a] = theta.means()(k, a);
        means.push_back(row);
        nlohmann::json cov = nlohmann::json::array();
        for (int a = 0; a < d; ++a) {
            std::vector<double> r(d);
            for (int b = 0; b < d; ++b) r[b] = theta.covariance(k)(a, b);
            cov.push_back(r);
        }
        covs.push_back(cov);
    }
    doc["means"] = means;
    doc["covariances"] = covs;
    return doc;
}

GmmParams gmm_from_json(const nlohmann::json& doc) {
    try {
        if (!doc.is_object()) throw ArgumentError("GMM JSON: expected an object");
        for (const auto& item : doc.items())
            if (item.key() != "weights" && item.key() != "means" && item.key() != "covariances")
                throw ArgumentError("GMM JSON: unknown key '" + item.key() + "'");
        const auto w = doc.at("weights").get<std::vector<double>>();
        const auto means = doc.at("means").get<std::vector<std::vector<double>>>();
        const auto covs = doc.at("covariances").get<std::vector<std::vector<std::vector<double>>>>();
        const int kc = static_cast<int>(w.size());
        if (kc == 0 || static_cast<int>(means.size()) != kc || static_cast<int>(covs.size()) != kc)
            throw ArgumentError("GMM JSON: inconsistent component counts");
        const int d = static_cast<int>(means[0].size());
        Matrix m(kc, d);
        std::vector<Matrix> s(kc, Matrix(d, d));
        for (int k = 0; k < kc; ++k) {
            if (static_cast<int>(means[k].size()) != d || static_cast<int>(covs[k].size()) != d)
                throw ArgumentError("GMM JSON: inconsistent dimensions");
            for (int a = 0; a < d; ++a) {
                m(k, a) = means[k][a];
                if (static_cast<int>(covs[k][a].size()) != d)
                    throw ArgumentError("GMM JSON: covariance rows must have length d");
                for (int b = 0; b < d; ++b) s[k](a, b) = covs[k][a][b];
            }
        }
        return GmmParams(Eigen::Map<const Vector>(w.data(), kc), std::move(m), std::move(s));
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError(std::string("GMM JSON: ") + e.what());
    }
}

void write_gmm_json(const GmmParams& theta, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << gmm_to_json(theta).dump(2) << "\n";
}

GmmParams read_gmm_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ArgumentError("cannot open " + path);
    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError("malformed JSON in " + path + ": " + e.what());
    }
    return gmm_from_json(doc);
}

Matrix read_csv_matrix(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ArgumentError("cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    bool first = true;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        bool ok = false;
        auto row = parse_row(line, ok);
        if (!ok) {
            if (first) {
                first = false;
                continue;
            }
            throw ArgumentError(path + ":" + std::to_string(lineno) + ": malformed CSV row");
        }
        first = false;
        if (!rows.empty() && row.size() != rows[0].size())
            throw ArgumentError(path + ":" + std::to_string(lineno) + ": inconsistent column count");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ArgumentError(path + ": no data rows");
    Matrix m(rows.size(), rows[0].size());
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
    return m;
}

void write_csv_matrix(const Matrix& m, const std::string& path, const std::string& header) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    if (!header.empty()) os << header << "\n";
    for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < m.cols(); ++j) os << (j ? "," : "") << format_double(m(i, j));
        os << "\n";
    }
}

Matrix read_binary_matrix(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ArgumentError("cannot open " + path);
    const auto rows = read_le<std::int32_t>(is);
    const auto cols = read_le<std::int32_t>(is);
    if (rows < 0 || cols < 0) throw ArgumentError("binary matrix: negative dimensions");
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = read_le<double>(is);
    return m;
}

void write_binary_matrix(const Matrix& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_le<std::int32_t>(os, static_cast<std::int32_t>(m.rows()));
    write_le<std::int32_t>(os, static_cast<std::int32_t>(m.cols()));
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) write_le<double>(os, m(i, j));
}

}  // namespace diffem
