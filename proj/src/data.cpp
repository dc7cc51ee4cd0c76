#include "stn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "stn/rng.hpp"

namespace stn {
namespace {

void put_bytes(std::ofstream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_u16(std::ofstream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    put_bytes(os, b, 2);
}

void put_u32(std::ofstream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    put_bytes(os, b, 4);
}

void put_i64(std::ofstream& os, int64_t v) {
    uint64_t u = static_cast<uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    put_bytes(os, b, 8);
}

void put_f32(std::ofstream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}

bool get_bytes(std::ifstream& is, void* p, size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    return static_cast<size_t>(is.gcount()) == n;
}

uint16_t get_u16(std::ifstream& is, const char* field) {
    unsigned char b[2];
    if (!get_bytes(is, b, 2)) throw IoError(std::string("grid file truncated at ") + field);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::ifstream& is, const char* field) {
    unsigned char b[4];
    if (!get_bytes(is, b, 4)) throw IoError(std::string("grid file truncated at ") + field);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

int64_t get_i64(std::ifstream& is, const char* field) {
    unsigned char b[8];
    if (!get_bytes(is, b, 8)) throw IoError(std::string("grid file truncated at ") + field);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return static_cast<int64_t>(v);
}

float get_f32(std::ifstream& is, const char* field) {
    uint32_t u = get_u32(is, field);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace

void save_grid(const GridSeries& grid, const std::string& path) {
    if (grid.values.rank() != 4)
        throw DimensionError("grid values must be [T,I,J,F], got " +
                             shape_str(grid.values.shape()));
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    put_bytes(os, "GRID", 4);
    put_u16(os, 1);
    put_u32(os, static_cast<uint32_t>(grid.steps()));
    put_u32(os, static_cast<uint32_t>(grid.rows()));
    put_u32(os, static_cast<uint32_t>(grid.cols()));
    put_u32(os, static_cast<uint32_t>(grid.features()));
    put_i64(os, grid.start_time);
    put_u32(os, grid.interval_s);
    for (size_t i = 0; i < grid.values.size(); ++i) put_f32(os, grid.values[i]);
    if (!os) throw IoError("short write to '" + path + "'");
}

GridSeries load_grid(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[4];
    if (!get_bytes(is, magic, 4) || std::memcmp(magic, "GRID", 4) != 0)
        throw IoError("'" + path + "' is not a grid-series file (bad magic)");
    const uint16_t version = get_u16(is, "version");
    if (version != 1)
        throw IoError("unsupported grid file version " + std::to_string(version));
    const uint32_t t = get_u32(is, "T");
    const uint32_t i = get_u32(is, "I");
    const uint32_t j = get_u32(is, "J");
    const uint32_t f = get_u32(is, "F");
    GridSeries grid;
    grid.start_time = get_i64(is, "start_time");
    grid.interval_s = get_u32(is, "interval_s");
    grid.values = Tensor<float>({t, i, j, f});
    for (size_t k = 0; k < grid.values.size(); ++k) grid.values[k] = get_f32(is, "payload");
    if (f == standard_features().size()) {
        grid.feature_names = standard_features();
    } else {
        for (size_t k = 0; k < f; ++k)
            grid.feature_names.push_back(k < standard_features().size()
                                             ? standard_features()[k + standard_features().size() - f]
                                             : "f" + std::to_string(k));
    }
    return grid;
}

// ---------------------------------------------------------------------------
// TSV import
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> tsv_fields(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    return out;
}

std::vector<std::string> tsv_file_list(const std::string& path) {
    namespace fs = std::filesystem;
    if (!fs::exists(path)) throw IoError("no such path: '" + path + "'");
    if (fs::is_regular_file(path)) return {path};
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(path))
        if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no files in directory '" + path + "'");
    return files;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end && *end == '\0';
}

}  // namespace

TsvImport import_tia_tsv(const std::string& path, size_t rows_i, size_t cols_j,
                         const std::string& feature, uint32_t interval_s) {
    size_t feature_col = 0;
    {
        const auto& names = standard_features();
        bool found = false;
        for (size_t f = 0; f < names.size(); ++f)
            if (names[f] == feature) {
                feature_col = 3 + f;
                found = true;
            }
        if (!found) throw ConfigError("unknown feature '" + feature + "'");
    }
    const std::vector<std::string> files = tsv_file_list(path);

    TsvImport result;
    int64_t min_ts = 0, max_ts = 0;
    bool any = false;

    // pass 1: timestamp range and structural validation
    size_t row_no = 0;
    for (const std::string& file : files) {
        std::ifstream is(file);
        if (!is) throw IoError("cannot open '" + file + "'");
        std::string line;
        while (std::getline(is, line)) {
            ++row_no;
            if (line.empty()) continue;
            auto f = tsv_fields(line);
            double square, ts;
            if (f.size() < 2 || !parse_double(f[0], square) || !parse_double(f[1], ts)) {
                ++result.malformed;
                continue;
            }
            const long long sq = static_cast<long long>(square);
            if (sq < 1 || static_cast<size_t>(sq) > rows_i * cols_j)
                throw InputError("square_id " + std::to_string(sq) + " out of range at row " +
                                 std::to_string(row_no) + " of '" + file + "'");
            const int64_t sec = static_cast<int64_t>(ts) / 1000;
            if (!any || sec < min_ts) min_ts = sec;
            if (!any || sec > max_ts) max_ts = sec;
            any = true;
            ++result.rows;
        }
    }
    if (!any) throw IoError("no parsable rows under '" + path + "'");

    const int64_t t0 = (min_ts / interval_s) * interval_s;
    const size_t steps = static_cast<size_t>((max_ts - t0) / interval_s) + 1;
    result.grid.values = Tensor<float>({steps, rows_i, cols_j, 1});
    result.grid.start_time = t0;
    result.grid.interval_s = interval_s;
    result.grid.feature_names = {feature};

    // pass 2: accumulate, summing duplicate (square, bucket) rows
    for (const std::string& file : files) {
        std::ifstream is(file);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            auto f = tsv_fields(line);
            double square, ts;
            if (f.size() < 2 || !parse_double(f[0], square) || !parse_double(f[1], ts)) continue;
            double value = 0.0;
            if (f.size() > feature_col) {
                double v;
                if (parse_double(f[feature_col], v)) value = v;  // empty field -> 0
            }
            const size_t sq = static_cast<size_t>(square) - 1;
            const size_t i = sq / cols_j, j = sq % cols_j;
            const size_t t = static_cast<size_t>((static_cast<int64_t>(ts) / 1000 - t0) /
                                                 interval_s);
            result.grid.at(t, i, j, 0) += static_cast<float>(value);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Patches, normalization, datasets
// ---------------------------------------------------------------------------

Tensor<float> extract_patch(const GridSeries& grid, size_t feature, size_t i, size_t j,
                            size_t t_end, size_t r, size_t n) {
    if (t_end + 1 < n)
        throw RangeError("extract_patch: t_end " + std::to_string(t_end) +
                         " too early for a window of " + std::to_string(n) + " steps");
    if (t_end >= grid.steps())
        throw RangeError("extract_patch: t_end " + std::to_string(t_end) + " beyond series of " +
                         std::to_string(grid.steps()) + " steps");
    if (i >= grid.rows() || j >= grid.cols())
        throw RangeError("extract_patch: cell (" + std::to_string(i) + "," + std::to_string(j) +
                         ") outside the grid");
    const size_t p = 2 * r + 1;
    Tensor<float> out({n, p, p});
    const long long imax = static_cast<long long>(grid.rows()) - 1;
    const long long jmax = static_cast<long long>(grid.cols()) - 1;
    for (size_t k = 0; k < n; ++k) {
        const size_t t = t_end - n + 1 + k;
        for (size_t di = 0; di < p; ++di) {
            const long long ri = std::clamp(
                static_cast<long long>(i) + static_cast<long long>(di) - static_cast<long long>(r),
                0LL, imax);
            for (size_t dj = 0; dj < p; ++dj) {
                const long long rj = std::clamp(static_cast<long long>(j) +
                                                    static_cast<long long>(dj) -
                                                    static_cast<long long>(r),
                                                0LL, jmax);
                out.at({k, di, dj}) = grid.at(t, static_cast<size_t>(ri),
                                              static_cast<size_t>(rj), feature);
            }
        }
    }
    return out;
}

float NormStats::apply(float v, size_t i, size_t j) const {
    const float sd = stddev.at({i, j});
    if (sd < kNormEps) return 0.0f;
    return (v - mean.at({i, j})) / sd;
}

float NormStats::invert(float v, size_t i, size_t j) const {
    const float sd = stddev.at({i, j});
    if (sd < kNormEps) return mean.at({i, j});
    return v * sd + mean.at({i, j});
}

NormStats fit_norm_stats(const GridSeries& grid, size_t feature, size_t lo, size_t hi) {
    if (lo >= hi || hi > grid.steps())
        throw RangeError("fit_norm_stats: empty or invalid training range [" +
                         std::to_string(lo) + ", " + std::to_string(hi) + ")");
    NormStats st;
    st.mean = Tensor<float>({grid.rows(), grid.cols()});
    st.stddev = Tensor<float>({grid.rows(), grid.cols()});
    const double count = static_cast<double>(hi - lo);
    for (size_t i = 0; i < grid.rows(); ++i) {
        for (size_t j = 0; j < grid.cols(); ++j) {
            double sum = 0.0;
            for (size_t t = lo; t < hi; ++t) sum += grid.at(t, i, j, feature);
            const double mu = sum / count;
            double ss = 0.0;
            for (size_t t = lo; t < hi; ++t) {
                const double d = grid.at(t, i, j, feature) - mu;
                ss += d * d;
            }
            st.mean.at({i, j}) = static_cast<float>(mu);
            st.stddev.at({i, j}) = static_cast<float>(std::sqrt(ss / count));
        }
    }
    return st;
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::kTrain;
    if (s == "val") return Split::kVal;
    if (s == "test") return Split::kTest;
    if (s == "all") return Split::kAll;
    throw ConfigError("unknown split '" + s + "'");
}

SplitRange split_range(size_t total_steps, Split split) {
    const size_t train_hi = total_steps * 70 / 100;
    const size_t val_hi = total_steps * 85 / 100;
    switch (split) {
        case Split::kTrain: return {0, train_hi};
        case Split::kVal: return {train_hi, val_hi};
        case Split::kTest: return {val_hi, total_steps};
        case Split::kAll: return {0, total_steps};
    }
    return {0, 0};
}

std::vector<PatchSample> make_dataset(const GridSeries& grid, size_t feature,
                                      const NormStats& stats, Split split, size_t stride,
                                      size_t r, size_t n, size_t tau) {
    if (stride == 0) throw ConfigError("make_dataset: stride must be positive");
    const SplitRange range = split_range(grid.steps(), split);
    if (range.lo + n + tau > range.hi)
        throw ConfigError("make_dataset: split of " + std::to_string(range.hi - range.lo) +
                          " steps is too short for n=" + std::to_string(n) +
                          " plus tau=" + std::to_string(tau));
    std::vector<PatchSample> out;
    for (size_t t_end = range.lo + n - 1; t_end + tau <= range.hi - 1; t_end += stride) {
        for (size_t i = 0; i < grid.rows(); ++i) {
            for (size_t j = 0; j < grid.cols(); ++j) {
                PatchSample s;
                s.input = extract_patch(grid, feature, i, j, t_end, r, n);
                const size_t p = 2 * r + 1;
                for (size_t k = 0; k < s.input.size(); ++k) {
                    const size_t di = (k / p) % p, dj = k % p;
                    const long long ri =
                        std::clamp(static_cast<long long>(i) + static_cast<long long>(di) -
                                       static_cast<long long>(r),
                                   0LL, static_cast<long long>(grid.rows()) - 1);
                    const long long rj =
                        std::clamp(static_cast<long long>(j) + static_cast<long long>(dj) -
                                       static_cast<long long>(r),
                                   0LL, static_cast<long long>(grid.cols()) - 1);
                    s.input[k] = stats.apply(s.input[k], static_cast<size_t>(ri),
                                             static_cast<size_t>(rj));
                }
                for (size_t k = 1; k <= tau; ++k)
                    s.target.push_back(stats.apply(grid.at(t_end + k, i, j, feature), i, j));
                s.i = i;
                s.j = j;
                s.t_end = t_end;
                out.push_back(std::move(s));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic grids
// ---------------------------------------------------------------------------

GridSeries synth_grid(const SynthScenario& sc, uint64_t seed) {
    if (sc.rows == 0 || sc.cols == 0 || sc.steps == 0)
        throw ConfigError("synth_grid: dimensions must be positive");
    Rng rng(seed);

    struct Hotspot {
        double ci, cj, amp, sigma, phase;
    };
    std::vector<Hotspot> spots;
    for (size_t k = 0; k < sc.hotspots; ++k) {
        Hotspot h;
        h.ci = rng.uniform(0.0, static_cast<double>(sc.rows));
        h.cj = rng.uniform(0.0, static_cast<double>(sc.cols));
        h.amp = rng.uniform(0.5, 1.5);
        h.sigma = rng.uniform(1.5, 3.5);
        h.phase = rng.uniform(0.0, 144.0);
        spots.push_back(h);
    }

    Tensor<float> profile({sc.rows, sc.cols});
    for (size_t i = 0; i < sc.rows; ++i)
        for (size_t j = 0; j < sc.cols; ++j) {
            double g = 1.0;
            for (const Hotspot& h : spots) {
                const double d2 = (i - h.ci) * (i - h.ci) + (j - h.cj) * (j - h.cj);
                g += h.amp * std::exp(-d2 / (2.0 * h.sigma * h.sigma));
            }
            profile.at({i, j}) = static_cast<float>(g);
        }

    GridSeries grid;
    grid.values = Tensor<float>({sc.steps, sc.rows, sc.cols, 1});
    grid.start_time = sc.start_time;
    grid.interval_s = sc.interval_s;
    grid.feature_names = {sc.feature};

    Tensor<float> frame({sc.rows, sc.cols});
    for (size_t t = 0; t < sc.steps; ++t) {
        const double daily = std::sin(2.0 * M_PI * static_cast<double>(t) / 144.0);
        const double weekly = std::sin(2.0 * M_PI * static_cast<double>(t) / 1008.0);
        for (size_t i = 0; i < sc.rows; ++i)
            for (size_t j = 0; j < sc.cols; ++j) {
                double v = sc.base * profile.at({i, j}) *
                           (1.0 + sc.daily_amp * daily + sc.weekly_amp * weekly);
                // hotspot bursts, active only when the daily cycle is
                for (const Hotspot& h : spots) {
                    const double s =
                        std::sin(2.0 * M_PI * (static_cast<double>(t) - h.phase) / 144.0);
                    if (s <= 0.0) continue;
                    const double pulse = std::pow(s, 9.0);
                    const double d2 = (i - h.ci) * (i - h.ci) + (j - h.cj) * (j - h.cj);
                    const double sig = h.sigma * 0.6;
                    v += sc.base * sc.daily_amp * 0.9 * pulse *
                         std::exp(-d2 / (2.0 * sig * sig));
                }
                v += sc.noise_sd * rng.normal();
                frame.at({i, j}) = static_cast<float>(v);
            }
        // one diffusion pass toward the 4-neighborhood mean
        for (size_t i = 0; i < sc.rows; ++i)
            for (size_t j = 0; j < sc.cols; ++j) {
                double acc = 0.0;
                int cnt = 0;
                if (i > 0) acc += frame.at({i - 1, j}), ++cnt;
                if (i + 1 < sc.rows) acc += frame.at({i + 1, j}), ++cnt;
                if (j > 0) acc += frame.at({i, j - 1}), ++cnt;
                if (j + 1 < sc.cols) acc += frame.at({i, j + 1}), ++cnt;
                const double nb = cnt ? acc / cnt : frame.at({i, j});
                const double mixed = (1.0 - sc.diffusion) * frame.at({i, j}) + sc.diffusion * nb;
                grid.at(t, i, j, 0) = static_cast<float>(std::max(0.0, mixed));
            }
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Exploratory statistics
// ---------------------------------------------------------------------------

std::vector<double> cell_series(const GridSeries& grid, size_t feature, size_t i, size_t j) {
    if (i >= grid.rows() || j >= grid.cols())
        throw RangeError("cell (" + std::to_string(i) + "," + std::to_string(j) +
                         ") outside the grid");
    std::vector<double> out(grid.steps());
    for (size_t t = 0; t < grid.steps(); ++t) out[t] = grid.at(t, i, j, feature);
    return out;
}

std::vector<double> patch_mean_series(const GridSeries& grid, size_t feature, size_t i, size_t j,
                                      size_t r) {
    const size_t p = 2 * r + 1;
    std::vector<double> out(grid.steps(), 0.0);
    for (size_t t = 0; t < grid.steps(); ++t) {
        double acc = 0.0;
        for (size_t di = 0; di < p; ++di)
            for (size_t dj = 0; dj < p; ++dj) {
                const long long ri = std::clamp(static_cast<long long>(i + di) -
                                                    static_cast<long long>(r),
                                                0LL, static_cast<long long>(grid.rows()) - 1);
                const long long rj = std::clamp(static_cast<long long>(j + dj) -
                                                    static_cast<long long>(r),
                                                0LL, static_cast<long long>(grid.cols()) - 1);
                acc += grid.at(t, static_cast<size_t>(ri), static_cast<size_t>(rj), feature);
            }
        out[t] = acc / static_cast<double>(p * p);
    }
    return out;
}

double approx_entropy(const std::vector<double>& series, size_t m, double r_tol) {
    const size_t len = series.size();
    if (len <= m + 1)
        throw ContractError("approx_entropy: series of " + std::to_string(len) +
                            " points too short for m=" + std::to_string(m));
    if (r_tol <= 0.0) {
        double mu = 0.0;
        for (double v : series) mu += v;
        mu /= static_cast<double>(len);
        double ss = 0.0;
        for (double v : series) ss += (v - mu) * (v - mu);
        const double sd = std::sqrt(ss / static_cast<double>(len));
        if (sd == 0.0) return 0.0;  // constant series
        r_tol = 0.2 * sd;
    }

    auto phi = [&](size_t mm) {
        const size_t count = len - mm + 1;
        double acc = 0.0;
        for (size_t i = 0; i < count; ++i) {
            size_t matches = 0;
            for (size_t j = 0; j < count; ++j) {
                double dmax = 0.0;
                for (size_t k = 0; k < mm; ++k)
                    dmax = std::max(dmax, std::abs(series[i + k] - series[j + k]));
                if (dmax <= r_tol) ++matches;  // includes the self-match
            }
            acc += std::log(static_cast<double>(matches) / static_cast<double>(count));
        }
        return acc / static_cast<double>(count);
    };
    return phi(m) - phi(m + 1);
}

double autocorrelation(const std::vector<double>& series, size_t lag) {
    const size_t len = series.size();
    if (lag >= len) throw RangeError("autocorrelation: lag beyond series length");
    double mu = 0.0;
    for (double v : series) mu += v;
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (double v : series) var += (v - mu) * (v - mu);
    if (var == 0.0) return 0.0;
    double acc = 0.0;
    for (size_t t = 0; t + lag < len; ++t) acc += (series[t] - mu) * (series[t + lag] - mu);
    return acc / var;
}

Tensor<float> spatial_correlation_map(const GridSeries& grid, size_t feature, size_t center_i,
                                      size_t center_j) {
    if (grid.steps() < 3) throw ContractError("spatial_correlation_map: need at least 3 steps");
    const std::vector<double> center = cell_series(grid, feature, center_i, center_j);
    const size_t len = center.size();
    double cmu = 0.0;
    for (double v : center) cmu += v;
    cmu /= static_cast<double>(len);
    double cvar = 0.0;
    for (double v : center) cvar += (v - cmu) * (v - cmu);

    Tensor<float> out({grid.rows(), grid.cols()});
    for (size_t i = 0; i < grid.rows(); ++i)
        for (size_t j = 0; j < grid.cols(); ++j) {
            double mu = 0.0;
            for (size_t t = 0; t < len; ++t) mu += grid.at(t, i, j, feature);
            mu /= static_cast<double>(len);
            double var = 0.0, cov = 0.0;
            for (size_t t = 0; t < len; ++t) {
                const double d = grid.at(t, i, j, feature) - mu;
                var += d * d;
                cov += d * (center[t] - cmu);
            }
            out.at({i, j}) = (var <= 0.0 || cvar <= 0.0)
                                 ? 0.0f
                                 : static_cast<float>(cov / std::sqrt(var * cvar));
        }
    return out;
}

}  // namespace stn
