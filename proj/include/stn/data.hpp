#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stn/errors.hpp"
#include "stn/tensor.hpp"

// Grid traffic data: ingestion, patch datasets, and exploratory statistics.

namespace stn {

inline const std::vector<std::string>& standard_features() {
    static const std::vector<std::string> k = {"sms-in", "sms-out", "call-in", "call-out",
                                               "internet"};
    return k;
}

struct GridSeries {
    Tensor<float> values;  // [T, I, J, F]
    int64_t start_time = 0;
    uint32_t interval_s = 600;
    std::vector<std::string> feature_names;

    size_t steps() const { return values.dim(0); }
    size_t rows() const { return values.dim(1); }
    size_t cols() const { return values.dim(2); }
    size_t features() const { return values.dim(3); }

    float at(size_t t, size_t i, size_t j, size_t f) const { return values.at({t, i, j, f}); }
    float& at(size_t t, size_t i, size_t j, size_t f) { return values.at({t, i, j, f}); }

    size_t feature_index(const std::string& name) const {
        for (size_t f = 0; f < feature_names.size(); ++f)
            if (feature_names[f] == name) return f;
        throw ConfigError("unknown feature '" + name + "'");
    }
};

// Binary grid-series file: magic "GRID", u16 version=1, u32 T,I,J,F,
// i64 start_time, u32 interval_s, then T*I*J*F little-endian f32 in
// (t,i,j,f) row-major order.
void save_grid(const GridSeries& grid, const std::string& path);
GridSeries load_grid(const std::string& path);

struct TsvImport {
    GridSeries grid;
    size_t rows = 0;       // parsed data rows
    size_t malformed = 0;  // skipped rows
};

// Tab-separated rows: square_id, timestamp_ms, country_code, sms_in, sms_out,
// call_in, call_out, internet; 1-based square ids mapped row-major onto the
// grid; values with equal (square, bucket) summed over country codes; empty
// numeric fields contribute 0. `path` may be a file or a directory of files.
TsvImport import_tia_tsv(const std::string& path, size_t rows_i, size_t cols_j,
                         const std::string& feature, uint32_t interval_s = 600);

// Frames t_end-n+1 .. t_end of the (2r+1)^2 neighborhood of (i, j), with
// out-of-grid positions replicated from the nearest edge. Raw units.
Tensor<float> extract_patch(const GridSeries& grid, size_t feature, size_t i, size_t j,
                            size_t t_end, size_t r, size_t n);

struct NormStats {
    Tensor<float> mean;    // [I, J]
    Tensor<float> stddev;  // [I, J], population

    float apply(float v, size_t i, size_t j) const;
    float invert(float v, size_t i, size_t j) const;
};

inline constexpr float kNormEps = 1e-6f;

// Per-cell z-score statistics over time steps [lo, hi) only.
NormStats fit_norm_stats(const GridSeries& grid, size_t feature, size_t lo, size_t hi);

enum class Split { kTrain, kVal, kTest, kAll };

Split parse_split(const std::string& s);

struct SplitRange {
    size_t lo = 0, hi = 0;  // [lo, hi)
};

// Chronological 70/15/15 partition of T steps.
SplitRange split_range(size_t total_steps, Split split);

struct PatchSample {
    Tensor<float> input;        // [n, P, P], normalized
    std::vector<float> target;  // [tau], normalized
    size_t i = 0, j = 0;
    size_t t_end = 0;
};

// Supervised samples whose windows and targets lie entirely inside the split.
// Windows advance by `stride` steps; every cell yields one sample per
// admissible t_end.
std::vector<PatchSample> make_dataset(const GridSeries& grid, size_t feature,
                                      const NormStats& stats, Split split, size_t stride,
                                      size_t r, size_t n, size_t tau);

struct SynthScenario {
    size_t rows = 20, cols = 20, steps = 2016;
    double base = 100.0;
    double daily_amp = 0.35;
    double weekly_amp = 0.15;
    size_t hotspots = 5;
    double noise_sd = 6.0;
    double diffusion = 0.25;
    uint32_t interval_s = 600;
    int64_t start_time = 0;
    std::string feature = "internet";
};

// Deterministic synthetic traffic grid: a hotspot-modulated base level with
// daily and weekly cycles, hotspot-anchored daily bursts, Gaussian noise, and
// one neighbor-diffusion pass that correlates nearby cells.
GridSeries synth_grid(const SynthScenario& sc, uint64_t seed);

// Single-cell time series and the mean over the (2r+1)^2 patch around a cell.
std::vector<double> cell_series(const GridSeries& grid, size_t feature, size_t i, size_t j);
std::vector<double> patch_mean_series(const GridSeries& grid, size_t feature, size_t i, size_t j,
                                      size_t r);

// Approximate entropy with Chebyshev distance and self-matches included.
// r_tol <= 0 selects the 0.2*std default; zero-variance series return 0.
double approx_entropy(const std::vector<double>& series, size_t m = 2, double r_tol = 0.0);

// Pearson autocorrelation at the given lag.
double autocorrelation(const std::vector<double>& series, size_t lag);

// Pearson correlation of every cell's series against the center cell's;
// zero-variance cells map to 0.
Tensor<float> spatial_correlation_map(const GridSeries& grid, size_t feature, size_t center_i,
                                      size_t center_j);

}  // namespace stn
