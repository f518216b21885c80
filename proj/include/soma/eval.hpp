#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "soma/geometry.hpp"

namespace soma {

struct EvalRecord {
    std::string pair_id;
    double error = 0.0;                // end-point RMSE over valid pixels, px
    std::array<double, 4> quadrant{}; // TL, TR, BL, BR
};

/// Masked end-point RMSE of a single-sample field pair. Throws
/// DegenerateInputError when the mask selects no pixel.
double pair_error(const DisplacementField& predicted, const DisplacementField& gt,
                  const torch::Tensor& mask = {});

/// Builds one record per batch element.
std::vector<EvalRecord> make_records(const DisplacementField& predicted, const DisplacementField& gt,
                                     const torch::Tensor& mask, const std::vector<std::string>& ids);

/// Percentage of records with error strictly below threshold.
double cmr(const std::vector<EvalRecord>& records, double threshold);

/// Mean per-pair error.
double r_avg(const std::vector<EvalRecord>& records);

struct MethodResult {
    std::string method;
    std::vector<EvalRecord> records;
};

inline const std::vector<double> kDefaultThresholds{1, 2, 3, 4, 5};

/// Writes, under dir:
///   metrics.csv           method,threshold,cmr,r_avg,n_pairs   (long form)
///   table.csv             method,CMR@1px..CMR@5px,R_avg,n_pairs (one row per method)
///   errors_<method>.csv   pair_id,error,q1,q2,q3,q4
void write_report(const std::filesystem::path& dir, const std::vector<MethodResult>& methods,
                  const std::vector<double>& thresholds = kDefaultThresholds);

/// Column names of table.csv.
std::vector<std::string> table_columns(const std::vector<double>& thresholds = kDefaultThresholds);

} // namespace soma
