#include "soma/eval.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>

#include "soma/errors.hpp"
#include "soma/losses.hpp"

namespace soma {

namespace {

std::string fmt(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

std::string threshold_label(double t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", t);
    return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    return out;
}

} // namespace

double pair_error(const DisplacementField& predicted, const DisplacementField& gt,
                  const torch::Tensor& mask) {
    check_same_shape(predicted, gt, "pair_error");
    if (gt.batch() != 1) throw ValidationError("pair_error: expects a single pair");
    if (mask.defined() && mask.to(torch::kFloat64).sum().item<double>() == 0.0) {
        throw DegenerateInputError("pair_error: validity mask is empty");
    }
    torch::NoGradGuard guard;
    return field_rmse_per_sample(predicted, gt, mask)[0].item<double>();
}

std::vector<EvalRecord> make_records(const DisplacementField& predicted, const DisplacementField& gt,
                                     const torch::Tensor& mask, const std::vector<std::string>& ids) {
    torch::NoGradGuard guard;
    check_same_shape(predicted, gt, "make_records");
    if (static_cast<int64_t>(ids.size()) != gt.batch()) throw ValidationError("make_records: id count mismatch");
    if (mask.defined()) {
        auto counts = mask.to(torch::kFloat64).sum({1, 2});
        if ((counts == 0).any().item<bool>()) throw DegenerateInputError("make_records: empty validity mask");
    }
    auto errors = field_rmse_per_sample(predicted, gt, mask).to(torch::kFloat64);
    auto quads = quadrant_rmse(predicted, gt, mask).to(torch::kFloat64);
    std::vector<EvalRecord> out;
    for (int64_t i = 0; i < gt.batch(); ++i) {
        EvalRecord r;
        r.pair_id = ids[static_cast<std::size_t>(i)];
        r.error = errors[i].item<double>();
        for (int q = 0; q < 4; ++q) r.quadrant[q] = quads[i][q].item<double>();
        out.push_back(r);
    }
    return out;
}

double cmr(const std::vector<EvalRecord>& records, double threshold) {
    if (records.empty()) throw DegenerateInputError("cmr: no records");
    if (!(threshold > 0)) throw ValidationError("cmr: threshold must be positive");
    std::size_t hits = 0;
    for (const auto& r : records) hits += r.error < threshold ? 1 : 0;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(records.size());
}

double r_avg(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw DegenerateInputError("r_avg: no records");
    double sum = 0.0;
    for (const auto& r : records) sum += r.error;
    return sum / static_cast<double>(records.size());
}

std::vector<std::string> table_columns(const std::vector<double>& thresholds) {
    std::vector<std::string> cols{"method"};
    for (double t : thresholds) cols.push_back("CMR@" + threshold_label(t) + "px");
    cols.push_back("R_avg");
    cols.push_back("n_pairs");
    return cols;
}

void write_report(const std::filesystem::path& dir, const std::vector<MethodResult>& methods,
                  const std::vector<double>& thresholds) {
    std::filesystem::create_directories(dir);
    auto metrics = open_csv(dir / "metrics.csv");
    auto table = open_csv(dir / "table.csv");
    metrics << "method,threshold,cmr,r_avg,n_pairs\n";
    const auto cols = table_columns(thresholds);
    for (std::size_t i = 0; i < cols.size(); ++i) table << (i ? "," : "") << cols[i];
    table << '\n';

    for (const auto& m : methods) {
        const double mean = r_avg(m.records);
        table << m.method;
        for (double t : thresholds) {
            const double c = cmr(m.records, t);
            metrics << m.method << ',' << threshold_label(t) << ',' << fmt(c, 2) << ','
                    << fmt(mean, 4) << ',' << m.records.size() << '\n';
            table << ',' << fmt(c, 2);
        }
        table << ',' << fmt(mean, 4) << ',' << m.records.size() << '\n';

        auto errors = open_csv(dir / ("errors_" + m.method + ".csv"));
        errors << "pair_id,error,q1,q2,q3,q4\n";
        for (const auto& r : m.records) {
            errors << r.pair_id << ',' << fmt(r.error, 6);
            for (double q : r.quadrant) errors << ',' << fmt(q, 6);
            errors << '\n';
        }
    }
    if (!metrics || !table) throw LoadError("failed writing report in " + dir.string());
}

} // namespace soma
