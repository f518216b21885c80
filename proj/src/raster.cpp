#include "soma/raster.hpp"

#include <algorithm>
#include <cctype>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "soma/errors.hpp"

namespace soma {

namespace {

std::string lower_ext(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext;
}

} // namespace

torch::Tensor read_raster(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw LoadError("raster not found: " + path.string());
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (img.empty()) throw LoadError("cannot decode raster (missing or truncated): " + path.string());

    double scale = 1.0;
    switch (img.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F:
    case CV_64F: scale = 1.0; break;
    default: throw LoadError("unsupported raster depth: " + path.string());
    }
    cv::Mat f;
    img.convertTo(f, CV_32F, scale);

    std::vector<cv::Mat> planes;
    cv::split(f, planes);
    if (planes.size() == 4) planes.pop_back(); // drop alpha
    if (planes.size() == 3) std::swap(planes[0], planes[2]); // BGR -> RGB
    if (planes.size() != 1 && planes.size() != 3) {
        throw LoadError("unsupported channel count in " + path.string());
    }
    const auto h = static_cast<int64_t>(f.rows);
    const auto w = static_cast<int64_t>(f.cols);
    auto out = torch::empty({static_cast<int64_t>(planes.size()), h, w}, torch::kFloat32);
    for (std::size_t c = 0; c < planes.size(); ++c) {
        cv::Mat plane = planes[c].isContinuous() ? planes[c] : planes[c].clone();
        std::memcpy(out[static_cast<int64_t>(c)].data_ptr<float>(), plane.ptr<float>(),
                    sizeof(float) * static_cast<std::size_t>(h * w));
    }
    return out.clamp(0.0, 1.0);
}

void write_raster(const std::filesystem::path& path, const torch::Tensor& image) {
    if (image.dim() != 3 || (image.size(0) != 1 && image.size(0) != 3)) {
        throw ValidationError("write_raster: expected (1|3, H, W)");
    }
    auto img = image.detach().to(torch::kFloat32).contiguous().cpu();
    const int h = static_cast<int>(img.size(1));
    const int w = static_cast<int>(img.size(2));
    std::vector<cv::Mat> planes;
    for (int64_t c = 0; c < img.size(0); ++c) {
        planes.emplace_back(h, w, CV_32F, img[c].data_ptr<float>());
    }
    if (planes.size() == 3) std::swap(planes[0], planes[2]);
    cv::Mat merged;
    cv::merge(planes, merged);

    const auto ext = lower_ext(path);
    cv::Mat out;
    if (ext == ".tif" || ext == ".tiff") {
        out = merged;
    } else {
        merged.convertTo(out, CV_8U, 255.0);
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), out)) throw LoadError("failed to write raster: " + path.string());
}

} // namespace soma
