#include <array>
#include <cstring>
#include <fstream>

#include "soma/errors.hpp"
#include "soma/geometry.hpp"

namespace soma {

namespace {

constexpr std::array<char, 8> kMagic{'S', 'O', 'M', 'A', 'F', 'L', 'D', '1'};
constexpr uint32_t kFloat32 = 1;
constexpr uint32_t kFloat64 = 2;

struct Header {
    uint32_t dtype;
    uint32_t level;
    uint32_t batch;
    uint32_t height;
    uint32_t width;
    uint32_t components;
};

} // namespace

// Layout (little endian): 8-byte magic "SOMAFLD1", six uint32 (dtype, level,
// batch, height, width, components = 2), then batch*height*width*2 values in
// (n, y, x, component) order.
void save_field(const std::filesystem::path& path, const DisplacementField& field) {
    auto data = field.data.detach().contiguous().cpu();
    const bool f64 = data.scalar_type() == torch::kFloat64;
    if (!f64) data = data.to(torch::kFloat32);
    Header header{f64 ? kFloat64 : kFloat32,
                  static_cast<uint32_t>(field.level),
                  static_cast<uint32_t>(field.batch()),
                  static_cast<uint32_t>(field.height()),
                  static_cast<uint32_t>(field.width()),
                  2};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot open field file for writing: " + path.string());
    out.write(kMagic.data(), kMagic.size());
    out.write(reinterpret_cast<const char*>(&header), sizeof(header));
    out.write(static_cast<const char*>(data.data_ptr()),
              static_cast<std::streamsize>(data.numel() * data.element_size()));
    if (!out) throw LoadError("failed writing field file: " + path.string());
}

DisplacementField load_field(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open field file: " + path.string());
    std::array<char, 8> magic{};
    Header header{};
    in.read(magic.data(), magic.size());
    in.read(reinterpret_cast<char*>(&header), sizeof(header));
    if (!in || magic != kMagic) throw LoadError("not a field file: " + path.string());
    if (header.components != 2 || !is_valid_level(static_cast<int>(header.level)) ||
        (header.dtype != kFloat32 && header.dtype != kFloat64)) {
        throw LoadError("corrupt field header: " + path.string());
    }
    auto dtype = header.dtype == kFloat64 ? torch::kFloat64 : torch::kFloat32;
    auto data = torch::empty({header.batch, header.height, header.width, 2}, dtype);
    in.read(static_cast<char*>(data.data_ptr()),
            static_cast<std::streamsize>(data.numel() * data.element_size()));
    if (!in) throw LoadError("truncated field file: " + path.string());
    return {data, static_cast<int>(header.level)};
}

} // namespace soma
