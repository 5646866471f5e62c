#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "nextou/tensor.hpp"

namespace nextou {

/// Sidecar header of a raw volume: `<stem>.hdr` next to `<stem>.raw`.
///
///   shape: 1 64 64
///   dtype: float32
///   spacing: 1 1
struct RawHeader {
    Shape shape;
    std::string dtype = "float32";
    std::vector<double> spacing;
};

/// Writes little-endian float32 data plus its header; `path` is the .raw file.
void write_raw(const std::filesystem::path& path, const Tensor& data, std::vector<double> spacing = {});
void write_raw_labels(const std::filesystem::path& path, const LabelMap& labels);

RawHeader read_raw_header(const std::filesystem::path& raw_path);
Tensor read_raw(const std::filesystem::path& path);
/// Reads a float32 volume and checks every value is an integer label.
LabelMap read_raw_labels(const std::filesystem::path& path);

std::filesystem::path header_path(const std::filesystem::path& raw_path);

struct CaseFiles {
    std::string name;
    std::filesystem::path image;
    std::filesystem::path labels;
};

/// Cases `<name>_image.raw` / `<name>_label.raw` in a directory, sorted by name.
std::vector<CaseFiles> list_cases(const std::filesystem::path& dir);

/// Binary PPM of a 2D slice: grayscale image with label colors blended in.
void write_overlay_ppm(const std::filesystem::path& path, const Tensor& image, const LabelMap& labels);

/// Minimal SVG polyline plot of a series.
void write_curve_svg(const std::filesystem::path& path, const std::vector<double>& values, const std::string& title);

}  // namespace nextou
