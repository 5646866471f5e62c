#include "nextou/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nextou/error.hpp"

namespace nextou {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "raw volumes are read without byte swapping");

fs::path header_path(const fs::path& raw_path) {
    fs::path p = raw_path;
    return p.replace_extension(".hdr");
}

void write_raw(const fs::path& path, const Tensor& data, std::vector<double> spacing) {
    if (spacing.empty()) spacing.assign(static_cast<std::size_t>(std::max<Index>(data.rank() - 1, 0)), 1.0);
    {
        std::ofstream hdr(header_path(path));
        if (!hdr) throw IoError("cannot write " + header_path(path).string());
        hdr << "shape:";
        for (Index e : data.shape()) hdr << ' ' << e;
        hdr << "\ndtype: float32\nspacing:";
        for (double s : spacing) hdr << ' ' << s;
        hdr << '\n';
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    const Eigen::ArrayXf values = data.data().cast<float>();
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!out) throw IoError("short write to " + path.string());
}

void write_raw_labels(const fs::path& path, const LabelMap& labels) { write_raw(path, labels.cast<double>()); }

RawHeader read_raw_header(const fs::path& raw_path) {
    const fs::path hp = header_path(raw_path);
    std::ifstream in(hp);
    if (!in) throw IoError("missing header " + hp.string());
    RawHeader h;
    h.dtype.clear();
    std::string line;
    while (std::getline(in, line)) {
        const auto colon = line.find(':');
        if (colon == std::string::npos) continue;
        const std::string key = line.substr(0, colon);
        std::istringstream rest(line.substr(colon + 1));
        if (key == "shape") {
            Index e;
            while (rest >> e) h.shape.push_back(e);
        } else if (key == "dtype") {
            rest >> h.dtype;
        } else if (key == "spacing") {
            double s;
            while (rest >> s) h.spacing.push_back(s);
        }
    }
    if (h.shape.empty() || std::any_of(h.shape.begin(), h.shape.end(), [](Index e) { return e < 1; })) {
        throw CorruptedRecord(hp.string() + ": invalid or missing shape");
    }
    if (h.dtype != "float32") throw CorruptedRecord(hp.string() + ": unsupported dtype '" + h.dtype + "'");
    return h;
}

Tensor read_raw(const fs::path& path) {
    const RawHeader h = read_raw_header(path);
    const Index n = shape_numel(h.shape);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<Index>(in.tellg());
    if (bytes != n * static_cast<Index>(sizeof(float))) {
        throw CorruptedRecord(path.string() + ": expected " + std::to_string(n * 4) + " bytes, found " +
                              std::to_string(bytes));
    }
    in.seekg(0);
    Eigen::ArrayXf values(n);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(float)));
    return Tensor(h.shape, values.cast<double>());
}

LabelMap read_raw_labels(const fs::path& path) {
    const Tensor t = read_raw(path);
    LabelMap labels(t.shape());
    for (Index i = 0; i < t.numel(); ++i) {
        const double v = t[i];
        if (v != std::round(v) || v < 0) throw CorruptedRecord(path.string() + ": non-integer label value");
        labels[i] = static_cast<std::int32_t>(v);
    }
    return labels;
}

std::vector<CaseFiles> list_cases(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    const std::string suffix = "_image.raw";
    std::vector<CaseFiles> cases;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
            continue;
        }
        CaseFiles c;
        c.name = name.substr(0, name.size() - suffix.size());
        c.image = entry.path();
        c.labels = dir / (c.name + "_label.raw");
        if (!fs::exists(c.labels)) throw IoError("case " + c.name + " has no label volume");
        cases.push_back(std::move(c));
    }
    std::sort(cases.begin(), cases.end(), [](const CaseFiles& a, const CaseFiles& b) { return a.name < b.name; });
    return cases;
}

void write_overlay_ppm(const fs::path& path, const Tensor& image, const LabelMap& labels) {
    const Shape ext(labels.shape().begin() + 1, labels.shape().end());
    if (ext.size() < 2) throw InvalidArgument("overlay: needs at least two spatial axes");
    const Index h = ext[ext.size() - 2], w = ext.back();
    // Middle slice along any leading axes.
    Index offset = 0, plane = h * w;
    Index stride = plane;
    for (std::size_t a = ext.size() - 2; a-- > 0;) {
        offset += (ext[a] / 2) * stride;
        stride *= ext[a];
    }
    const double lo = image.data().minCoeff(), hi = image.data().maxCoeff();
    static const unsigned char palette[][3] = {{0, 0, 0},     {230, 60, 60},  {60, 200, 80},  {70, 110, 240},
                                               {240, 200, 40}, {200, 80, 220}, {40, 210, 220}, {250, 140, 30}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P6\n" << w << ' ' << h << "\n255\n";
    for (Index i = 0; i < plane; ++i) {
        const double g = hi > lo ? (image[offset + i] - lo) / (hi - lo) : 0.0;
        const std::int32_t k = labels[offset + i];
        for (int ch = 0; ch < 3; ++ch) {
            double v = 255.0 * g;
            if (k > 0) v = 0.5 * v + 0.5 * palette[k % 8][ch];
            out.put(static_cast<char>(std::clamp(v, 0.0, 255.0)));
        }
    }
}

void write_curve_svg(const fs::path& path, const std::vector<double>& values, const std::string& title) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    const double w = 640, h = 360, pad = 40;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << pad << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
    if (!values.empty()) {
        const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
        const double span = *mx > *mn ? *mx - *mn : 1.0;
        out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double x = pad + (w - 2 * pad) * (values.size() > 1 ? double(i) / double(values.size() - 1) : 0.0);
            const double y = h - pad - (h - 2 * pad) * (values[i] - *mn) / span;
            out << x << ',' << y << ' ';
        }
        out << "\"/>\n"
            << "<text x=\"4\" y=\"" << pad << "\" font-size=\"10\">" << *mx << "</text>\n"
            << "<text x=\"4\" y=\"" << h - pad << "\" font-size=\"10\">" << *mn << "</text>\n";
    }
    out << "</svg>\n";
}

}  // namespace nextou
