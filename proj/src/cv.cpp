#include "cvlift/cv.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>

namespace cvlift {

using nlohmann::json;

Vec LinearCV::eval(const Vec& x, bool* clamped) const {
    if (x.size() != a_.cols()) throw InvalidInputError("state has wrong dimension");
    if (clamped) *clamped = false;
    return a_ * x;
}

GridChi::GridChi(kernels::TableMeta meta, std::vector<double> values)
    : meta_(meta), values_(std::move(values)) {
    if (meta_.nx < 2 || meta_.ny < 2)
        throw InvalidInputError("chi table needs at least 2x2 nodes");
    if (!(meta_.dx > 0.0) || !(meta_.dy > 0.0))
        throw InvalidInputError("chi table spacing must be positive");
    if (values_.size() != static_cast<std::size_t>(meta_.nx) * meta_.ny)
        throw InvalidInputError("chi table has wrong number of values");
}

Vec GridChi::eval(const Vec& x, bool* clamped) const {
    if (x.size() != 2) throw InvalidInputError("state has wrong dimension");
    double v;
    uint8_t flag = 0;
    kernels::detail::bilinear_eval_grad_scalar(meta_, values_.data(), x.data(),
                                               x.data() + 1, 1, &v, nullptr,
                                               nullptr, clamped ? &flag : nullptr);
    if (clamped) *clamped = flag != 0;
    Vec out(1);
    out[0] = v;
    return out;
}

Mat GridChi::jacobian(const Vec& x) const {
    if (x.size() != 2) throw InvalidInputError("state has wrong dimension");
    double v, gx, gy;
    kernels::detail::bilinear_eval_grad_scalar(meta_, values_.data(), x.data(),
                                               x.data() + 1, 1, &v, &gx, &gy, nullptr);
    Mat j(1, 2);
    j(0, 0) = gx;
    j(0, 1) = gy;
    return j;
}

void GridChi::eval_batch(const double* x1, const double* x2, std::size_t n,
                         double* val, double* gx, double* gy, uint8_t* clamped) const {
    kernels::bilinear_eval_grad(meta_, values_.data(), x1, x2, n, val, gx, gy, clamped);
}

json GridChi::meta_json() const {
    return json{{"x0", meta_.x0}, {"y0", meta_.y0}, {"dx", meta_.dx},
                {"dy", meta_.dy}, {"nx", meta_.nx}, {"ny", meta_.ny}};
}

void GridChi::save(const std::string& csv_path, const std::string& json_path) const {
    std::FILE* f = std::fopen(csv_path.c_str(), "w");
    if (!f) throw std::runtime_error("cannot open " + csv_path);
    std::fprintf(f, "chi\n");
    for (double v : values_) std::fprintf(f, "%.17g\n", v);
    std::fclose(f);
    std::ofstream js(json_path);
    if (!js) throw std::runtime_error("cannot open " + json_path);
    js << meta_json().dump(2) << "\n";
}

GridChi GridChi::load(const std::string& csv_path, const std::string& json_path) {
    std::ifstream js(json_path);
    if (!js) throw std::runtime_error("cannot open " + json_path);
    json j;
    js >> j;
    kernels::TableMeta m;
    m.x0 = j.at("x0").get<double>();
    m.y0 = j.at("y0").get<double>();
    m.dx = j.at("dx").get<double>();
    m.dy = j.at("dy").get<double>();
    m.nx = j.at("nx").get<int>();
    m.ny = j.at("ny").get<int>();
    std::ifstream cs(csv_path);
    if (!cs) throw std::runtime_error("cannot open " + csv_path);
    std::string line;
    std::getline(cs, line); // header
    std::vector<double> vals;
    vals.reserve(static_cast<std::size_t>(m.nx) * m.ny);
    while (std::getline(cs, line)) {
        if (line.empty()) continue;
        vals.push_back(std::stod(line));
    }
    return GridChi(m, std::move(vals));
}

RotatedChi::RotatedChi(std::shared_ptr<const GridChi> chi, Mat rsub)
    : chi_(std::move(chi)), rsub_(std::move(rsub)) {
    if (rsub_.rows() != 2) throw InvalidInputError("rotation submatrix needs 2 rows");
}

Vec RotatedChi::eval(const Vec& x, bool* clamped) const {
    if (x.size() != rsub_.cols()) throw InvalidInputError("state has wrong dimension");
    Vec y = rsub_ * x;
    return chi_->eval(y, clamped);
}

Mat RotatedChi::jacobian(const Vec& x) const {
    if (x.size() != rsub_.cols()) throw InvalidInputError("state has wrong dimension");
    Vec y = rsub_ * x;
    return chi_->jacobian(y) * rsub_;
}

} // namespace cvlift
