#include "tdx/density.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>

namespace tdx {

// ------------------------------------------------------------- SpatialGrid

SpatialGrid::SpatialGrid(std::vector<Axis> axes) : axes_(std::move(axes)), size_(1) {
    if (axes_.empty()) throw Error(ErrorCode::InvalidParameter, "spatial grid needs at least one axis");
    for (const Axis& a : axes_) {
        if (a.points < 2 || !(a.max > a.min) || !std::isfinite(a.min) || !std::isfinite(a.max))
            throw Error(ErrorCode::InvalidParameter, "spatial grid axis needs min < max and >= 2 points");
        size_ *= static_cast<std::size_t>(a.points);
    }
}

SpatialGrid SpatialGrid::line(double min, double max, int points) { return SpatialGrid({Axis{min, max, points}}); }

Vector SpatialGrid::node(std::size_t flat) const {
    Vector y(dim());
    for (int i = dim() - 1; i >= 0; --i) {
        const Axis& a = axes_[static_cast<std::size_t>(i)];
        y(i) = a.at(static_cast<int>(flat % static_cast<std::size_t>(a.points)));
        flat /= static_cast<std::size_t>(a.points);
    }
    return y;
}

double SpatialGrid::weight(std::size_t flat) const {
    double w = 1.0;
    for (int i = dim() - 1; i >= 0; --i) {
        const Axis& a = axes_[static_cast<std::size_t>(i)];
        const auto j = static_cast<int>(flat % static_cast<std::size_t>(a.points));
        flat /= static_cast<std::size_t>(a.points);
        w *= a.spacing() * ((j == 0 || j == a.points - 1) ? 0.5 : 1.0);
    }
    return w;
}

bool SpatialGrid::contains(const Vector& y, double slack) const {
    if (y.size() != dim()) return false;
    for (int i = 0; i < dim(); ++i) {
        const Axis& a = axes_[static_cast<std::size_t>(i)];
        const double pad = slack * (a.max - a.min);
        if (y(i) < a.min - pad || y(i) > a.max + pad) return false;
    }
    return true;
}

bool SpatialGrid::same_as(const SpatialGrid& other) const {
    if (other.dim() != dim()) return false;
    for (std::size_t i = 0; i < axes_.size(); ++i) {
        const Axis& a = axes_[i];
        const Axis& b = other.axes_[i];
        if (a.points != b.points || a.min != b.min || a.max != b.max) return false;
    }
    return true;
}

// ------------------------------------------------------------ DensityField

double DensityField::integral() const {
    double sum = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) sum += grid.weight(i) * values[i];
    return sum;
}

double DensityField::peak() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

double DensityField::interpolate(const Vector& y) const {
    if (!grid.contains(y)) throw Error(ErrorCode::GridCoverage, "interpolation point lies outside the density grid");
    const int d = grid.dim();
    std::vector<int> lo(static_cast<std::size_t>(d));
    std::vector<double> frac(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        const Axis& a = grid.axis(i);
        const double pos = std::clamp((y(i) - a.min) / a.spacing(), 0.0, static_cast<double>(a.points - 1));
        int j = std::min(static_cast<int>(pos), a.points - 2);
        lo[static_cast<std::size_t>(i)] = j;
        frac[static_cast<std::size_t>(i)] = pos - j;
    }
    double out = 0.0;
    for (int corner = 0; corner < (1 << d); ++corner) {
        double w = 1.0;
        std::size_t flat = 0;
        for (int i = 0; i < d; ++i) {
            const bool up = (corner >> i) & 1;
            const auto ui = static_cast<std::size_t>(i);
            w *= up ? frac[ui] : 1.0 - frac[ui];
            flat = flat * static_cast<std::size_t>(grid.axis(i).points) + static_cast<std::size_t>(lo[ui] + (up ? 1 : 0));
        }
        if (w != 0.0) out += w * values[flat];
    }
    return out;
}

double DensityField::boundary_ratio() const {
    const double top = peak();
    if (top <= 0.0) return 0.0;
    double edge = 0.0;
    for (std::size_t f = 0; f < values.size(); ++f) {
        std::size_t rest = f;
        bool boundary = false;
        for (int i = grid.dim() - 1; i >= 0; --i) {
            const auto pts = static_cast<std::size_t>(grid.axis(i).points);
            const std::size_t j = rest % pts;
            rest /= pts;
            boundary = boundary || j == 0 || j == pts - 1;
        }
        if (boundary) edge = std::max(edge, values[f]);
    }
    return edge / top;
}

void DensityField::write_csv(std::ostream& out) const {
    for (int i = 1; i <= grid.dim(); ++i) out << 'y' << i << ',';
    out << "value\n";
    char buf[40];
    for (std::size_t f = 0; f < values.size(); ++f) {
        const Vector y = grid.node(f);
        for (int i = 0; i < grid.dim(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g,", y(i));
            out << buf;
        }
        std::snprintf(buf, sizeof buf, "%.17g", values[f]);
        out << buf << '\n';
    }
}

// ------------------------------------------------------------ closed forms

double vasicek_density(double alpha, double beta, double sigma, double s, double t, double x, double y) {
    if (!(beta > 0.0) || !(sigma > 0.0)) throw Error(ErrorCode::InvalidParameter, "Vasicek density needs beta, sigma > 0");
    if (!(t > s) || s < 0.0) throw Error(ErrorCode::InvalidParameter, "Vasicek density needs t > s >= 0");
    const double tau = t - s;
    const double decay = std::exp(-beta * tau);
    const double mean = x * decay + alpha * (1.0 - decay);
    const double var = sigma * sigma * (-std::expm1(-2.0 * beta * tau)) / (2.0 * beta);
    const double z = y - mean;
    return std::exp(-0.5 * z * z / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

DensityField vasicek_field(double alpha, double beta, double sigma, double s, double t, double x,
                           const SpatialGrid& grid) {
    if (grid.dim() != 1) throw Error(ErrorCode::InvalidParameter, "Vasicek field is 1-d");
    DensityField f{s, t, Vector::Constant(1, x), grid, {}, DensityKind::ClosedForm};
    f.values.resize(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) f.values[i] = vasicek_density(alpha, beta, sigma, s, t, x, grid.node(i)(0));
    return f;
}

DensityField gaussian_field(const Vector& mean, const Matrix& cov, const SpatialGrid& grid, double s, double t,
                            const Vector& x0) {
    if (mean.size() != grid.dim() || cov.rows() != grid.dim())
        throw Error(ErrorCode::InvalidParameter, "Gaussian field dimension mismatch");
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::NotSPD, "Gaussian field covariance is not SPD");
    const Matrix lower = llt.matrixL();
    const double log_norm = lower.diagonal().array().log().sum() +
                            0.5 * grid.dim() * std::log(2.0 * std::numbers::pi);
    DensityField f{s, t, x0.size() ? x0 : mean, grid, {}, DensityKind::ClosedForm};
    f.values.resize(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const Vector w = lower.triangularView<Eigen::Lower>().solve(grid.node(i) - mean);
        f.values[i] = std::exp(-0.5 * w.squaredNorm() - log_norm);
    }
    return f;
}

// -------------------------------------------------------- density evolution

namespace {

constexpr double kKernelWindow = 12.0;  // kernel truncated at 12 standard deviations
constexpr double kSourceCutoff = 1e-17;  // sources below this fraction of the peak are dropped

}  // namespace

DensityField evolve_chain_density(const ChainSpec& spec, const SpatialGrid& grid) {
    spec.check();
    if (spec.dim != 1 || grid.dim() != 1) throw Error(ErrorCode::InvalidParameter, "density evolution is 1-d only");
    const auto& fam = spec.innovations;
    if (!fam.gaussian && !fam.has_density())
        throw Error(ErrorCode::InvalidParameter, "innovations need an evaluable density");

    const Axis& axis = grid.axis(0);
    const int m = axis.points;
    const double dx = axis.spacing();
    const int n = spec.n();
    const double h = spec.grid.step();
    const double sqrt_h = std::sqrt(h);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);

    std::vector<double> ys(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) ys[static_cast<std::size_t>(j)] = axis.at(j);

    // Adds weight * (one-step kernel from x at step k) onto `out`.
    Vector xv(1), zv(1);
    auto scatter = [&](int k, double x, double weight, std::vector<double>& out) {
        const double t = spec.grid.point(k);
        xv(0) = x;
        const double mean = x + h * (spec.b_n(t)(0, 0) * x + spec.m_n(t, xv)(0));
        const double var = h * fam.covariance(t, xv)(0, 0);
        if (!(var > 0.0) || !std::isfinite(mean)) throw Error(ErrorCode::NonFiniteState, "degenerate one-step kernel");
        const double sd = std::sqrt(var);
        const int j0 = std::max(0, static_cast<int>(std::floor((mean - kKernelWindow * sd - axis.min) / dx)));
        const int j1 = std::min(m - 1, static_cast<int>(std::ceil((mean + kKernelWindow * sd - axis.min) / dx)));
        if (fam.gaussian) {
            const double scale = weight * inv_sqrt_2pi / sd;
            const double inv_two_var = 0.5 / var;
            for (int j = j0; j <= j1; ++j) {
                const double z = ys[static_cast<std::size_t>(j)] - mean;
                out[static_cast<std::size_t>(j)] += scale * std::exp(-z * z * inv_two_var);
            }
        } else {
            for (int j = j0; j <= j1; ++j) {
                zv(0) = (ys[static_cast<std::size_t>(j)] - mean) / sqrt_h;
                out[static_cast<std::size_t>(j)] += weight * fam.density(n, t, xv, zv) / sqrt_h;
            }
        }
    };

    std::vector<double> current(static_cast<std::size_t>(m), 0.0);
    scatter(0, spec.x0(0), 1.0, current);
    std::vector<double> next(static_cast<std::size_t>(m));
    for (int k = 1; k < n; ++k) {
        std::fill(next.begin(), next.end(), 0.0);
        const double top = *std::max_element(current.begin(), current.end());
        for (int i = 0; i < m; ++i) {
            const double p = current[static_cast<std::size_t>(i)];
            if (p <= kSourceCutoff * top) continue;
            const double w = (i == 0 || i == m - 1) ? 0.5 * dx : dx;
            scatter(k, ys[static_cast<std::size_t>(i)], p * w, next);
        }
        current.swap(next);
    }

    DensityField field{0.0, spec.grid.horizon(), spec.x0, grid, std::move(current), DensityKind::Evolved};
    const double mass = field.integral();
    if (mass < 1.0 - 5e-3)
        throw Error(ErrorCode::GridTooSmall, "evolved density lost mass (integral " + std::to_string(mass) +
                                                 "); enlarge the spatial grid");
    return field;
}

// --------------------------------------------------------------------- KDE

DensityField kde_estimate(const PathEnsemble& ensemble, int k, const SpatialGrid& grid,
                          std::optional<Vector> bandwidth) {
    const int d = ensemble.dim();
    if (grid.dim() != d) throw Error(ErrorCode::GridMismatch, "KDE grid dimension differs from the ensemble");
    const Matrix pts = ensemble.slice(k);
    const int count = ensemble.num_paths();
    Vector bw(d);
    if (bandwidth) {
        bw = *bandwidth;
    } else {
        const double factor = std::pow(4.0 / ((d + 2.0) * count), 1.0 / (d + 4.0));
        for (int i = 0; i < d; ++i) {
            const double mean = pts.col(i).mean();
            const double var = (pts.col(i).array() - mean).square().sum() / std::max(count - 1, 1);
            bw(i) = std::sqrt(var) * factor;
        }
    }
    // Rule-of-thumb bandwidths never drop below the grid spacing, so a
    // (numerically) zero spread still yields a resolvable kernel.
    for (int i = 0; i < d; ++i)
        if (!bandwidth || !(bw(i) > 0.0)) bw(i) = std::max(bw(i), grid.axis(i).spacing());

    DensityField field{0.0, ensemble.grid().point(k), ensemble.state(0, 0), grid, {}, DensityKind::Kde};
    field.values.assign(grid.size(), 0.0);
    const double norm = 1.0 / (count * std::pow(2.0 * std::numbers::pi, 0.5 * d) * bw.prod());
    const double window = 8.0;

    std::vector<std::vector<double>> kernel(static_cast<std::size_t>(d));
    std::vector<int> first(static_cast<std::size_t>(d));
    for (int p = 0; p < count; ++p) {
        bool any = true;
        for (int i = 0; i < d; ++i) {
            const Axis& a = grid.axis(i);
            const double c = pts(p, i);
            const int j0 = std::max(0, static_cast<int>(std::floor((c - window * bw(i) - a.min) / a.spacing())));
            const int j1 = std::min(a.points - 1, static_cast<int>(std::ceil((c + window * bw(i) - a.min) / a.spacing())));
            auto& kv = kernel[static_cast<std::size_t>(i)];
            kv.clear();
            first[static_cast<std::size_t>(i)] = j0;
            for (int j = j0; j <= j1; ++j) {
                const double z = (a.at(j) - c) / bw(i);
                kv.push_back(std::exp(-0.5 * z * z));
            }
            any = any && !kv.empty();
        }
        if (!any) continue;
        if (d == 1) {
            const auto& kv = kernel[0];
            for (std::size_t j = 0; j < kv.size(); ++j)
                field.values[static_cast<std::size_t>(first[0]) + j] += norm * kv[j];
        } else {
            // General tensor accumulation over the kernel windows.
            std::vector<std::size_t> idx(static_cast<std::size_t>(d), 0);
            while (true) {
                double w = norm;
                std::size_t flat = 0;
                for (int i = 0; i < d; ++i) {
                    const auto ui = static_cast<std::size_t>(i);
                    w *= kernel[ui][idx[ui]];
                    flat = flat * static_cast<std::size_t>(grid.axis(i).points) +
                           static_cast<std::size_t>(first[ui]) + idx[ui];
                }
                field.values[flat] += w;
                int ax = d - 1;
                while (ax >= 0 && ++idx[static_cast<std::size_t>(ax)] == kernel[static_cast<std::size_t>(ax)].size()) {
                    idx[static_cast<std::size_t>(ax)] = 0;
                    --ax;
                }
                if (ax < 0) break;
            }
        }
    }
    return field;
}

// --------------------------------------------------------- transformations

DensityField transform_density(const DensityField& field, const FundamentalMatrixTable& phi, double s, double t,
                               TransformDirection direction, std::optional<SpatialGrid> target) {
    const int d = field.grid.dim();
    if (phi.dim() != d) throw Error(ErrorCode::GridMismatch, "fundamental matrix dimension differs from the field");
    const Matrix phi_s = phi.phi_at(s);
    const Matrix phi_t = phi.phi_at(t);
    // `into_source` maps a target point to the source field's coordinates.
    const bool to_original = direction == TransformDirection::ToOriginal;
    const Matrix into_source = to_original ? Matrix(phi_t.inverse()) : phi_t;
    const Matrix source_x = to_original ? phi_s : Matrix(phi_s.inverse());
    const double jac = std::abs(into_source.determinant());
    if (jac < kSingularityTolerance) throw Error(ErrorCode::SingularFundamentalMatrix, "singular density transform");

    SpatialGrid out_grid = field.grid;
    if (target) {
        out_grid = *target;
    } else {
        const Matrix out_of_source = into_source.inverse();
        if ((out_of_source - Matrix(out_of_source.diagonal().asDiagonal())).cwiseAbs().maxCoeff() > 0.0)
            throw Error(ErrorCode::InvalidParameter, "non-diagonal transform needs an explicit target grid");
        std::vector<Axis> axes;
        for (int i = 0; i < d; ++i) {
            const Axis& a = field.grid.axis(i);
            const double lo = out_of_source(i, i) * a.min;
            const double hi = out_of_source(i, i) * a.max;
            axes.push_back({std::min(lo, hi), std::max(lo, hi), a.points});
        }
        out_grid = SpatialGrid(std::move(axes));
    }

    DensityField out{s, t, source_x * field.x0, out_grid, {}, DensityKind::Transformed};
    out.values.resize(out_grid.size());
    for (std::size_t i = 0; i < out_grid.size(); ++i) {
        Vector y = into_source * out_grid.node(i);
        if (!field.grid.contains(y, 1e-9))
            throw Error(ErrorCode::GridCoverage, "transformed grid point falls outside the source field");
        for (int a = 0; a < d; ++a) y(a) = std::clamp(y(a), field.grid.axis(a).min, field.grid.axis(a).max);
        out.values[i] = jac * field.interpolate(y);
    }
    return out;
}

// ------------------------------------------------------------ distances

WeightedDistance weighted_sup_distance(const DensityField& p1, const DensityField& p2, const Matrix& phi1,
                                       const Vector& x, int sprime) {
    if (!p1.grid.same_as(p2.grid) || p1.values.size() != p2.values.size())
        throw Error(ErrorCode::GridMismatch, "density fields live on different grids");
    if (p1.s != p2.s || p1.t != p2.t) throw Error(ErrorCode::GridMismatch, "density fields differ in (s, t)");
    if (sprime < 1) throw Error(ErrorCode::InvalidParameter, "S' must be >= 1");
    const double power = 2.0 * (sprime - 1);
    const Matrix inv = phi1.inverse();
    const double det = std::abs(phi1.determinant());
    const Vector pushed = phi1 * x;
    auto weight = [power](double r) { return 1.0 + std::pow(r, power); };

    WeightedDistance dist;
    dist.kappa = std::max(operator_norm(phi1), operator_norm(inv));
    for (std::size_t i = 0; i < p1.values.size(); ++i) {
        const double gap = std::abs(p1.values[i] - p2.values[i]);
        if (gap == 0.0) continue;
        const Vector u = p1.grid.node(i);
        dist.forward = std::max(dist.forward, weight((u - x).norm()) * det * gap);
        dist.pullback = std::max(dist.pullback, weight((inv * u - x).norm()) * gap);
        dist.pushforward = std::max(dist.pushforward, weight((u - pushed).norm()) * gap);
    }
    return dist;
}

// ----------------------------------------------------------- tail bounds

TailFit fit_gaussian_envelope(const DensityField& field, const Matrix& phi_inv, const Vector& x, double core) {
    const double top = field.peak();
    TailFit fit;
    if (top <= 0.0) return fit;
    // Least squares of log p against r^2 on the core.
    double sw = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < field.values.size(); ++i) {
        const double p = field.values[i];
        if (p < core * top) continue;
        const double r2 = (phi_inv * field.grid.node(i) - x).squaredNorm();
        const double lp = std::log(p);
        pts.emplace_back(r2, lp);
        sw += 1.0;
        sx += r2;
        sy += lp;
        sxx += r2 * r2;
        sxy += r2 * lp;
    }
    const double denom = sw * sxx - sx * sx;
    if (pts.size() < 2 || denom <= 0.0) return fit;
    fit.c2 = -(sw * sxy - sx * sy) / denom;
    double log_c1 = -std::numeric_limits<double>::infinity();
    for (const auto& [r2, lp] : pts) log_c1 = std::max(log_c1, lp + fit.c2 * r2);
    fit.c1 = std::exp(log_c1);
    return fit;
}

TailReport gaussian_tail_check(const DensityField& field, const Matrix& phi_inv, const Vector& x,
                               std::optional<TailFit> constants) {
    TailReport report;
    report.fit = constants ? *constants : fit_gaussian_envelope(field, phi_inv, x);
    report.finite = std::isfinite(report.fit.c1) && report.fit.c1 > 0.0 && report.fit.c2 > 0.0 &&
                    std::isfinite(report.fit.c2);
    for (std::size_t i = 0; i < field.values.size(); ++i) {
        const double p = field.values[i];
        ++report.points_checked;
        if (p <= 0.0) continue;
        const double r2 = (phi_inv * field.grid.node(i) - x).squaredNorm();
        // Compared in log space; the envelope underflows long before p does.
        const double log_bound = std::log(report.fit.c1) - report.fit.c2 * r2;
        if (!report.finite || std::log(p) > log_bound + 1e-9) ++report.violations;
    }
    return report;
}

}  // namespace tdx
