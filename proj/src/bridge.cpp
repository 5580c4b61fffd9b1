#include "cvlift/bridge.hpp"

#include "cvlift/kernels.hpp"
#include "cvlift/parallel.hpp"
#include "cvlift/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace cvlift {

using nlohmann::json;

namespace {
constexpr uint64_t kResampleStream = 0x52534d50ull;
constexpr uint64_t kStartStream = 0x53545254ull;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
} // namespace

Histogram2D Histogram2D::like(const Grid2D& g) {
    Histogram2D h;
    h.xmin = g.xmin;
    h.xmax = g.xmax;
    h.ymin = g.ymin;
    h.ymax = g.ymax;
    h.nx = g.nx;
    h.ny = g.ny;
    h.counts.assign(static_cast<std::size_t>(g.nx) * g.ny, 0.0);
    return h;
}

void Histogram2D::add(double x, double y, double w) {
    if (x < xmin || x >= xmax || y < ymin || y >= ymax) return;
    const int i = static_cast<int>((x - xmin) / (xmax - xmin) * nx);
    const int j = static_cast<int>((y - ymin) / (ymax - ymin) * ny);
    counts[static_cast<std::size_t>(j) * nx + i] += w;
}

double Histogram2D::total() const {
    double s = 0.0;
    for (double c : counts) s += c;
    return s;
}

void Histogram2D::save_csv(const std::string& path) const {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("cannot open " + path);
    std::fprintf(f, "x,y,count\n");
    const double hx = (xmax - xmin) / nx, hy = (ymax - ymin) / ny;
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i)
            std::fprintf(f, "%.10g,%.10g,%.10g\n", xmin + (i + 0.5) * hx,
                         ymin + (j + 0.5) * hy, counts[static_cast<std::size_t>(j) * nx + i]);
    std::fclose(f);
}

Vec normalize_log_weights(const std::vector<double>& logw) {
    const int n = static_cast<int>(logw.size());
    if (n == 0) throw EnsembleError("empty ensemble");
    double mx = kNegInf;
    for (double v : logw) mx = std::max(mx, v);
    if (!std::isfinite(mx)) throw EnsembleError("all path weights vanished");
    Vec w(n);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        w[i] = std::exp(logw[i] - mx);
        sum += w[i];
    }
    w /= sum;
    return w;
}

double ess_of(const Vec& normalized) {
    const double s2 = normalized.squaredNorm();
    if (!(s2 > 0.0)) throw EnsembleError("degenerate weights");
    return 1.0 / s2;
}

void WeightedPathEnsemble::write_csv(const std::string& path) const {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("cannot open " + path);
    std::fprintf(f, "path_id,t");
    for (int i = 1; i <= dim; ++i) std::fprintf(f, ",x_%d", i);
    std::fprintf(f, ",logw\n");
    if (!stored.empty()) {
        for (std::size_t s = 0; s < stored.size(); ++s) {
            const PathRecord& rec = stored[s];
            const double lw = log_weights.empty() ? 0.0 : log_weights[s];
            for (int n = 0; n <= rec.steps(); ++n) {
                std::fprintf(f, "%zu,%.10g", s, rec.time(n));
                for (int c = 0; c < dim; ++c) std::fprintf(f, ",%.10g", rec.state(n)[c]);
                std::fprintf(f, ",%.10g\n", lw);
            }
        }
    } else {
        for (int p = 0; p < n_paths(); ++p) {
            std::fprintf(f, "%d,%.10g", p, stop_times.empty() ? t0 + steps * dt : stop_times[p]);
            for (int c = 0; c < dim; ++c) std::fprintf(f, ",%.10g", endpoints(p, c));
            std::fprintf(f, ",%.10g\n", log_weights.empty() ? 0.0 : log_weights[p]);
        }
    }
    std::fclose(f);
}

json WeightedPathEnsemble::resample_log_json() const {
    json events = json::array();
    for (std::size_t e = 0; e < resample_log.size(); ++e) {
        json ev;
        ev["step"] = resample_log[e].first;
        ev["ess"] = e < resample_ess.size() ? resample_ess[e] : 0.0;
        ev["parents"] = resample_log[e].second;
        events.push_back(std::move(ev));
    }
    return events;
}

namespace {

// ---------------------------------------------------------------------------
// shared per-path outputs, indexed by the original path id; chunks write
// disjoint rows so no synchronization is needed
// ---------------------------------------------------------------------------
struct EnsembleAccum {
    int dim = 0;
    int n = 0;
    Mat endpoints;
    std::vector<double> logw;
    std::vector<double> soc;
    std::vector<double> end_latent;
    std::vector<double> stop_times;
    std::vector<PathFlags> flags;
    std::vector<PathRecord> stored;
    std::vector<long> steps_run;

    EnsembleAccum(int n_paths, int d, bool with_latent, bool with_storage)
        : dim(d), n(n_paths) {
        endpoints.setZero(n_paths, d);
        logw.assign(n_paths, 0.0);
        soc.assign(n_paths, 0.0);
        if (with_latent)
            end_latent.assign(n_paths, std::numeric_limits<double>::quiet_NaN());
        stop_times.assign(n_paths, 0.0);
        flags.resize(n_paths);
        if (with_storage) stored.resize(n_paths);
        steps_run.assign(n_paths, 0);
    }
};

bool level_stop(const BridgeOptions& opt, double z) {
    return opt.stop_on_levels && (z <= opt.level_a || z >= opt.level_b);
}

void note_levels(const BridgeOptions& opt, PathFlags& fl, double z, double t) {
    if (!(opt.stop_on_levels || opt.track_levels)) return;
    if (z <= opt.level_a && !fl.hit_a) {
        fl.hit_a = true;
        fl.hit_a_time = t;
    }
    if (z >= opt.level_b && !fl.hit_b) {
        fl.hit_b = true;
        fl.hit_b_time = t;
    }
}

void start_record(EnsembleAccum& acc, const BridgeOptions& opt, int p, int d,
                  const double* x) {
    PathRecord& rec = acc.stored[p];
    rec.t0 = opt.t0;
    rec.dt = opt.dt * opt.record_stride;
    rec.dim = d;
    rec.seed = opt.seed;
    rec.stream = opt.stream_offset + p;
    rec.states.assign(x, x + d);
}

// ---------------------------------------------------------------------------
// batched 2D engine (double-well drift + grid-chi latent map); one chunk of
// paths in SoA layout; slots compact away as paths stop
// ---------------------------------------------------------------------------
class Chunk2D {
  public:
    Chunk2D(const SystemSpec& spec, const ControlLaw* control, const GridChi* chi,
            const BridgeOptions& opt, const Vec& x0, int lo, int hi, EnsembleAccum& acc)
        : spec_(spec), control_(control), chi_(chi), opt_(opt), acc_(acc),
          params_{spec.alpha(), spec.beta(), spec.gamma()}, na_(hi - lo) {
        const int m = na_;
        x1_.resize(m);
        x2_.resize(m);
        f1_.resize(m);
        f2_.resize(m);
        u1_.assign(m, 0.0);
        u2_.assign(m, 0.0);
        e1_.resize(m);
        e2_.resize(m);
        z_.assign(m, 0.0);
        gx_.resize(m);
        gy_.resize(m);
        clamp_.assign(m, 0);
        owner_.resize(m);
        logw_.assign(m, 0.0);
        block_ref_.assign(m, 0.0);
        soc_.assign(m, 0.0);
        rng_.reserve(m);
        const bool per_path_starts = opt.starts.rows() == acc.n;
        for (int s = 0; s < m; ++s) {
            const int p = lo + s;
            owner_[s] = p;
            rng_.emplace_back(opt.seed, opt.stream_offset + p);
            x1_[s] = per_path_starts ? opt.starts(p, 0) : x0[0];
            x2_[s] = per_path_starts ? opt.starts(p, 1) : x0[1];
            if (opt.record_stride > 0) {
                const double xy[2] = {x1_[s], x2_[s]};
                start_record(acc, opt, p, 2, xy);
            }
        }
        sqrt_dt_ = std::sqrt(opt.dt);
        noise_coef_ = spec.sigma() * sqrt_dt_;
        per_step_latent_ = chi_ && (opt.stop_on_levels || opt.track_levels);
        if (per_step_latent_) {
            eval_latent();
            for (int s = na_ - 1; s >= 0; --s) {
                note_levels(opt_, acc_.flags[owner_[s]], z_[s], opt_.t0);
                if (level_stop(opt_, z_[s])) finalize_slot(s, opt_.t0, false);
            }
        }
    }

    int active() const { return na_; }
    void set_allow_compaction(bool v) { allow_compaction_ = v; }
    void begin_block() { block_ref_ = logw_; }
    double block_logw(int s) const { return logw_[s] - block_ref_[s]; }
    std::vector<double> active_block_logw() const {
        std::vector<double> out(na_);
        for (int s = 0; s < na_; ++s) out[s] = block_logw(s);
        return out;
    }
    double cumulative_logw(int s) const { return logw_[s]; }
    void get_state(int s, double& a, double& b) const {
        a = x1_[s];
        b = x2_[s];
    }
    void set_state(int s, double a, double b) {
        x1_[s] = a;
        x2_[s] = b;
    }
    void reset_logw(int s) { logw_[s] = 0.0; }

    void run_steps(int step0, int n_steps, double gain_scale) {
        for (int k = 0; k < n_steps && na_ > 0; ++k) {
            const int n = step0 + k;
            const double t = opt_.t0 + n * opt_.dt;
            const std::size_t m = static_cast<std::size_t>(na_);

            kernels::dw2d_force(params_, x1_.data(), x2_.data(), m, f1_.data(), f2_.data());
            if (control_) {
                control_->eval_batch_2d(t, gain_scale, x1_.data(), x2_.data(), m,
                                        u1_.data(), u2_.data(), z_.data(), gx_.data(),
                                        gy_.data(), clamp_.data());
                note_clamps();
                kernels::axpby_add(spec_.sigma(), u1_.data(), 0.0, u1_.data(), f1_.data(), m);
                kernels::axpby_add(spec_.sigma(), u2_.data(), 0.0, u2_.data(), f2_.data(), m);
            }
            for (std::size_t s = 0; s < m; ++s) {
                e1_[s] = rng_[s].normal();
                e2_[s] = rng_[s].normal();
            }
            kernels::axpby_add(opt_.dt, f1_.data(), noise_coef_, e1_.data(), x1_.data(), m);
            kernels::axpby_add(opt_.dt, f2_.data(), noise_coef_, e2_.data(), x2_.data(), m);
            if (control_ && opt_.track_weights)
                kernels::girsanov_accum_2d(u1_.data(), u2_.data(), e1_.data(), e2_.data(),
                                           sqrt_dt_, opt_.dt, logw_.data(), m);
            if (control_ && opt_.track_soc_cost)
                for (std::size_t s = 0; s < m; ++s)
                    soc_[s] += 0.5 * opt_.dt * (u1_[s] * u1_[s] + u2_[s] * u2_[s]);

            const double t1 = t + opt_.dt;
            for (int s = na_ - 1; s >= 0; --s) {
                acc_.steps_run[owner_[s]] += 1;
                const bool bad = !std::isfinite(x1_[s]) || !std::isfinite(x2_[s]) ||
                                 x1_[s] * x1_[s] + x2_[s] * x2_[s] >
                                     opt_.divergence_norm * opt_.divergence_norm;
                if (bad) {
                    if (allow_compaction_) {
                        finalize_slot(s, t1, true);
                    } else {
                        // SMC mode: park the path with zero weight; the next
                        // resampling replaces it
                        acc_.flags[owner_[s]].diverged = true;
                        logw_[s] = kNegInf;
                        x1_[s] = 0.0;
                        x2_[s] = 0.0;
                    }
                    continue;
                }
                if (opt_.record_stride > 0 && (n + 1) % opt_.record_stride == 0) {
                    PathRecord& rec = acc_.stored[owner_[s]];
                    rec.states.push_back(x1_[s]);
                    rec.states.push_back(x2_[s]);
                }
            }
            if (per_step_latent_ && na_ > 0) {
                eval_latent();
                for (int s = na_ - 1; s >= 0; --s) {
                    note_levels(opt_, acc_.flags[owner_[s]], z_[s], t1);
                    if (allow_compaction_ && level_stop(opt_, z_[s]))
                        finalize_slot(s, t1, false);
                }
            }
        }
    }

    void finalize_remaining(double t_end) {
        if (chi_ && na_ > 0) eval_latent();
        for (int s = na_ - 1; s >= 0; --s) finalize_slot(s, t_end, false);
    }

  private:
    void eval_latent() {
        chi_->eval_batch(x1_.data(), x2_.data(), static_cast<std::size_t>(na_), z_.data(),
                         nullptr, nullptr, clamp_.data());
        note_clamps();
    }

    void note_clamps() {
        for (int s = 0; s < na_; ++s)
            if (clamp_[s]) acc_.flags[owner_[s]].clamped = true;
    }

    void finalize_slot(int s, double t, bool diverged) {
        const int p = owner_[s];
        acc_.endpoints(p, 0) = x1_[s];
        acc_.endpoints(p, 1) = x2_[s];
        acc_.logw[p] = diverged ? kNegInf : logw_[s];
        acc_.soc[p] = soc_[s];
        acc_.stop_times[p] = t;
        acc_.flags[p].diverged = acc_.flags[p].diverged || diverged;
        if (!acc_.end_latent.empty() && chi_ && !diverged) acc_.end_latent[p] = z_[s];
        const int last = na_ - 1;
        if (s != last) {
            x1_[s] = x1_[last];
            x2_[s] = x2_[last];
            z_[s] = z_[last];
            logw_[s] = logw_[last];
            block_ref_[s] = block_ref_[last];
            soc_[s] = soc_[last];
            owner_[s] = owner_[last];
            std::swap(rng_[s], rng_[last]);
        }
        --na_;
        x1_.resize(na_);
        x2_.resize(na_);
        f1_.resize(na_);
        f2_.resize(na_);
        u1_.resize(na_);
        u2_.resize(na_);
        e1_.resize(na_);
        e2_.resize(na_);
        z_.resize(na_);
        gx_.resize(na_);
        gy_.resize(na_);
        clamp_.resize(na_);
        owner_.resize(na_);
        logw_.resize(na_);
        block_ref_.resize(na_);
        soc_.resize(na_);
        rng_.erase(rng_.begin() + na_, rng_.end());
    }

    const SystemSpec& spec_;
    const ControlLaw* control_;
    const GridChi* chi_;
    const BridgeOptions& opt_;
    EnsembleAccum& acc_;
    kernels::Dw2dParams params_;
    int na_;
    bool allow_compaction_ = true;
    bool per_step_latent_ = false;
    double sqrt_dt_ = 0.0, noise_coef_ = 0.0;
    std::vector<double> x1_, x2_, f1_, f2_, u1_, u2_, e1_, e2_, z_, gx_, gy_;
    std::vector<double> logw_, block_ref_, soc_;
    std::vector<uint8_t> clamp_;
    std::vector<int> owner_;
    std::vector<StreamRng> rng_;
};

// ---------------------------------------------------------------------------
// generic per-path engine (any dimension / dynamics / CV)
// ---------------------------------------------------------------------------
struct GenericPathState {
    Vec x;
    StreamRng rng;
    double logw = 0.0;
    double soc = 0.0;
    bool done = false;
};

class GenericEngine {
  public:
    GenericEngine(const Dynamics& dyn, const ControlLaw* control,
                  const CollectiveVariable* monitor_cv, const BridgeOptions& opt,
                  const Vec& x0, int lo, int hi, EnsembleAccum& acc)
        : dyn_(dyn), control_(control),
          monitor_(control ? &control->cv() : monitor_cv), opt_(opt), acc_(acc), lo_(lo) {
        const int d = dyn.dim();
        const bool per_path_starts = opt.starts.rows() == acc.n;
        const bool per_step_latent = monitor_ && (opt.stop_on_levels || opt.track_levels);
        for (int p = lo; p < hi; ++p) {
            GenericPathState st{per_path_starts ? Vec(opt.starts.row(p).transpose()) : x0,
                                StreamRng(opt.seed, opt.stream_offset + p)};
            states_.push_back(std::move(st));
            if (opt.record_stride > 0)
                start_record(acc, opt, p, d, states_.back().x.data());
            if (per_step_latent) {
                bool cl = false;
                const double z = monitor_->value(states_.back().x, &cl);
                PathFlags& fl = acc_.flags[p];
                if (cl) fl.clamped = true;
                note_levels(opt_, fl, z, opt_.t0);
                if (allow_stops_ && level_stop(opt_, z))
                    finalize(p, states_.back(), opt_.t0, false, z);
            }
        }
        sqrt_dt_ = std::sqrt(opt.dt);
    }

    void set_allow_stops(bool v) { allow_stops_ = v; }
    void begin_block() {
        block_ref_.resize(states_.size());
        for (std::size_t s = 0; s < states_.size(); ++s) block_ref_[s] = states_[s].logw;
    }

    void run_steps(int step0, int n_steps, double gain_scale) {
        const int d = dyn_.dim();
        const double sigma = dyn_.sigma();
        const double noise_coef = sigma * sqrt_dt_;
        const bool per_step_latent = monitor_ && (opt_.stop_on_levels || opt_.track_levels);
        Vec b(d), u(d), eta(d);
        for (std::size_t s = 0; s < states_.size(); ++s) {
            GenericPathState& st = states_[s];
            if (st.done) continue;
            const int p = lo_ + static_cast<int>(s);
            PathFlags& fl = acc_.flags[p];
            for (int k = 0; k < n_steps; ++k) {
                const int n = step0 + k;
                const double t = opt_.t0 + n * opt_.dt;
                dyn_.drift(st.x.data(), b.data());
                if (control_) control_->eval_scaled(t, st.x.data(), u.data(), gain_scale);
                double usq = 0.0, udot = 0.0;
                for (int i = 0; i < d; ++i) {
                    eta[i] = st.rng.normal();
                    const double f = control_ ? b[i] + sigma * u[i] : b[i];
                    st.x[i] += f * opt_.dt + noise_coef * eta[i];
                    if (control_) {
                        usq += u[i] * u[i];
                        udot += u[i] * eta[i];
                    }
                }
                acc_.steps_run[p] += 1;
                if (control_ && opt_.track_weights)
                    st.logw += -udot * sqrt_dt_ - 0.5 * usq * opt_.dt;
                if (control_ && opt_.track_soc_cost) st.soc += 0.5 * usq * opt_.dt;

                const double t1 = t + opt_.dt;
                bool bad = false;
                double nrm2 = 0.0;
                for (int i = 0; i < d; ++i) {
                    if (!std::isfinite(st.x[i])) bad = true;
                    nrm2 += st.x[i] * st.x[i];
                }
                if (bad || nrm2 > opt_.divergence_norm * opt_.divergence_norm) {
                    if (allow_stops_) {
                        finalize(p, st, t1, true, std::numeric_limits<double>::quiet_NaN());
                        break;
                    }
                    fl.diverged = true;
                    st.logw = kNegInf;
                    st.x.setZero();
                    continue;
                }
                if (opt_.record_stride > 0 && (n + 1) % opt_.record_stride == 0) {
                    PathRecord& rec = acc_.stored[p];
                    rec.states.insert(rec.states.end(), st.x.data(), st.x.data() + d);
                }
                if (per_step_latent) {
                    bool cl = false;
                    const double z = monitor_->value(st.x, &cl);
                    if (cl) fl.clamped = true;
                    note_levels(opt_, fl, z, t1);
                    if (allow_stops_ && level_stop(opt_, z)) {
                        finalize(p, st, t1, false, z);
                        break;
                    }
                }
            }
        }
    }

    void finalize_remaining(double t_end) {
        for (std::size_t s = 0; s < states_.size(); ++s) {
            GenericPathState& st = states_[s];
            if (st.done) continue;
            double z = std::numeric_limits<double>::quiet_NaN();
            if (monitor_) z = monitor_->value(st.x);
            finalize(lo_ + static_cast<int>(s), st, t_end, false, z);
        }
    }

    GenericPathState& state(int local) { return states_[local]; }
    double block_logw(int local) const {
        return states_[local].logw - block_ref_[local];
    }

  private:
    void finalize(int p, GenericPathState& st, double t, bool diverged, double z) {
        acc_.endpoints.row(p) = st.x.transpose();
        acc_.logw[p] = diverged ? kNegInf : st.logw;
        acc_.soc[p] = st.soc;
        acc_.stop_times[p] = t;
        acc_.flags[p].diverged = acc_.flags[p].diverged || diverged;
        if (!acc_.end_latent.empty() && monitor_ && !diverged) acc_.end_latent[p] = z;
        st.done = true;
    }

    const Dynamics& dyn_;
    const ControlLaw* control_;
    const CollectiveVariable* monitor_;
    const BridgeOptions& opt_;
    EnsembleAccum& acc_;
    int lo_;
    bool allow_stops_ = true;
    double sqrt_dt_ = 0.0;
    std::vector<GenericPathState> states_;
    std::vector<double> block_ref_;
};

const GridChi* batch_chi(const ControlLaw* control, const CollectiveVariable* monitor) {
    if (monitor) return dynamic_cast<const GridChi*>(monitor);
    if (control) return dynamic_cast<const GridChi*>(&control->cv());
    return nullptr;
}

bool can_batch(const Dynamics& dyn, const ControlLaw* control,
               const CollectiveVariable* monitor) {
    const auto* spec = dynamic_cast<const SystemSpec*>(&dyn);
    if (!spec || spec->kind() != PotentialKind::DoubleWell2d) return false;
    if (control && !control->supports_batch_2d()) return false;
    if (monitor && !dynamic_cast<const GridChi*>(monitor)) return false;
    return true;
}

WeightedPathEnsemble finalize_ensemble(EnsembleAccum&& acc, const BridgeOptions& opt,
                                       int steps) {
    WeightedPathEnsemble ens;
    ens.dim = acc.dim;
    ens.t0 = opt.t0;
    ens.dt = opt.dt;
    ens.steps = steps;
    ens.seed = opt.seed;
    ens.endpoints = std::move(acc.endpoints);
    ens.log_weights = std::move(acc.logw);
    ens.soc_costs = std::move(acc.soc);
    ens.end_latent = std::move(acc.end_latent);
    ens.stop_times = std::move(acc.stop_times);
    ens.flags = std::move(acc.flags);
    ens.stored = std::move(acc.stored);
    for (long s : acc.steps_run) ens.total_steps += s;

    int alive = 0;
    for (const auto& fl : ens.flags) alive += fl.diverged ? 0 : 1;
    if (alive == 0) throw EnsembleError("all paths diverged");
    ens.normalized = normalize_log_weights(ens.log_weights);
    ens.ess = ess_of(ens.normalized);
    return ens;
}

int steps_for(const BridgeOptions& opt) {
    const double raw = opt.horizon / opt.dt;
    const int m = static_cast<int>(std::lround(raw));
    if (m < 1) throw InvalidInputError("horizon shorter than one step");
    if (std::abs(raw - m) > 1e-9 * std::max(1.0, raw))
        throw InvalidInputError("dt must divide the horizon");
    return m;
}

void validate_bridge_inputs(const Dynamics& dyn, const Vec& x0, const BridgeOptions& opt) {
    if (opt.n_paths < 1) throw InvalidInputError("need at least one path");
    if (opt.starts.rows() != 0 &&
        (opt.starts.rows() != opt.n_paths || opt.starts.cols() != dyn.dim()))
        throw InvalidInputError("starts matrix has wrong shape");
    if (opt.starts.rows() == 0 && x0.size() != dyn.dim())
        throw InvalidInputError("x0 has wrong dimension");
}

} // namespace

WeightedPathEnsemble run_guided_bridge(const Dynamics& dyn, const ControlLaw* control,
                                       const Vec& x0, const BridgeOptions& opt) {
    validate_bridge_inputs(dyn, x0, opt);
    if ((opt.stop_on_levels || opt.track_levels) && !opt.monitor && !control)
        throw InvalidInputError("level tracking needs a monitor CV or a control");
    const int steps = steps_for(opt);

    const CollectiveVariable* monitor = opt.monitor.get();
    const bool with_latent = control != nullptr || monitor != nullptr;
    EnsembleAccum acc(opt.n_paths, dyn.dim(), with_latent, opt.record_stride > 0);

    if (can_batch(dyn, control, monitor)) {
        const auto& spec = static_cast<const SystemSpec&>(dyn);
        const GridChi* chi = batch_chi(control, monitor);
        parallel_chunks(opt.n_paths, [&](std::size_t lo, std::size_t hi) {
            Chunk2D chunk(spec, control, chi, opt, x0, static_cast<int>(lo),
                          static_cast<int>(hi), acc);
            chunk.run_steps(0, steps, 1.0);
            chunk.finalize_remaining(opt.t0 + opt.horizon);
        });
    } else {
        parallel_chunks(opt.n_paths, [&](std::size_t lo, std::size_t hi) {
            GenericEngine eng(dyn, control, monitor, opt, x0, static_cast<int>(lo),
                              static_cast<int>(hi), acc);
            eng.run_steps(0, steps, 1.0);
            eng.finalize_remaining(opt.t0 + opt.horizon);
        });
    }
    return finalize_ensemble(std::move(acc), opt, steps);
}

WeightedPathEnsemble run_smc_bridge(const Dynamics& dyn, const ControlLaw* control,
                                    const Vec& x0, const BridgeOptions& opt,
                                    double ess_threshold, int block_steps) {
    if (ess_threshold < 0.0 || ess_threshold >= 1.0)
        throw InvalidInputError("ess threshold must lie in [0,1)");
    if (block_steps < 1) throw InvalidInputError("block must be at least one step");
    if (opt.stop_on_levels)
        throw InvalidInputError("level stopping is not supported in the SMC variant");
    validate_bridge_inputs(dyn, x0, opt);
    const int steps = steps_for(opt);
    const int n = opt.n_paths;

    const CollectiveVariable* monitor = opt.monitor.get();
    const bool with_latent = control != nullptr || monitor != nullptr;
    EnsembleAccum acc(n, dyn.dim(), with_latent, opt.record_stride > 0);

    const bool batch = can_batch(dyn, control, monitor);
    const auto* spec = batch ? &static_cast<const SystemSpec&>(dyn) : nullptr;
    const GridChi* chi = batch ? batch_chi(control, monitor) : nullptr;

    // fixed chunks, no compaction: slots stay addressable for resampling
    std::vector<std::pair<int, int>> ranges;
    {
        const std::size_t workers =
            std::max<std::size_t>(1, std::min<std::size_t>(max_threads(), n));
        const std::size_t chunk = (n + workers - 1) / workers;
        for (std::size_t lo = 0; lo < static_cast<std::size_t>(n); lo += chunk)
            ranges.emplace_back(static_cast<int>(lo),
                                static_cast<int>(std::min<std::size_t>(n, lo + chunk)));
    }
    std::vector<std::unique_ptr<Chunk2D>> bchunks;
    std::vector<std::unique_ptr<GenericEngine>> gchunks;
    for (auto [lo, hi] : ranges) {
        if (batch) {
            bchunks.push_back(
                std::make_unique<Chunk2D>(*spec, control, chi, opt, x0, lo, hi, acc));
            bchunks.back()->set_allow_compaction(false);
        } else {
            gchunks.push_back(std::make_unique<GenericEngine>(dyn, control, monitor, opt,
                                                              x0, lo, hi, acc));
            gchunks.back()->set_allow_stops(false);
        }
    }
    auto chunk_of = [&](int p) {
        return std::min<std::size_t>(ranges.size() - 1,
                                     static_cast<std::size_t>(p) /
                                         (ranges[0].second - ranges[0].first));
    };

    std::vector<std::pair<int, std::vector<int>>> log;
    std::vector<double> log_ess;
    StreamRng resample_rng(opt.seed, kResampleStream);
    std::vector<double> cum_logw(n, 0.0);

    int done = 0;
    while (done < steps) {
        const int todo = std::min(block_steps, steps - done);
        parallel_chunks(ranges.size(), [&](std::size_t clo, std::size_t cho) {
            for (std::size_t c = clo; c < cho; ++c) {
                if (batch)
                    bchunks[c]->run_steps(done, todo, 1.0);
                else
                    gchunks[c]->run_steps(done, todo, 1.0);
            }
        });
        done += todo;
        if (done >= steps) break;
        if (ess_threshold <= 0.0) continue;

        for (int p = 0; p < n; ++p) {
            const std::size_t c = chunk_of(p);
            const int local = p - ranges[c].first;
            cum_logw[p] = batch ? bchunks[c]->cumulative_logw(local)
                                : gchunks[c]->state(local).logw;
        }
        Vec w = normalize_log_weights(cum_logw);
        const double e = ess_of(w);
        if (e < ess_threshold * n) {
            // systematic resampling
            std::vector<int> parents(n);
            const double u0 = resample_rng.uniform() / n;
            double cdf = w[0];
            int j = 0;
            for (int i = 0; i < n; ++i) {
                const double point = u0 + static_cast<double>(i) / n;
                while (point > cdf && j + 1 < n) cdf += w[++j];
                parents[i] = j;
            }
            std::vector<Vec> parent_states(n);
            for (int p = 0; p < n; ++p) {
                const std::size_t c = chunk_of(parents[p]);
                const int local = parents[p] - ranges[c].first;
                if (batch) {
                    Vec xp(2);
                    bchunks[c]->get_state(local, xp[0], xp[1]);
                    parent_states[p] = std::move(xp);
                } else {
                    parent_states[p] = gchunks[c]->state(local).x;
                }
            }
            for (int p = 0; p < n; ++p) {
                const std::size_t c = chunk_of(p);
                const int local = p - ranges[c].first;
                if (batch) {
                    bchunks[c]->set_state(local, parent_states[p][0], parent_states[p][1]);
                    bchunks[c]->reset_logw(local);
                } else {
                    gchunks[c]->state(local).x = parent_states[p];
                    gchunks[c]->state(local).logw = 0.0;
                }
                acc.flags[p].diverged = false;
            }
            log.emplace_back(done, std::move(parents));
            log_ess.push_back(e);
        }
    }
    for (std::size_t c = 0; c < ranges.size(); ++c) {
        if (batch)
            bchunks[c]->finalize_remaining(opt.t0 + opt.horizon);
        else
            gchunks[c]->finalize_remaining(opt.t0 + opt.horizon);
    }
    WeightedPathEnsemble ens = finalize_ensemble(std::move(acc), opt, steps);
    ens.resample_log = std::move(log);
    ens.resample_ess = std::move(log_ess);
    return ens;
}

ResampledState resample_endpoint(const WeightedPathEnsemble& ens, uint64_t seed) {
    const Vec& w = ens.normalized;
    if (w.size() == 0) throw EnsembleError("ensemble has no weights");
    StreamRng rng(seed, kResampleStream);
    const double u = rng.uniform();
    double cdf = 0.0;
    int idx = static_cast<int>(w.size()) - 1;
    for (int i = 0; i < w.size(); ++i) {
        cdf += w[i];
        if (u <= cdf) {
            idx = i;
            break;
        }
    }
    return {ens.endpoint(idx), idx};
}

ReactiveEnsembleResult sample_reactive_ensemble(const SystemSpec& spec,
                                                const GridOperator& op,
                                                const ChiField& chi,
                                                const ReferencePath& ref,
                                                const GainSchedule& gain,
                                                const ReactiveOptions& opt) {
    if (!(opt.z_min < opt.z_max)) throw InvalidInputError("need z_min < z_max");
    const Grid2D& g = op.grid();
    // start cells straddle the level set; a path counts as returned once it
    // falls below the band
    std::vector<int> band_cells;
    std::vector<double> band_w;
    for (int c = 0; c < g.cells(); ++c) {
        if (std::abs(chi.node_values[c] - opt.z_min) <= opt.band) {
            band_cells.push_back(c);
            band_w.push_back(op.stationary()[c]);
        }
    }
    if (band_cells.empty()) throw InvalidInputError("empty start band around z_min");
    double wsum = 0.0;
    for (double w : band_w) wsum += w;
    for (double& w : band_w) w /= wsum;

    StreamRng start_rng(opt.seed, kStartStream);
    auto draw_start = [&](double& x, double& y) {
        const double u = start_rng.uniform();
        double cdf = 0.0;
        int cell = band_cells.back();
        for (std::size_t i = 0; i < band_cells.size(); ++i) {
            cdf += band_w[i];
            if (u <= cdf) {
                cell = band_cells[i];
                break;
            }
        }
        const int ix = cell % g.nx;
        const int iy = cell / g.nx;
        x = g.cx(ix) + (start_rng.uniform() - 0.5) * g.hx();
        y = g.cy(iy) + (start_rng.uniform() - 0.5) * g.hy();
    };

    // hold the last reference value until the attempt cap
    const int steps = std::max(1, static_cast<int>(std::lround(opt.max_duration / opt.dt)));
    const double horizon = steps * opt.dt;
    ReferencePath ref_ext = ref.extended_to(ref.t_begin() + horizon);

    auto law = std::make_shared<ControlLaw>(ControlLaw::tracking(
        chi.chi, ref_ext, gain, ControlOptions{.u_max = opt.u_max, .precond_rho = 0.0}));

    ReactiveEnsembleResult out;
    out.histogram = Histogram2D::like(g);

    const int batch = std::max(16, opt.target_accepted);
    uint64_t stream_base = 0;
    double gain_scale = 1.0;
    const int block = std::max(1, static_cast<int>(std::lround(1.0 / opt.dt)));

    while (out.accepted < opt.target_accepted && out.attempts < opt.max_attempts) {
        const int nb = std::min(batch, opt.max_attempts - out.attempts);
        BridgeOptions bopt;
        bopt.t0 = ref.t_begin();
        bopt.horizon = horizon;
        bopt.dt = opt.dt;
        bopt.n_paths = nb;
        bopt.seed = opt.seed;
        bopt.stream_offset = stream_base;
        bopt.track_weights = true;
        bopt.record_stride = opt.record_stride;
        // paths stop at the target level only; dips back into {chi <= z_min}
        // restart the reactive clock instead of rejecting the path
        bopt.stop_on_levels = true;
        bopt.level_a = -std::numeric_limits<double>::infinity();
        bopt.level_b = opt.z_max;
        bopt.starts.resize(nb, 2);
        for (int p = 0; p < nb; ++p) draw_start(bopt.starts(p, 0), bopt.starts(p, 1));
        stream_base += nb;

        EnsembleAccum acc(nb, 2, true, true);
        const GridChi* chip = chi.chi.get();
        if (!opt.adaptive_gain) {
            parallel_chunks(nb, [&](std::size_t lo, std::size_t hi) {
                Chunk2D chunk(spec, law.get(), chip, bopt, Vec::Zero(2),
                              static_cast<int>(lo), static_cast<int>(hi), acc);
                chunk.run_steps(0, steps, gain_scale);
                chunk.finalize_remaining(bopt.t0 + horizon);
            });
        } else {
            // sequential block loop so the gain can react to the running ESS
            Chunk2D chunk(spec, law.get(), chip, bopt, Vec::Zero(2), 0, nb, acc);
            int done = 0;
            while (done < steps && chunk.active() > 0) {
                chunk.begin_block();
                const int todo = std::min(block, steps - done);
                chunk.run_steps(done, todo, gain_scale);
                done += todo;
                if (chunk.active() < 2) continue;
                auto bw = chunk.active_block_logw();
                bool any_finite = false;
                for (double v : bw) any_finite |= std::isfinite(v);
                if (!any_finite) continue;
                const double e = ess_of(normalize_log_weights(bw));
                if (e < 0.3 * bw.size()) gain_scale = std::max(0.1, 0.8 * gain_scale);
            }
            chunk.finalize_remaining(bopt.t0 + horizon);
        }
        out.attempts += nb;
        for (long s : acc.steps_run) out.total_steps += s;

        for (int p = 0; p < nb && out.accepted < opt.target_accepted; ++p) {
            const PathFlags& fl = acc.flags[p];
            if (fl.diverged || !fl.hit_b) continue;
            const PathRecord& rec = acc.stored[p];
            // transit duration: the start band sits on the level set, so the
            // full time to the first B hit is the reactive length
            out.durations.push_back(fl.hit_b_time - rec.t0);
            out.log_weights.push_back(acc.logw[p]);
            // occupancy of the final reactive stretch (after the last visit
            // to {chi <= z_min}), which is what the reactive density of the
            // grid operator describes
            int seg_start = 0;
            for (int s = 0; s <= rec.steps(); ++s) {
                if (rec.time(s) >= fl.hit_b_time) break;
                Vec xs = rec.state_vec(s);
                if (chi.chi->value(xs) <= opt.z_min) seg_start = s;
            }
            for (int s = seg_start; s <= rec.steps(); ++s)
                out.histogram.add(rec.state(s)[0], rec.state(s)[1]);
            out.paths.push_back(rec);
            ++out.accepted;
        }
    }
    out.final_gain_scale = gain_scale;
    if (out.accepted == 0)
        throw EnsembleError("no reactive path accepted after " +
                            std::to_string(out.attempts) + " attempts");

    double mean = 0.0;
    for (double d : out.durations) mean += d;
    mean /= out.durations.size();
    double var = 0.0;
    for (double d : out.durations) var += (d - mean) * (d - mean);
    out.mean_duration = mean;
    out.std_duration =
        out.durations.size() > 1 ? std::sqrt(var / (out.durations.size() - 1)) : 0.0;
    return out;
}

} // namespace cvlift
