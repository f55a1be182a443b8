#include "cbvp/integrator.hpp"

#include "cbvp/dynamics.hpp"
#include "cbvp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cbvp {

namespace {

struct Tableau {
    std::vector<double> c;
    std::vector<std::vector<double>> a; // a[i] holds the coefficients of stage i (i >= 1)
    std::vector<double> b;
    int order = 8; // exponent base for step control
};

// Hairer & Wanner DOP853 coefficients (12 stages, 8th order solution).
const Tableau& dop853()
{
    static const Tableau t = [] {
        Tableau tb;
        tb.order = 8;
        tb.c = {0.0,
                0.526001519587677318785587544488e-01,
                0.789002279381515978178381316732e-01,
                0.118350341907227396726757197510e+00,
                0.281649658092772603273242802490e+00,
                0.333333333333333333333333333333e+00,
                0.25e+00,
                0.307692307692307692307692307692e+00,
                0.651282051282051282051282051282e+00,
                0.6e+00,
                0.857142857142857142857142857142e+00,
                1.0};
        tb.a.resize(12);
        tb.a[1] = {5.26001519587677318785587544488e-2};
        tb.a[2] = {1.97250569845378994544595329183e-2, 5.91751709536136983633785987549e-2};
        tb.a[3] = {2.95875854768068491816892993775e-2, 0.0, 8.87627564304205475450678981324e-2};
        tb.a[4] = {2.41365134159266685502369798665e-1, 0.0, -8.84549479328286085344864962717e-1,
                   9.24834003261792003115737966543e-1};
        tb.a[5] = {3.7037037037037037037037037037e-2, 0.0, 0.0, 1.70828608729473871279604482173e-1,
                   1.25467687566822425016691814123e-1};
        tb.a[6] = {3.7109375e-2, 0.0, 0.0, 1.70252211019544039314978060272e-1, 6.02165389804559606850219397283e-2,
                   -1.7578125e-2};
        tb.a[7] = {3.70920001185047927108779319836e-2, 0.0, 0.0, 1.70383925712239993810214054705e-1,
                   1.07262030446373284651809199168e-1, -1.53194377486244017527936158236e-2,
                   8.27378916381402288758473766002e-3};
        tb.a[8] = {6.24110958716075717114429577812e-1, 0.0, 0.0, -3.36089262944694129406857109825e0,
                   -8.68219346841726006818189891453e-1, 2.75920996994467083049415600797e1,
                   2.01540675504778934086186788979e1, -4.34898841810699588477366255144e1};
        tb.a[9] = {4.77662536438264365890433908527e-1, 0.0, 0.0, -2.48811461997166764192642586468e0,
                   -5.90290826836842996371446475743e-1, 2.12300514481811942347288949897e1,
                   1.52792336328824235832596922938e1, -3.32882109689848629194453265587e1,
                   -2.03312017085086261358222928593e-2};
        tb.a[10] = {-9.3714243008598732571704021658e-1, 0.0, 0.0, 5.18637242884406370830023853209e0,
                    1.09143734899672957818500254654e0, -8.14978701074692612513997267357e0,
                    -1.85200656599969598641566180701e1, 2.27394870993505042818970056734e1,
                    2.49360555267965238987089396762e0, -3.0467644718982195003823669022e0};
        tb.a[11] = {2.27331014751653820792359768449e0, 0.0, 0.0, -1.05344954667372501984066689879e1,
                    -2.00087205822486249909675718444e0, -1.79589318631187989172765950534e1,
                    2.79488845294199600508499808837e1, -2.85899827713502369474065508674e0,
                    -8.87285693353062954433549289258e0, 1.23605671757943030647266201528e1,
                    6.43392746015763530355970484046e-1};
        tb.b = {5.42937341165687622380535766363e-2, 0.0, 0.0, 0.0, 0.0, 4.45031289275240888144113950566e0,
                1.89151789931450038304281599044e0, -5.8012039600105847814672114227e0,
                3.1116436695781989440891606237e-1, -1.52160949662516078556178806805e-1,
                2.01365400804030348374776537501e-1, 4.47106157277725905176885569043e-2};
        return tb;
    }();
    return t;
}

// DOP853 5th order error estimator and the 3rd order companion weights.
constexpr std::array<double, 12> kDop853Err5 = {
    0.1312004499419488073250102996e-01, 0.0, 0.0, 0.0, 0.0, -0.1225156446376204440720569753e+01,
    -0.4957589496572501915214079952e+00, 0.1664377182454986536961530415e+01, -0.3503288487499736816886487290e+00,
    0.3341791187130174790297318841e+00, 0.8192320648511571246570742613e-01, -0.2235530786388629525884427845e-01};
constexpr double kDop853Bhh1 = 0.244094488188976377952755905512e+00;
constexpr double kDop853Bhh2 = 0.733846688281611857341361741547e+00;
constexpr double kDop853Bhh3 = 0.220588235294117647058823529412e-01;

const Tableau& dopri5()
{
    static const Tableau t = [] {
        Tableau tb;
        tb.order = 5;
        tb.c = {0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0};
        tb.a.resize(7);
        tb.a[1] = {1.0 / 5.0};
        tb.a[2] = {3.0 / 40.0, 9.0 / 40.0};
        tb.a[3] = {44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0};
        tb.a[4] = {19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0};
        tb.a[5] = {9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0};
        tb.a[6] = {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0};
        tb.b = {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0};
        return tb;
    }();
    return t;
}

constexpr std::array<double, 7> kDopri5Err = {71.0 / 57600.0,     0.0,         -71.0 / 16695.0, 71.0 / 1920.0,
                                              -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0};

const Tableau& tableau_for(RkMethod m)
{
    return m == RkMethod::Dop853 ? dop853() : dopri5();
}

constexpr double kSafety = 0.9;
constexpr double kMinFactor = 0.333; // step may shrink to a third
constexpr double kMaxFactor = 6.0;

} // namespace

void IntegratorConfig::validate() const
{
    if (!(rel_tol > 0.0 && rel_tol < 1.0) || !(abs_tol > 0.0 && abs_tol < 1.0))
        throw ConfigError("integrator tolerances must lie in (0, 1)");
    if (max_steps == 0)
        throw ConfigError("integrator.max_steps must be positive");
    if (max_step < 0.0 || !std::isfinite(max_step))
        throw ConfigError("integrator.max_step must be >= 0");
}

Integrator::Integrator(VectorField field, std::span<const double> y0, double t0, IntegratorConfig cfg)
    : field_(std::move(field)), cfg_(cfg), n_(y0.size()), t_(t0), y_(y0.begin(), y0.end()), f0_(n_),
      y_new_(n_), y_stage_(n_)
{
    cfg_.validate();
    k_.assign(tableau_for(cfg_.method).c.size(), std::vector<double>(n_));
    field_(t_, y_, f0_);
}

double Integrator::initial_step(double direction) const
{
    const int order = tableau_for(cfg_.method).order;
    double dnf = 0.0;
    double dny = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
        const double sk = cfg_.abs_tol + cfg_.rel_tol * std::abs(y_[i]);
        dnf += (f0_[i] / sk) * (f0_[i] / sk);
        dny += (y_[i] / sk) * (y_[i] / sk);
    }
    double h = (dnf <= 1e-10 || dny <= 1e-10) ? 1e-6 : std::sqrt(dny / dnf) * 0.01;
    if (cfg_.max_step > 0.0)
        h = std::min(h, cfg_.max_step);

    std::vector<double> y1(n_);
    std::vector<double> f1(n_);
    for (std::size_t i = 0; i < n_; ++i)
        y1[i] = y_[i] + direction * h * f0_[i];
    field_(t_ + direction * h, y1, f1);

    double der2 = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
        const double sk = cfg_.abs_tol + cfg_.rel_tol * std::abs(y_[i]);
        der2 += ((f1[i] - f0_[i]) / sk) * ((f1[i] - f0_[i]) / sk);
    }
    der2 = std::sqrt(der2) / h;
    const double der12 = std::max(std::abs(der2), std::sqrt(dnf));
    const double h1 = der12 <= 1e-15 ? std::max(1e-6, h * 1e-3) : std::pow(0.01 / der12, 1.0 / order);
    h = std::min(100.0 * h, h1);
    if (cfg_.max_step > 0.0)
        h = std::min(h, cfg_.max_step);
    return direction * h;
}

double Integrator::trial_step(double h)
{
    const Tableau& tb = tableau_for(cfg_.method);
    const std::size_t stages = tb.c.size();
    k_[0] = f0_;
    for (std::size_t s = 1; s < stages; ++s) {
        const auto& a = tb.a[s];
        for (std::size_t i = 0; i < n_; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < a.size(); ++j)
                acc += a[j] * k_[j][i];
            y_stage_[i] = y_[i] + h * acc;
        }
        field_(t_ + tb.c[s] * h, y_stage_, k_[s]);
    }

    for (std::size_t i = 0; i < n_; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < stages; ++j)
            acc += tb.b[j] * k_[j][i];
        y_new_[i] = y_[i] + h * acc;
    }

    if (cfg_.method == RkMethod::Dop853) {
        double err5 = 0.0;
        double err3 = 0.0;
        for (std::size_t i = 0; i < n_; ++i) {
            const double sk = cfg_.abs_tol + cfg_.rel_tol * std::max(std::abs(y_[i]), std::abs(y_new_[i]));
            double bsum = 0.0;
            double e5 = 0.0;
            for (std::size_t j = 0; j < stages; ++j) {
                bsum += tb.b[j] * k_[j][i];
                e5 += kDop853Err5[j] * k_[j][i];
            }
            const double e3 = bsum - kDop853Bhh1 * k_[0][i] - kDop853Bhh2 * k_[8][i] - kDop853Bhh3 * k_[11][i];
            err3 += (e3 / sk) * (e3 / sk);
            err5 += (e5 / sk) * (e5 / sk);
        }
        double deno = err5 + 0.01 * err3;
        if (deno <= 0.0)
            deno = 1.0;
        return std::abs(h) * err5 * std::sqrt(1.0 / (static_cast<double>(n_) * deno));
    }

    double err = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
        const double sk = cfg_.abs_tol + cfg_.rel_tol * std::max(std::abs(y_[i]), std::abs(y_new_[i]));
        double e = 0.0;
        for (std::size_t j = 0; j < stages; ++j)
            e += kDopri5Err[j] * k_[j][i];
        err += (h * e / sk) * (h * e / sk);
    }
    return std::sqrt(err / static_cast<double>(n_));
}

void Integrator::advance_to(double t_target)
{
    if (t_target == t_)
        return;
    const double direction = t_target > t_ ? 1.0 : -1.0;
    if (h_ == 0.0 || (h_ > 0.0) != (direction > 0.0))
        h_ = initial_step(direction);

    const double expo = 1.0 / tableau_for(cfg_.method).order;
    std::size_t steps = 0;
    bool last_rejected = false;

    while (t_ != t_target) {
        if (++steps > cfg_.max_steps)
            throw StepLimitError("integrator exceeded max_steps=" + std::to_string(cfg_.max_steps));

        double h = h_;
        if (cfg_.max_step > 0.0 && std::abs(h) > cfg_.max_step)
            h = direction * cfg_.max_step;
        const bool truncated = (t_ + h - t_target) * direction >= 0.0;
        if (truncated)
            h = t_target - t_;
        if (std::abs(h) < 10.0 * std::numeric_limits<double>::epsilon() * std::abs(t_) && !truncated)
            throw StepLimitError("integrator step size underflow at t=" + std::to_string(t_));

        double err = trial_step(h);
        if (!std::isfinite(err))
            err = 1e10;

        const double fac11 = std::pow(std::max(err, 1e-300), expo);
        double factor = std::clamp(kSafety / fac11, kMinFactor, kMaxFactor);

        if (err <= 1.0) {
            t_ = truncated ? t_target : t_ + h;
            y_.swap(y_new_);
            field_(t_, y_, f0_);
            ++accepted_;
            if (last_rejected)
                factor = std::min(factor, 1.0);
            last_rejected = false;
            const double proposal = h * factor;
            // A step cut short to hit a sample epoch should not shrink the
            // proposal carried into the next segment.
            h_ = truncated && std::abs(proposal) < std::abs(h_) ? h_ : proposal;
        } else {
            ++rejected_;
            last_rejected = true;
            h_ = h * std::min(1.0, factor);
        }
    }
}

std::vector<double> integrate(const VectorField& field, double t0, std::span<const double> y0, double t1,
                              const IntegratorConfig& cfg)
{
    Integrator integ(field, y0, t0, cfg);
    integ.advance_to(t1);
    return {integ.state().begin(), integ.state().end()};
}

VectorField cr3bp_field(double mu)
{
    return [mu](double, std::span<const double> y, std::span<double> dydt) {
        State6 s;
        std::copy(y.begin(), y.end(), s.v.begin());
        const State6 d = eom(s, mu);
        std::copy(d.v.begin(), d.v.end(), dydt.begin());
    };
}

State6 propagate(const State6& state0, double t0, double t1, double mu, const IntegratorConfig& cfg)
{
    if (t0 == t1)
        throw DomainError("propagate: empty time span");
    if (!state0.finite())
        throw DomainError("propagate: non-finite initial state");
    const auto y = integrate(cr3bp_field(mu), t0, state0.v, t1, cfg);
    State6 out;
    std::copy(y.begin(), y.end(), out.v.begin());
    return out;
}

Trajectory sample_uniform(const State6& state0, double t0, double dt, std::size_t n, Direction direction,
                          double mu, const IntegratorConfig& cfg)
{
    if (n == 0)
        throw DomainError("sample_uniform: n must be >= 1");
    if (!(dt > 0.0))
        throw DomainError("sample_uniform: dt must be positive");
    if (!state0.finite())
        throw DomainError("sample_uniform: non-finite initial state");

    const double sign = direction == Direction::Forward ? 1.0 : -1.0;
    Trajectory traj;
    traj.dt = dt;
    traj.states.reserve(n);
    traj.states.push_back(state0);

    if (n > 1) {
        Integrator integ(cr3bp_field(mu), state0.v, t0, cfg);
        for (std::size_t i = 1; i < n; ++i) {
            integ.advance_to(t0 + sign * static_cast<double>(i) * dt);
            State6 s;
            std::copy(integ.state().begin(), integ.state().end(), s.v.begin());
            traj.states.push_back(s);
        }
    }

    traj.meta.anchor_epoch = t0;
    if (direction == Direction::Backward) {
        std::reverse(traj.states.begin(), traj.states.end());
        traj.t0 = t0 - static_cast<double>(n - 1) * dt;
        traj.meta.backward = true;
    } else {
        traj.t0 = t0;
    }
    return traj;
}

std::size_t samples_for_duration(double duration, double dt)
{
    if (!(duration > 0.0) || !(dt > 0.0))
        throw DomainError("samples_for_duration: duration and dt must be positive");
    return static_cast<std::size_t>(std::llround(duration / dt));
}

} // namespace cbvp
