#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "indexnet/errors.hpp"
#include "indexnet/math.hpp"
#include "indexnet/model.hpp"
#include "indexnet/tensor.hpp"

namespace indexnet {

/// Central finite differences of a deterministic scalar closure with respect
/// to every entry of every parameter: (J(p+eps) - J(p-eps)) / (2 eps).
/// The closure is evaluated twice up front; if the two baselines disagree the
/// closure is not deterministic and no gradient it produces can be trusted.
inline std::vector<Tensor> finite_diff_grad(std::vector<ParamRef> params,
                                            const std::function<double()>& loss_closure,
                                            double eps_fd = 1e-5) {
    const double base1 = loss_closure();
    const double base2 = loss_closure();
    if (!(base1 == base2))
        throw NumericError("finite_diff_grad: loss closure is not deterministic (" +
                           std::to_string(base1) + " vs " + std::to_string(base2) + ")");
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (const ParamRef& p : params) {
        Tensor g(p.value->shape());
        for (std::size_t i = 0; i < p.value->size(); ++i) {
            const double saved = (*p.value)[i];
            (*p.value)[i] = saved + eps_fd;
            const double jp = loss_closure();
            (*p.value)[i] = saved - eps_fd;
            const double jm = loss_closure();
            (*p.value)[i] = saved;
            g[i] = (jp - jm) / (2.0 * eps_fd);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

/// One compared entry of a gradient check.
struct GradCheckEntry {
    std::string path;  // "theta0[2,1]"
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    std::vector<std::string> skipped;  // kink-adjacent entries left out
    double eps_fd = 1e-5;
    double threshold = 1e-5;
    double max_rel_error = 0.0;
    bool pass = true;

    std::string summary() const {
        std::ostringstream os;
        os << (pass ? "PASS" : "FAIL") << ": " << entries.size() << " entries, "
           << skipped.size() << " skipped, max rel. error " << std::scientific
           << std::setprecision(3) << max_rel_error << " (threshold " << threshold << ")";
        return os.str();
    }

    void write_text(std::ostream& os) const {
        os << summary() << "\n";
        for (const auto& e : entries)
            os << "  " << e.path << " analytic=" << std::setprecision(12) << e.analytic
               << " numeric=" << e.numeric << " rel=" << std::scientific << e.rel_error
               << std::defaultfloat << (e.rel_error > threshold ? "  <-- FAIL" : "") << "\n";
        for (const auto& s : skipped) os << "  skipped " << s << " (kink-adjacent)\n";
    }

    void write_csv(std::ostream& os) const {
        os << "path,analytic,numeric,rel_error,status\n";
        for (const auto& e : entries)
            os << e.path << "," << std::setprecision(17) << e.analytic << "," << e.numeric << ","
               << e.rel_error << "," << (e.rel_error > threshold ? "fail" : "ok") << "\n";
        for (const auto& s : skipped) os << s << ",,,,skipped\n";
    }
};

struct GradCheckConfig {
    double eps_fd = 1e-5;
    double threshold = 1e-5;
};

inline double gradcheck_rel_error(double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
}

/// Compare a model's analytic gradients against central finite differences
/// on one fixed batch (train mode, batch held constant, dropout frozen).
/// Entries whose probe forwards put any rectifier pre-activation within
/// 10*eps_fd of its kink are skipped and listed instead of judged.
inline GradCheckReport check(Model& model, const Tensor& inputs, const Tensor& targets,
                             const GradCheckConfig& cfg = {}) {
    model.freeze_dropout(true);
    auto params = model.params();
    auto closure = [&]() { return model.loss_on(inputs, targets, true); };

    const double base1 = closure();
    const double base_margin = model.last_kink_margin();
    const double base2 = closure();
    if (!(base1 == base2))
        throw NumericError("gradcheck: loss closure is not deterministic");
    model.backward();
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(*p.grad);

    GradCheckReport report;
    report.eps_fd = cfg.eps_fd;
    report.threshold = cfg.threshold;
    const double kink_margin = 10.0 * cfg.eps_fd;

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& value = *params[pi].value;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double saved = value[i];
            value[i] = saved + cfg.eps_fd;
            const double jp = closure();
            const double margin_p = model.last_kink_margin();
            value[i] = saved - cfg.eps_fd;
            const double jm = closure();
            const double margin_m = model.last_kink_margin();
            value[i] = saved;

            GradCheckEntry e;
            e.path = params[pi].name + "[" + std::to_string(i) + "]";
            e.analytic = analytic[pi][i];
            e.numeric = (jp - jm) / (2.0 * cfg.eps_fd);
            e.rel_error = gradcheck_rel_error(e.analytic, e.numeric);
            if (std::min({base_margin, margin_p, margin_m}) < kink_margin) {
                report.skipped.push_back(e.path);
                continue;
            }
            report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
            report.entries.push_back(std::move(e));
        }
    }
    report.pass = report.max_rel_error <= report.threshold;
    return report;
}

}  // namespace indexnet
