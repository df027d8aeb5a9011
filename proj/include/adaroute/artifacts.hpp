#pragma once

// CSV / PGM artifact writers. Heatmaps go out as 8-bit PGM plus the raw CSV
// so any plotter can consume them.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "adaroute/diagnostics.hpp"
#include "adaroute/trainer.hpp"

namespace adaroute {

namespace detail {

inline std::ofstream open_out(const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("cannot write artifact: " + path);
    return out;
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

} // namespace detail

inline void write_train_report_csv(const TrainReport& r, const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "step,loss,metric\n";
    std::size_t ei = 0;
    // initial metric row
    if (!r.evals.empty() && r.evals[0].step == 0) {
        out << "0,," << detail::fmt(r.evals[0].metric) << "\n";
        ++ei;
    }
    for (const auto& s : r.steps) {
        out << s.step << "," << detail::fmt(s.loss) << ",";
        if (ei < r.evals.size() && r.evals[ei].step == s.step) {
            out << detail::fmt(r.evals[ei].metric);
            ++ei;
        }
        out << "\n";
    }
}

inline void write_cka_csv(const CKAMatrix& m, const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "layer";
    for (const auto& l : m.labels) out << "," << l;
    out << "\n";
    for (std::size_t i = 0; i < m.n_layers; ++i) {
        out << m.labels[i];
        for (std::size_t j = 0; j < m.n_layers; ++j) out << "," << detail::fmt(m.at(i, j));
        out << "\n";
    }
}

inline void write_activation_map_csv(const ActivationMap& m, const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "layer";
    for (std::size_t e = 0; e < m.capacity; ++e) out << ",expert" << e;
    out << "\n";
    for (std::size_t r = 0; r < m.n_rows; ++r) {
        out << r;
        for (std::size_t e = 0; e < m.capacity; ++e) out << "," << detail::fmt(m.at(r, e));
        out << "\n";
    }
}

inline void write_erf_csv(const ERFMap& m, const std::string& path) {
    std::ofstream out = detail::open_out(path);
    for (std::size_t y = 0; y < m.height; ++y) {
        for (std::size_t x = 0; x < m.width; ++x)
            out << (x ? "," : "") << detail::fmt(m.at(y, x));
        out << "\n";
    }
}

// Max-normalized map as plain-text 8-bit PGM.
inline void write_erf_pgm(const ERFMap& m, const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "P2\n" << m.width << " " << m.height << "\n255\n";
    for (std::size_t y = 0; y < m.height; ++y) {
        for (std::size_t x = 0; x < m.width; ++x) {
            const int v = static_cast<int>(std::lround(255.0 * std::clamp(m.at(y, x), 0.0, 1.0)));
            out << (x ? " " : "") << v;
        }
        out << "\n";
    }
}

inline void write_audit_csv(const ParamAudit& a, const std::string& path) {
    std::ofstream out = detail::open_out(path);
    out << "component,tensor,count\n";
    for (const auto& item : a.items)
        out << item.component << "," << item.tensor << "," << item.count << "\n";
    out << "total,centers," << a.centers_total << "\n";
    out << "total,routers," << a.routers_total << "\n";
    out << "total,sa," << a.sa_total << "\n";
    out << "total,head," << a.head_total << "\n";
    out << "total,grand," << a.grand_total << "\n";
}

inline std::string audit_text(const ParamAudit& a) {
    std::ostringstream os;
    os << "trainable parameter audit\n";
    os << "-------------------------\n";
    for (const auto& item : a.items)
        os << "  " << std::left << std::setw(8) << item.component << " " << std::setw(28)
           << item.tensor << " " << item.count << "\n";
    os << "totals:\n";
    os << "  centers : " << a.centers_total << "\n";
    os << "  routers : " << a.routers_total << "\n";
    os << "  sa      : " << a.sa_total << "\n";
    if (a.head_total) os << "  head    : " << a.head_total << "\n";
    os << "  grand   : " << a.grand_total << " (" << std::fixed << std::setprecision(3)
       << (static_cast<double>(a.grand_total) / 1e6) << "M)\n";
    if (a.paper_target_millions > 0.0) {
        const double ours = static_cast<double>(a.grand_total) / 1e6;
        os << "reported reference total: " << std::setprecision(1) << a.paper_target_millions
           << "M; computed " << std::setprecision(3) << ours << "M; gap "
           << (a.paper_target_millions - ours) << "M\n";
    }
    os << "assumptions:\n";
    for (const auto& s : a.assumptions) os << "  - " << s << "\n";
    return os.str();
}

} // namespace adaroute
