#pragma once

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "headsearch/errors.hpp"
#include "headsearch/searchspace.hpp"

namespace headsearch {

// Round half to even at `decimals` places. Binary doubles rarely sit exactly
// on a decimal tie, so a scaled value within 1e-9 of .5 counts as a tie.
inline double round_half_even(double x, int decimals = 3) {
    const double scale = std::pow(10.0, decimals);
    const double y = x * scale;
    const double fl = std::floor(y);
    const double frac = y - fl;
    double r;
    if (std::abs(frac - 0.5) < 1e-9) {
        r = std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
    } else {
        r = std::round(y);
    }
    return r / scale;
}

inline std::string fixed3(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", round_half_even(x, 3));
    return buf;
}

struct AccuracyTable {
    std::vector<std::string> tasks;
    std::vector<double> base;
    std::vector<double> tuned;

    void check() const {
        if (tasks.empty() || base.size() != tasks.size() || tuned.size() != tasks.size()) {
            throw PreconditionError("accuracy table: need one base and one tuned value per task");
        }
    }
    double base_average() const { return mean(base); }
    double tuned_average() const { return mean(tuned); }

  private:
    static double mean(const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    }
};

// Improvement is judged on the printed (rounded) values, so a bold cell
// always reads larger than the cell above it.
inline bool improved(double base, double tuned) {
    return round_half_even(tuned) > round_half_even(base);
}

// Rows base / tuned, one column per task plus the mean. Tuned task cells that
// beat base are bold; the average column is never bold.
inline std::string accuracy_markdown(const AccuracyTable& t) {
    t.check();
    std::ostringstream os;
    os << "| method |";
    for (const auto& name : t.tasks) {
        os << ' ' << name << " |";
    }
    os << " average |\n|---|";
    for (std::size_t i = 0; i < t.tasks.size(); ++i) {
        os << "---|";
    }
    os << "---|\n| base |";
    for (double v : t.base) {
        os << ' ' << fixed3(v) << " |";
    }
    os << ' ' << fixed3(t.base_average()) << " |\n| tuned |";
    for (std::size_t i = 0; i < t.tasks.size(); ++i) {
        const std::string cell = fixed3(t.tuned[i]);
        os << ' ' << (improved(t.base[i], t.tuned[i]) ? "**" + cell + "**" : cell) << " |";
    }
    os << ' ' << fixed3(t.tuned_average()) << " |\n";
    return os.str();
}

inline std::string accuracy_csv(const AccuracyTable& t) {
    t.check();
    std::ostringstream os;
    os << "task,base,tuned,improved\n";
    for (std::size_t i = 0; i < t.tasks.size(); ++i) {
        os << t.tasks[i] << ',' << fixed3(t.base[i]) << ',' << fixed3(t.tuned[i]) << ','
           << (improved(t.base[i], t.tuned[i]) ? "true" : "false") << '\n';
    }
    os << "average," << fixed3(t.base_average()) << ',' << fixed3(t.tuned_average()) << ','
       << (improved(t.base_average(), t.tuned_average()) ? "true" : "false") << '\n';
    return os.str();
}

// Inverse of accuracy_csv for task rows; the average row is recomputed, not read.
inline AccuracyTable parse_accuracy_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("task,base,tuned", 0) != 0) {
        throw DataError("accuracy csv: expected header task,base,tuned[,improved]");
    }
    AccuracyTable t;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        if (cells.size() < 3) {
            throw DataError("accuracy csv line " + std::to_string(line_no) + ": expected at least 3 cells");
        }
        if (cells[0] == "average") {
            continue;
        }
        try {
            t.base.push_back(std::stod(cells[1]));
            t.tuned.push_back(std::stod(cells[2]));
        } catch (const std::exception&) {
            throw DataError("accuracy csv line " + std::to_string(line_no) + ": non-numeric accuracy");
        }
        t.tasks.push_back(cells[0]);
    }
    t.check();
    return t;
}

// Row labels follow the published architecture tables.
inline const std::vector<std::string>& architecture_rows() {
    static const std::vector<std::string> rows{
        "pooling",
        "number linear layers",
        "hidden dim linear layers",
        "number conv layers",
        "number heads conv",
        "kernel size",
        "skip connection",
        "number attention layers",
        "number attention heads",
    };
    return rows;
}

inline std::vector<std::string> architecture_cells(const HeadConfig& c) {
    auto opt = [](const std::optional<int>& v) { return v ? std::to_string(*v) : std::string("-"); };
    const std::string pooling = c.pooling == PoolingKind::cls ? "[CLS]" : std::string(to_string(c.pooling));
    return {
        pooling,
        std::to_string(c.mlp.layers),
        c.mlp.layers > 1 ? opt(c.mlp.hidden) : "-",
        c.conv.enabled ? opt(c.conv.layers) : "0",
        c.conv.enabled ? opt(c.conv.heads) : "-",
        c.conv.enabled ? opt(c.conv.kernel) : "-",
        c.conv.enabled && c.conv.skip ? (*c.conv.skip ? "True" : "False") : "-",
        c.encoder.enabled ? opt(c.encoder.layers) : "0",
        c.encoder.enabled ? opt(c.encoder.heads) : "-",
    };
}

inline std::string architecture_markdown(const std::vector<std::string>& tasks,
                                         const std::vector<HeadConfig>& configs) {
    if (tasks.empty() || tasks.size() != configs.size()) {
        throw PreconditionError("architecture table: need one config per task");
    }
    std::vector<std::vector<std::string>> cols;
    for (const auto& c : configs) {
        cols.push_back(architecture_cells(c));
    }
    std::ostringstream os;
    os << "| method |";
    for (const auto& name : tasks) {
        os << ' ' << name << " |";
    }
    os << "\n|---|";
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        os << "---|";
    }
    os << '\n';
    const auto& rows = architecture_rows();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        os << "| " << rows[r] << " |";
        for (const auto& col : cols) {
            os << ' ' << col[r] << " |";
        }
        os << '\n';
    }
    return os.str();
}

inline std::string architecture_csv(const std::vector<std::string>& tasks, const std::vector<HeadConfig>& configs) {
    if (tasks.empty() || tasks.size() != configs.size()) {
        throw PreconditionError("architecture table: need one config per task");
    }
    std::ostringstream os;
    os << "row";
    for (const auto& name : tasks) {
        os << ',' << name;
    }
    os << '\n';
    const auto& rows = architecture_rows();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        os << rows[r];
        for (const auto& c : configs) {
            os << ',' << architecture_cells(c)[r];
        }
        os << '\n';
    }
    return os.str();
}

} // namespace headsearch
