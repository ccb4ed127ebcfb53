#include "redundancy.hpp"

#include "log.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace speechprune {

using nlohmann::json;

std::string_view to_string(InputMode mode) {
    return mode == InputMode::text ? "text" : "speech";
}

InputMode parse_input_mode(std::string_view s) {
    if (s == "text") {
        return InputMode::text;
    }
    if (s == "speech") {
        return InputMode::speech;
    }
    fail(ErrorCode::config, "unknown input mode '" + std::string(s) + "' (expected text or speech)");
}

double angular_distance(std::span<const float> x, std::span<const float> y) {
    require(x.size() == y.size(), ErrorCode::shape, "angular distance between vectors of different size");
    double dot = 0.0;
    double nx = 0.0;
    double ny = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        dot += static_cast<double>(x[i]) * y[i];
        nx += static_cast<double>(x[i]) * x[i];
        ny += static_cast<double>(y[i]) * y[i];
    }
    require(nx > 0.0 && ny > 0.0, ErrorCode::degenerate_vector, "angular distance of a zero-norm vector");
    const double cosine = std::clamp(dot / (std::sqrt(nx) * std::sqrt(ny)), -1.0, 1.0);
    return std::acos(cosine) / M_PI;
}

DistanceMatrix::DistanceMatrix(int num_layers) : m_(num_layers) {
    require(num_layers >= 2, ErrorCode::config, "distance matrix needs at least two layers");
    rows_.resize(static_cast<size_t>(m_ - 1));
    for (int n = 1; n <= m_ - 1; ++n) {
        rows_[static_cast<size_t>(n - 1)].assign(static_cast<size_t>(num_starts(n)), 0.0);
    }
}

double DistanceMatrix::at(int n, int ell) const {
    require(n >= 1 && n <= max_block(), ErrorCode::range, "block size " + std::to_string(n) + " out of range");
    require(ell >= 0 && ell < num_starts(n), ErrorCode::range, "start " + std::to_string(ell) + " out of range");
    return rows_[static_cast<size_t>(n - 1)][static_cast<size_t>(ell)];
}

void DistanceMatrix::set(int n, int ell, double value) {
    require(n >= 1 && n <= max_block(), ErrorCode::range, "block size " + std::to_string(n) + " out of range");
    require(ell >= 0 && ell < num_starts(n), ErrorCode::range, "start " + std::to_string(ell) + " out of range");
    require(std::isfinite(value) && value >= 0.0 && value <= 1.0, ErrorCode::numeric,
            "distance value outside [0, 1]");
    rows_[static_cast<size_t>(n - 1)][static_cast<size_t>(ell)] = value;
}

std::span<const double> DistanceMatrix::row(int n) const {
    require(n >= 1 && n <= max_block(), ErrorCode::range, "block size " + std::to_string(n) + " out of range");
    return rows_[static_cast<size_t>(n - 1)];
}

DistanceMatrix distances_from_trace(const HiddenTrace& trace) {
    const int m = static_cast<int>(trace.states.size()) - 1;
    DistanceMatrix d(m);
    for (int n = 1; n <= m - 1; ++n) {
        for (int ell = 0; ell + n <= m; ++ell) {
            const Vec& a = trace.states[static_cast<size_t>(ell)];
            const Vec& b = trace.states[static_cast<size_t>(ell + n)];
            d.set(n, ell, angular_distance({a.data(), static_cast<size_t>(a.size())},
                                           {b.data(), static_cast<size_t>(b.size())}));
        }
    }
    d.sample_count = 1;
    return d;
}

DistanceMatrix build_distance_matrix(const DecoderModel& model, const std::vector<Mat>& inputs, InputMode source,
                                     std::string dataset_id) {
    require(!inputs.empty(), ErrorCode::config, "distance matrix over an empty dataset");
    const int m = model.num_layers();
    std::vector<std::vector<double>> sums(static_cast<size_t>(m - 1));
    for (int n = 1; n <= m - 1; ++n) {
        sums[static_cast<size_t>(n - 1)].assign(static_cast<size_t>(m - n + 1), 0.0);
    }
    int used = 0;
    int skipped = 0;
    ForwardOptions opt;
    opt.capture = true;
    for (const Mat& x : inputs) {
        const ForwardResult r = forward(model, x, opt);
        const bool degenerate = std::any_of(r.trace->states.begin(), r.trace->states.end(),
                                            [](const Vec& v) { return v.squaredNorm() == 0.0f; });
        if (degenerate) {
            ++skipped;
            continue;
        }
        const DistanceMatrix one = distances_from_trace(*r.trace);
        for (int n = 1; n <= m - 1; ++n) {
            for (int ell = 0; ell + n <= m; ++ell) {
                sums[static_cast<size_t>(n - 1)][static_cast<size_t>(ell)] += one.at(n, ell);
            }
        }
        ++used;
    }
    if (skipped > 0) {
        log_warn("skipped " + std::to_string(skipped) + " example(s) with a zero hidden state");
    }
    require(used > 0, ErrorCode::degenerate_vector, "every example produced a degenerate hidden state");
    DistanceMatrix d(m);
    for (int n = 1; n <= m - 1; ++n) {
        for (int ell = 0; ell + n <= m; ++ell) {
            d.set(n, ell, std::clamp(sums[static_cast<size_t>(n - 1)][static_cast<size_t>(ell)] / used, 0.0, 1.0));
        }
    }
    d.sample_count = used;
    d.skipped_count = skipped;
    d.source = source;
    d.dataset_id = std::move(dataset_id);
    return d;
}

BlockChoice argmin_row(std::span<const double> row) {
    require(!row.empty(), ErrorCode::range, "argmin over an empty row");
    BlockChoice best{0, row[0]};
    for (size_t i = 1; i < row.size(); ++i) {
        if (row[i] < best.distance) {
            best = {static_cast<int>(i), row[i]};
        }
    }
    return best;
}

BlockChoice optimal_block(const DistanceMatrix& d, int n, bool allow_final_layer) {
    require(n >= 1 && n <= d.max_block(), ErrorCode::range,
            "block size " + std::to_string(n) + " outside 1.." + std::to_string(d.max_block()));
    auto row = d.row(n);
    if (!allow_final_layer) {
        row = row.first(row.size() - 1);
    }
    return argmin_row(row);
}

const PathEntry& PruningPath::entry(int n) const {
    for (const PathEntry& e : entries) {
        if (e.n == n) {
            return e;
        }
    }
    fail(ErrorCode::range, "pruning path has no entry for block size " + std::to_string(n));
}

PruningPath pruning_path(const DistanceMatrix& d, bool allow_final_layer) {
    PruningPath path;
    path.num_layers = d.num_layers();
    path.source = d.source;
    path.dataset_id = d.dataset_id;
    for (int n = 1; n <= d.max_block(); ++n) {
        const BlockChoice c = optimal_block(d, n, allow_final_layer);
        path.entries.push_back({n, c.start, c.distance});
    }
    return path;
}

PathComparison compare_paths(const PruningPath& a, const PruningPath& b) {
    require(a.num_layers == b.num_layers, ErrorCode::shape,
            "paths cover different depths (" + std::to_string(a.num_layers) + " vs " +
                std::to_string(b.num_layers) + ")");
    PathComparison c;
    c.num_layers = a.num_layers;
    int agree = 0;
    int common = 0;
    for (const PathEntry& ea : a.entries) {
        for (const PathEntry& eb : b.entries) {
            if (ea.n == eb.n) {
                ++common;
                agree += ea.ell_star == eb.ell_star ? 1 : 0;
                c.start_deltas.push_back(eb.ell_star - ea.ell_star);
            }
        }
    }
    require(common > 0, ErrorCode::shape, "paths share no block sizes");
    c.agreement = static_cast<double>(agree) / common;
    return c;
}

PathComparison compare_paths(const DistanceMatrix& a, const DistanceMatrix& b) {
    require(a.num_layers() == b.num_layers(), ErrorCode::shape,
            "matrices cover different depths (" + std::to_string(a.num_layers()) + " vs " +
                std::to_string(b.num_layers()) + ")");
    PathComparison c = compare_paths(pruning_path(a), pruning_path(b));
    double total = 0.0;
    int cells = 0;
    for (int n = 1; n <= a.max_block(); ++n) {
        for (int ell = 0; ell < a.num_starts(n); ++ell) {
            total += std::abs(a.at(n, ell) - b.at(n, ell));
            ++cells;
        }
    }
    c.mean_abs_diff = total / cells;
    return c;
}

std::string heatmap_csv(const DistanceMatrix& d) {
    std::ostringstream os;
    os << "n,ell,distance\n" << std::fixed << std::setprecision(6);
    for (int n = 1; n <= d.max_block(); ++n) {
        for (int ell = 0; ell < d.num_starts(n); ++ell) {
            os << n << ',' << ell << ',' << d.at(n, ell) << '\n';
        }
    }
    return os.str();
}

DistanceMatrix parse_heatmap_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);
    require(line.rfind("n,ell,distance", 0) == 0, ErrorCode::io, "heatmap CSV lacks the n,ell,distance header");
    struct Cell {
        int n;
        int ell;
        double value;
    };
    std::vector<Cell> cells;
    int max_n = 0;
    while (std::getline(is, line)) {
        if (line.empty()) {
            continue;
        }
        Cell c{};
        char comma1 = 0;
        char comma2 = 0;
        std::istringstream ls(line);
        ls >> c.n >> comma1 >> c.ell >> comma2 >> c.value;
        require(!ls.fail() && comma1 == ',' && comma2 == ',', ErrorCode::io, "malformed heatmap row '" + line + "'");
        max_n = std::max(max_n, c.n);
        cells.push_back(c);
    }
    require(max_n >= 1, ErrorCode::io, "heatmap CSV has no cells");
    DistanceMatrix d(max_n + 1);
    size_t expected = 0;
    for (int n = 1; n <= d.max_block(); ++n) {
        expected += static_cast<size_t>(d.num_starts(n));
    }
    require(cells.size() == expected, ErrorCode::io, "heatmap CSV is incomplete");
    for (const Cell& c : cells) {
        d.set(c.n, c.ell, c.value);
    }
    d.dataset_id = "csv";
    return d;
}

std::string path_json(const PruningPath& path) {
    json j;
    j["m"] = path.num_layers;
    j["source"] = std::string(to_string(path.source));
    j["dataset"] = path.dataset_id;
    j["fingerprint"] = path.fingerprint;
    json entries = json::array();
    for (const PathEntry& e : path.entries) {
        entries.push_back({{"n", e.n}, {"ell_star", e.ell_star}, {"distance", e.distance}});
    }
    j["entries"] = std::move(entries);
    return j.dump(2) + "\n";
}

PruningPath parse_path_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        PruningPath p;
        p.num_layers = j.at("m").get<int>();
        p.source = parse_input_mode(j.at("source").get<std::string>());
        p.dataset_id = j.at("dataset").get<std::string>();
        p.fingerprint = j.at("fingerprint").get<std::string>();
        for (const json& e : j.at("entries")) {
            p.entries.push_back({e.at("n").get<int>(), e.at("ell_star").get<int>(), e.at("distance").get<double>()});
        }
        return p;
    } catch (const json::exception& e) {
        fail(ErrorCode::io, std::string("malformed path JSON: ") + e.what());
    }
}

std::string comparison_json(const PathComparison& c) {
    json j;
    j["m"] = c.num_layers;
    j["agreement"] = c.agreement;
    j["mean_abs_diff"] = c.mean_abs_diff ? json(*c.mean_abs_diff) : json(nullptr);
    j["start_deltas"] = c.start_deltas;
    return j.dump(2) + "\n";
}

}  // namespace speechprune
