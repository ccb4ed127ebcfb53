#pragma once

#include "common.hpp"
#include "model.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace speechprune {

enum class InputMode : uint8_t { text, speech };

std::string_view to_string(InputMode mode);
InputMode parse_input_mode(std::string_view s);

// (1/pi) * arccos of the clamped cosine similarity. In [0, 1].
double angular_distance(std::span<const float> x, std::span<const float> y);

// Mean angular distance d(n, ell) between h_ell and h_{ell+n}, for block
// sizes n in 1..m-1 and starts ell in 0..m-n.
class DistanceMatrix {
public:
    DistanceMatrix() = default;
    explicit DistanceMatrix(int num_layers);

    int num_layers() const { return m_; }
    int max_block() const { return m_ - 1; }
    int num_starts(int n) const { return m_ - n + 1; }

    double at(int n, int ell) const;
    void set(int n, int ell, double value);
    std::span<const double> row(int n) const;

    int sample_count = 0;
    int skipped_count = 0;
    InputMode source = InputMode::speech;
    std::string dataset_id;

private:
    int m_ = 0;
    std::vector<std::vector<double>> rows_;  // rows_[n - 1][ell]
};

// Per-example distance table of one trace (the single-sample matrix).
DistanceMatrix distances_from_trace(const HiddenTrace& trace);

// Averages per-example distances over a set of embedded inputs. Examples
// whose trace holds a zero vector are skipped and counted.
DistanceMatrix build_distance_matrix(const DecoderModel& model, const std::vector<Mat>& inputs, InputMode source,
                                     std::string dataset_id);

struct BlockChoice {
    int start = 0;
    double distance = 0.0;
};

// Smallest index among the minima.
BlockChoice argmin_row(std::span<const double> row);

// Argmin over plan-valid starts. With allow_final_layer false, starts whose
// block would remove the last layer (ell + n == m) are excluded.
BlockChoice optimal_block(const DistanceMatrix& d, int n, bool allow_final_layer = false);

struct PathEntry {
    int n = 0;
    int ell_star = 0;
    double distance = 0.0;
};

struct PruningPath {
    int num_layers = 0;
    std::vector<PathEntry> entries;  // n = 1..m-1 ascending
    InputMode source = InputMode::speech;
    std::string dataset_id;
    std::string fingerprint;

    const PathEntry& entry(int n) const;
};

PruningPath pruning_path(const DistanceMatrix& d, bool allow_final_layer = false);

struct PathComparison {
    double agreement = 0.0;
    std::optional<double> mean_abs_diff;  // matrix inputs only
    std::vector<int> start_deltas;        // ell*_B(n) - ell*_A(n), n ascending
    int num_layers = 0;
};

PathComparison compare_paths(const PruningPath& a, const PruningPath& b);
PathComparison compare_paths(const DistanceMatrix& a, const DistanceMatrix& b);

// Heatmap CSV "n,ell,distance", n then ell ascending, 6 decimals.
std::string heatmap_csv(const DistanceMatrix& d);
DistanceMatrix parse_heatmap_csv(const std::string& text);

std::string path_json(const PruningPath& path);
PruningPath parse_path_json(const std::string& text);

std::string comparison_json(const PathComparison& c);

}  // namespace speechprune
