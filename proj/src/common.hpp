#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace speechprune {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXf;
using RowVec = Eigen::Matrix<float, 1, Eigen::Dynamic, Eigen::RowMajor>;

// Error categories. The CLI maps these onto exit codes and the C API onto
// sprn_status values, so the numbering is part of the public contract.
enum class ErrorCode : int {
    config = 1,
    shape,
    numeric,
    length,
    range,
    selector,
    vocabulary,
    empty_output,
    loss_undefined,
    degenerate_vector,
    plan,
    consistency,
    io,
    version,
    checksum,
    undefined_metric,
    domain,
    coverage,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) {
        fail(code, message);
    }
}

// A tensor together with its (lazily allocated) gradient. Only parameters
// flagged trainable accumulate gradients during backward.
struct Param {
    Mat value;
    Mat grad;
    bool trainable = false;

    Eigen::Index rows() const { return value.rows(); }
    Eigen::Index cols() const { return value.cols(); }
    Eigen::Index size() const { return value.size(); }

    void zero_grad() {
        if (trainable) {
            grad.setZero(value.rows(), value.cols());
        } else {
            grad.resize(0, 0);
        }
    }
};

// Deterministic random source. std::normal_distribution is not specified
// bit-for-bit across standard libraries, so Gaussians come from Box-Muller
// over the (fully specified) mt19937_64 stream.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = radius * std::sin(two_pi * u2);
        has_spare_ = true;
        return radius * std::cos(two_pi * u2);
    }

    // Uniform integer in [lo, hi] inclusive, rejection sampled.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        if (span == 0) {
            return static_cast<int64_t>(engine_());
        }
        const uint64_t limit = UINT64_MAX - (UINT64_MAX % span);
        uint64_t draw = engine_();
        while (draw >= limit) {
            draw = engine_();
        }
        return lo + static_cast<int64_t>(draw % span);
    }

    template <class T>
    void shuffle(std::vector<T>& values) {
        for (size_t i = values.size(); i > 1; --i) {
            const auto j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i - 1)));
            std::swap(values[i - 1], values[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Sub-seed derivation by labeled hashing: derive_seed(s, "projector") is
// stable across runs and independent of call order.
uint64_t derive_seed(uint64_t seed, std::string_view label);

void fill_normal(Mat& m, Rng& rng, double stddev);

bool all_finite(const Mat& m);

}  // namespace speechprune
