#include "common.hpp"

namespace speechprune {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::config: return "configuration error";
        case ErrorCode::shape: return "shape error";
        case ErrorCode::numeric: return "numeric error";
        case ErrorCode::length: return "length error";
        case ErrorCode::range: return "range error";
        case ErrorCode::selector: return "selector error";
        case ErrorCode::vocabulary: return "vocabulary error";
        case ErrorCode::empty_output: return "empty-output error";
        case ErrorCode::loss_undefined: return "loss-undefined error";
        case ErrorCode::degenerate_vector: return "degenerate-vector error";
        case ErrorCode::plan: return "plan error";
        case ErrorCode::consistency: return "consistency error";
        case ErrorCode::io: return "I/O error";
        case ErrorCode::version: return "version error";
        case ErrorCode::checksum: return "checksum error";
        case ErrorCode::undefined_metric: return "undefined-metric error";
        case ErrorCode::domain: return "domain error";
        case ErrorCode::coverage: return "coverage error";
    }
    return "error";
}

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

uint64_t derive_seed(uint64_t seed, std::string_view label) {
    // FNV-1a over the label, mixed with the parent seed.
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return splitmix64(seed ^ splitmix64(h));
}

void fill_normal(Mat& m, Rng& rng, double stddev) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<float>(rng.normal() * stddev);
    }
}

bool all_finite(const Mat& m) {
    return m.allFinite();
}

}  // namespace speechprune
