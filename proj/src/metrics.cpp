#include "metrics.hpp"

#include "log.hpp"

#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace speechprune {

namespace {

bool is_ascii_punct(unsigned char c) {
    return c < 128 && std::ispunct(c) != 0;
}

bool is_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts ngrams(const std::vector<std::string>& words, size_t n) {
    NgramCounts out;
    for (size_t i = 0; i + n <= words.size(); ++i) {
        ++out[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                       words.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return out;
}

int argmax_row(const Mat& logits, Eigen::Index row) {
    int best = 0;
    float best_v = logits(row, 0);
    for (Eigen::Index j = 1; j < logits.cols(); ++j) {
        if (logits(row, j) > best_v) {
            best_v = logits(row, j);
            best = static_cast<int>(j);
        }
    }
    return best;
}

int64_t read_vm_hwm_bytes() {
    std::ifstream in("/proc/self/status");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            std::istringstream ls(line.substr(6));
            int64_t kb = 0;
            ls >> kb;
            return kb * 1024;
        }
    }
    return 0;
}

bool reset_vm_hwm() {
    std::ofstream out("/proc/self/clear_refs");
    if (!out.good()) {
        return false;
    }
    out << "5";
    return out.good();
}

}  // namespace

std::string normalize_text(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (const char ch : s) {
        auto c = static_cast<unsigned char>(ch);
        if (is_space(c) || is_ascii_punct(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        if (c < 128) {
            c = static_cast<unsigned char>(std::tolower(c));
        }
        out.push_back(static_cast<char>(c));
    }
    return out;
}

std::vector<std::string> split_words(std::string_view s) {
    std::vector<std::string> words;
    std::string cur;
    for (const char ch : s) {
        if (is_space(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                words.push_back(std::move(cur));
                cur.clear();
            }
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) {
        words.push_back(std::move(cur));
    }
    return words;
}

int edit_distance(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    std::vector<int> prev(hyp.size() + 1);
    std::vector<int> cur(hyp.size() + 1);
    for (size_t j = 0; j <= hyp.size(); ++j) {
        prev[j] = static_cast<int>(j);
    }
    for (size_t i = 1; i <= ref.size(); ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= hyp.size(); ++j) {
            const int sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[hyp.size()];
}

WerStats wer_stats(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
    require(refs.size() == hyps.size(), ErrorCode::shape,
            "WER over " + std::to_string(refs.size()) + " references and " + std::to_string(hyps.size()) +
                " hypotheses");
    WerStats s;
    for (size_t i = 0; i < refs.size(); ++i) {
        const auto r = split_words(normalize_text(refs[i]));
        const auto h = split_words(normalize_text(hyps[i]));
        s.edits += edit_distance(r, h);
        s.words += static_cast<long>(r.size());
    }
    require(s.words > 0, ErrorCode::undefined_metric, "WER is undefined for an empty reference corpus");
    return s;
}

double wer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
    return wer_stats(refs, hyps).percent();
}

std::vector<std::string> bleu_tokenize(std::string_view s) {
    std::string spaced;
    spaced.reserve(s.size() * 2);
    for (const char ch : s) {
        if (is_ascii_punct(static_cast<unsigned char>(ch))) {
            spaced.push_back(' ');
            spaced.push_back(ch);
            spaced.push_back(' ');
        } else {
            spaced.push_back(ch);
        }
    }
    return split_words(spaced);
}

double bleu(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
    constexpr size_t kMaxOrder = 4;
    require(refs.size() == hyps.size(), ErrorCode::shape,
            "BLEU over " + std::to_string(refs.size()) + " references and " + std::to_string(hyps.size()) +
                " hypotheses");
    require(!refs.empty(), ErrorCode::undefined_metric, "BLEU over an empty corpus");
    std::array<long, kMaxOrder> correct{};
    std::array<long, kMaxOrder> total{};
    long sys_len = 0;
    long ref_len = 0;
    for (size_t i = 0; i < refs.size(); ++i) {
        const auto r = bleu_tokenize(refs[i]);
        const auto h = bleu_tokenize(hyps[i]);
        sys_len += static_cast<long>(h.size());
        ref_len += static_cast<long>(r.size());
        for (size_t n = 1; n <= kMaxOrder; ++n) {
            const NgramCounts hc = ngrams(h, n);
            const NgramCounts rc = ngrams(r, n);
            for (const auto& [gram, count] : hc) {
                const auto it = rc.find(gram);
                correct[n - 1] += it == rc.end() ? 0 : std::min(count, it->second);
                total[n - 1] += count;
            }
        }
    }
    if (sys_len == 0) {
        log_warn("BLEU of an empty hypothesis corpus is 0");
        return 0.0;
    }
    // No unigram matches: the smoothing floor is not credited.
    if (correct[0] == 0) {
        return 0.0;
    }
    double log_sum = 0.0;
    double smooth = 1.0;
    for (size_t n = 0; n < kMaxOrder; ++n) {
        if (total[n] == 0) {
            return 0.0;
        }
        double p = 0.0;
        if (correct[n] == 0) {
            smooth *= 2.0;
            p = 1.0 / (smooth * static_cast<double>(total[n]));
        } else {
            p = static_cast<double>(correct[n]) / static_cast<double>(total[n]);
        }
        log_sum += std::log(p);
    }
    const double bp =
        sys_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(sys_len)) : 1.0;
    return std::clamp(100.0 * bp * std::exp(log_sum / kMaxOrder), 0.0, 100.0);
}

std::string_view to_string(Metric m) {
    return m == Metric::wer ? "wer" : "bleu";
}

Metric parse_metric(std::string_view s) {
    if (s == "wer") {
        return Metric::wer;
    }
    if (s == "bleu") {
        return Metric::bleu;
    }
    fail(ErrorCode::config, "unknown metric '" + std::string(s) + "' (expected wer or bleu)");
}

DegradationRecord relative_degradation(double score, double baseline, Metric metric) {
    require(baseline > 0.0 && std::isfinite(baseline), ErrorCode::domain,
            "relative degradation needs a positive baseline (got " + std::to_string(baseline) + ")");
    DegradationRecord r;
    r.metric = metric;
    r.baseline = baseline;
    r.score = score;
    r.delta = (score - baseline) / baseline;
    return r;
}

bool within_threshold(const DegradationRecord& r, double threshold) {
    return r.metric == Metric::wer ? r.delta <= threshold : -r.delta <= threshold;
}

double max_prunable_fraction(const std::vector<DegradationRecord>& records, double threshold) {
    return max_prunable_fraction(records, Thresholds{threshold, threshold});
}

double max_prunable_fraction(const std::vector<DegradationRecord>& records, const Thresholds& thresholds) {
    require(!records.empty(), ErrorCode::coverage, "no degradation records");
    std::map<double, std::vector<const DegradationRecord*>> by_drop;
    for (const DegradationRecord& r : records) {
        by_drop[r.drop_fraction].push_back(&r);
    }
    std::optional<std::set<std::string>> datasets;
    double best = 0.0;
    for (const auto& [drop, recs] : by_drop) {
        std::set<std::string> ids;
        bool ok = true;
        for (const DegradationRecord* r : recs) {
            ids.insert(r->dataset_id);
            ok = ok && within_threshold(*r, r->metric == Metric::wer ? thresholds.wer : thresholds.bleu);
        }
        if (!datasets) {
            datasets = ids;
        }
        require(ids == *datasets, ErrorCode::coverage,
                "drop level " + std::to_string(drop) + " covers a different set of datasets");
        if (ok) {
            best = std::max(best, drop);
        }
    }
    return best;
}

std::vector<int> greedy_decode(const DecoderModel& model, const Projector& projector,
                               const StackedFeatures& features, const std::vector<int>& prompt, int max_len,
                               int eos_token) {
    return greedy_decode_batch(model, projector, {features}, prompt, max_len, eos_token, 0).front();
}

std::vector<std::vector<int>> greedy_decode_batch(const DecoderModel& model, const Projector& projector,
                                                  const std::vector<StackedFeatures>& features,
                                                  const std::vector<int>& prompt, int max_len, int eos_token,
                                                  int padding) {
    require(max_len >= 1, ErrorCode::config, "max_len must be >= 1");
    require(padding >= 0, ErrorCode::config, "padding must be >= 0");
    std::vector<AssembledSequence> prefixes;
    for (const StackedFeatures& f : features) {
        prefixes.push_back(assemble(project(projector, f), prompt, {}, model.embed.value));
    }
    std::vector<std::vector<int>> outputs(features.size());
    std::vector<bool> done(features.size(), false);
    for (int step = 0; step < max_len; ++step) {
        Eigen::Index longest = 0;
        for (size_t i = 0; i < prefixes.size(); ++i) {
            longest = std::max(longest, prefixes[i].length() + static_cast<Eigen::Index>(outputs[i].size()));
        }
        const Eigen::Index padded = longest + padding;
        bool any = false;
        for (size_t i = 0; i < prefixes.size(); ++i) {
            if (done[i]) {
                continue;
            }
            const Eigen::Index real = prefixes[i].length() + static_cast<Eigen::Index>(outputs[i].size());
            Mat x = Mat::Zero(padded, model.config.d_model);
            x.topRows(prefixes[i].length()) = prefixes[i].embeddings;
            for (size_t t = 0; t < outputs[i].size(); ++t) {
                x.row(prefixes[i].length() + static_cast<Eigen::Index>(t)) = model.embed.value.row(outputs[i][t]);
            }
            const ForwardResult r = forward(model, x);
            const int next = argmax_row(r.logits, real - 1);
            if (next == eos_token) {
                done[i] = true;
                continue;
            }
            outputs[i].push_back(next);
            any = true;
        }
        if (!any) {
            break;
        }
    }
    return outputs;
}

std::vector<BenchmarkResult> benchmark_forward(const std::vector<ModelVariant>& variants,
                                               const BenchmarkWorkload& workload) {
    require(workload.runs >= 1 && workload.batch >= 1 && workload.seq_len >= 1, ErrorCode::config,
            "benchmark workload must be non-empty");
    std::vector<BenchmarkResult> results;
    for (const ModelVariant& variant : variants) {
        BenchmarkResult res;
        res.name = variant.name;
        {
            DecoderModel model = variant.make();
            res.num_layers = model.num_layers();
            for (const NamedParam& np : named_parameters(model)) {
                res.parameter_bytes += static_cast<int64_t>(np.param->size()) * 4;
            }
            Rng rng(derive_seed(workload.seed, "benchmark-inputs"));
            std::vector<Mat> inputs;
            for (int b = 0; b < workload.batch; ++b) {
                Mat x(workload.seq_len, model.config.d_model);
                fill_normal(x, rng, 1.0);
                inputs.push_back(std::move(x));
            }
            auto run_once = [&] {
                float sink = 0.0f;
                for (const Mat& x : inputs) {
                    sink += forward(model, x).logits(0, 0);
                }
                return sink;
            };
            for (int w = 0; w < workload.warmup; ++w) {
                run_once();
            }
            const bool hwm = reset_vm_hwm();
            for (int r = 0; r < workload.runs; ++r) {
                const auto t0 = std::chrono::steady_clock::now();
                volatile float sink = run_once();
                (void)sink;
                res.samples.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
            }
            res.peak_rss_bytes = hwm ? read_vm_hwm_bytes() : 0;
        }
        malloc_trim(0);
        std::vector<double> sorted = res.samples;
        std::sort(sorted.begin(), sorted.end());
        const size_t mid = sorted.size() / 2;
        res.median_seconds = sorted.size() % 2 == 1 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
        results.push_back(std::move(res));
    }
    return results;
}

double speedup(const BenchmarkResult& reference, const BenchmarkResult& variant) {
    return 1.0 - variant.median_seconds / reference.median_seconds;
}

}  // namespace speechprune
