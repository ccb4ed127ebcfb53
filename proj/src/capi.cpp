#include "speechprune/speechprune.h"

#include "log.hpp"
#include "pipeline.hpp"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>

struct sprn_checkpoint {
    speechprune::Checkpoint ckpt;
};

struct sprn_dataset {
    speechprune::Dataset ds;
};

struct sprn_distance_matrix {
    speechprune::DistanceMatrix d;
};

namespace {

thread_local std::string g_last_error;

sprn_status fail_with(sprn_status status, const std::string& message) {
    g_last_error = message;
    return status;
}

template <class F>
sprn_status guarded(F&& body) {
    try {
        body();
        g_last_error.clear();
        return SPRN_OK;
    } catch (const speechprune::Error& e) {
        return fail_with(static_cast<sprn_status>(static_cast<int>(e.code())), e.what());
    } catch (const nlohmann::json::exception& e) {
        return fail_with(SPRN_ERR_CONFIG, std::string("invalid JSON: ") + e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail_with(SPRN_ERR_IO, e.what());
    } catch (const std::bad_alloc&) {
        return fail_with(SPRN_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return fail_with(SPRN_ERR_INTERNAL, e.what());
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out == nullptr) {
        throw std::bad_alloc();
    }
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

#define SPRN_REQUIRE_ARG(cond)                                                        \
    do {                                                                              \
        if (!(cond)) {                                                                \
            return fail_with(SPRN_ERR_INVALID_ARGUMENT, "invalid argument: " #cond); \
        }                                                                             \
    } while (0)

std::vector<std::string> strings_of(const char* const* items, size_t count) {
    std::vector<std::string> out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        out.emplace_back(items[i] != nullptr ? items[i] : "");
    }
    return out;
}

}  // namespace

extern "C" {

const char* sprn_last_error_message(void) {
    return g_last_error.c_str();
}

const char* sprn_status_name(sprn_status status) {
    switch (status) {
        case SPRN_OK: return "ok";
        case SPRN_ERR_INVALID_ARGUMENT: return "invalid-argument error";
        case SPRN_ERR_INTERNAL: return "internal error";
        default: break;
    }
    const int code = static_cast<int>(status);
    if (code >= 1 && code <= static_cast<int>(speechprune::ErrorCode::coverage)) {
        return speechprune::to_string(static_cast<speechprune::ErrorCode>(code)).data();
    }
    return "unknown";
}

const char* sprn_version(void) {
    return speechprune::kToolVersion;
}

void sprn_set_log_level(int level) {
    speechprune::set_log_level(level <= 0   ? speechprune::LogLevel::quiet
                               : level == 1 ? speechprune::LogLevel::warn
                                            : speechprune::LogLevel::info);
}

void sprn_string_free(char* s) {
    std::free(s);
}

sprn_status sprn_run_command(const char* command, const char* options_json, char** result_json) {
    SPRN_REQUIRE_ARG(command != nullptr);
    return guarded([&] {
        const nlohmann::json options =
            options_json != nullptr && *options_json != '\0' ? nlohmann::json::parse(options_json) : nlohmann::json::object();
        const nlohmann::json result = speechprune::run_command(command, options);
        if (result_json != nullptr) {
            *result_json = dup_string(result.dump(2));
        }
    });
}

const char* sprn_command_names(void) {
    static const std::string names = [] {
        std::string out;
        for (const std::string& n : speechprune::command_names()) {
            out += n + "\n";
        }
        return out;
    }();
    return names.c_str();
}

sprn_status sprn_checkpoint_load(const char* path, sprn_checkpoint** out) {
    SPRN_REQUIRE_ARG(path != nullptr && out != nullptr);
    *out = nullptr;
    return guarded([&] {
        auto h = std::make_unique<sprn_checkpoint>();
        h->ckpt = speechprune::load_checkpoint(speechprune::resolve_checkpoint_path(path));
        *out = h.release();
    });
}

sprn_status sprn_checkpoint_save(const sprn_checkpoint* ckpt, const char* path) {
    SPRN_REQUIRE_ARG(ckpt != nullptr && path != nullptr);
    return guarded([&] { speechprune::save_checkpoint(path, ckpt->ckpt); });
}

void sprn_checkpoint_free(sprn_checkpoint* ckpt) {
    delete ckpt;
}

int sprn_checkpoint_num_layers(const sprn_checkpoint* ckpt) {
    return ckpt == nullptr ? -1 : ckpt->ckpt.model.num_layers();
}

sprn_status sprn_checkpoint_layer_ids(const sprn_checkpoint* ckpt, int* ids, size_t capacity, size_t* count) {
    SPRN_REQUIRE_ARG(ckpt != nullptr && count != nullptr && (ids != nullptr || capacity == 0));
    const auto& src = ckpt->ckpt.model.original_layer_ids;
    *count = src.size();
    for (size_t i = 0; i < src.size() && i < capacity; ++i) {
        ids[i] = src[i];
    }
    g_last_error.clear();
    return SPRN_OK;
}

sprn_status sprn_checkpoint_fingerprint(const sprn_checkpoint* ckpt, char** out) {
    SPRN_REQUIRE_ARG(ckpt != nullptr && out != nullptr);
    return guarded([&] { *out = dup_string(speechprune::model_fingerprint(ckpt->ckpt.model)); });
}

sprn_status sprn_checkpoint_prune(sprn_checkpoint* ckpt, int start, int size) {
    SPRN_REQUIRE_ARG(ckpt != nullptr);
    return guarded([&] {
        speechprune::SurgeryPlan plan;
        plan.start = start;
        plan.size = size;
        speechprune::prune_block(ckpt->ckpt.model, plan);
        ckpt->ckpt.provenance.surgeries.push_back(plan);
    });
}

sprn_status sprn_dataset_load(const char* dir, sprn_dataset** out) {
    SPRN_REQUIRE_ARG(dir != nullptr && out != nullptr);
    *out = nullptr;
    return guarded([&] {
        auto h = std::make_unique<sprn_dataset>();
        h->ds = speechprune::load_dataset(dir);
        *out = h.release();
    });
}

void sprn_dataset_free(sprn_dataset* ds) {
    delete ds;
}

size_t sprn_dataset_size(const sprn_dataset* ds) {
    return ds == nullptr ? 0 : ds->ds.utterances.size();
}

sprn_status sprn_dataset_id(const sprn_dataset* ds, char** out) {
    SPRN_REQUIRE_ARG(ds != nullptr && out != nullptr);
    return guarded([&] { *out = dup_string(ds->ds.id()); });
}

sprn_status sprn_analyze(const sprn_checkpoint* ckpt, const sprn_dataset* ds, sprn_mode mode, const char* split,
                         sprn_distance_matrix** out) {
    SPRN_REQUIRE_ARG(ckpt != nullptr && ds != nullptr && out != nullptr);
    SPRN_REQUIRE_ARG(mode == SPRN_MODE_TEXT || mode == SPRN_MODE_SPEECH);
    *out = nullptr;
    return guarded([&] {
        const auto utts = ds->ds.split(split != nullptr ? split : "dev");
        speechprune::require(!utts.empty(), speechprune::ErrorCode::config, "requested split is empty");
        const auto m = mode == SPRN_MODE_TEXT ? speechprune::InputMode::text : speechprune::InputMode::speech;
        auto h = std::make_unique<sprn_distance_matrix>();
        h->d = speechprune::build_distance_matrix(
            ckpt->ckpt.model, speechprune::analysis_inputs(ckpt->ckpt, utts, ds->ds.config.task, m), m, ds->ds.id());
        *out = h.release();
    });
}

void sprn_distance_matrix_free(sprn_distance_matrix* d) {
    delete d;
}

int sprn_distance_matrix_num_layers(const sprn_distance_matrix* d) {
    return d == nullptr ? -1 : d->d.num_layers();
}

sprn_status sprn_distance_matrix_get(const sprn_distance_matrix* d, int n, int ell, double* out) {
    SPRN_REQUIRE_ARG(d != nullptr && out != nullptr);
    return guarded([&] { *out = d->d.at(n, ell); });
}

sprn_status sprn_optimal_block(const sprn_distance_matrix* d, int n, int* ell_star, double* distance) {
    SPRN_REQUIRE_ARG(d != nullptr && ell_star != nullptr && distance != nullptr);
    return guarded([&] {
        const speechprune::BlockChoice c = speechprune::optimal_block(d->d, n);
        *ell_star = c.start;
        *distance = c.distance;
    });
}

sprn_status sprn_distance_matrix_heatmap_csv(const sprn_distance_matrix* d, char** out) {
    SPRN_REQUIRE_ARG(d != nullptr && out != nullptr);
    return guarded([&] { *out = dup_string(speechprune::heatmap_csv(d->d)); });
}

sprn_status sprn_angular_distance(const float* x, const float* y, size_t dim, double* out) {
    SPRN_REQUIRE_ARG(x != nullptr && y != nullptr && out != nullptr && dim > 0);
    return guarded([&] { *out = speechprune::angular_distance({x, dim}, {y, dim}); });
}

sprn_status sprn_wer(const char* const* refs, const char* const* hyps, size_t count, double* out) {
    SPRN_REQUIRE_ARG((refs != nullptr && hyps != nullptr) || count == 0);
    SPRN_REQUIRE_ARG(out != nullptr);
    return guarded([&] { *out = speechprune::wer(strings_of(refs, count), strings_of(hyps, count)); });
}

sprn_status sprn_bleu(const char* const* refs, const char* const* hyps, size_t count, double* out) {
    SPRN_REQUIRE_ARG((refs != nullptr && hyps != nullptr) || count == 0);
    SPRN_REQUIRE_ARG(out != nullptr);
    return guarded([&] { *out = speechprune::bleu(strings_of(refs, count), strings_of(hyps, count)); });
}

sprn_status sprn_relative_degradation(double score, double baseline, double* delta) {
    SPRN_REQUIRE_ARG(delta != nullptr);
    return guarded(
        [&] { *delta = speechprune::relative_degradation(score, baseline, speechprune::Metric::wer).delta; });
}

sprn_status sprn_normalize_text(const char* text, char** out) {
    SPRN_REQUIRE_ARG(text != nullptr && out != nullptr);
    return guarded([&] { *out = dup_string(speechprune::normalize_text(text)); });
}

}  // extern "C"
