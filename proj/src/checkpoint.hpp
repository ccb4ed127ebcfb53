#pragma once

#include "model.hpp"
#include "speech.hpp"
#include "surgery.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace speechprune {

inline constexpr uint32_t kCheckpointVersion = 1;

struct Provenance {
    std::vector<SurgeryPlan> surgeries;
    int64_t train_steps = 0;
    std::vector<std::string> seed_lineage;
    std::string task;         // "transcribe" / "translate"
    std::vector<int> prompt;  // task prompt token ids

    bool operator==(const Provenance&) const = default;
};

struct Checkpoint {
    DecoderModel model;
    Projector projector;
    Provenance provenance;

    // Fraction of the ancestor's layers that have been removed.
    double drop_fraction() const;
};

// Layout: "SPRNCKPT", u32 version, u64 metadata length, metadata JSON,
// u32 CRC-32 of the metadata, then the f32 little-endian payload. The
// metadata indexes every tensor by name with offset, shape and CRC-32.
Bytes encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const Bytes& bytes, const std::string& context);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Accepts a checkpoint file or a directory holding model.ckpt.
std::filesystem::path resolve_checkpoint_path(const std::filesystem::path& path);

// Short SHA-256 over the config and decoder tensors.
std::string model_fingerprint(const DecoderModel& model);

}  // namespace speechprune
