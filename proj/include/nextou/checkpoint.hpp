#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nextou/layers.hpp"

namespace nextou {

/// Binary training snapshot: the run config text, the iteration counter and
/// every named tensor (parameters, norm buffers, optimizer momentum), all
/// in double precision, guarded by a checksum.
struct Checkpoint {
    enum class Kind : std::uint8_t { parameter = 0, buffer = 1, momentum = 2 };
    struct Entry {
        std::string name;
        Kind kind;
        Tensor value;
    };

    std::string config_yaml;
    Index iteration = 0;
    std::vector<Entry> entries;

    static Checkpoint capture(std::string config_yaml, Index iteration, const ParameterSet& params,
                              const std::vector<Tensor>* momentum);

    /// Copies stored tensors back; names and shapes must match exactly.
    void restore(ParameterSet& params, std::vector<Tensor>* momentum) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nextou
