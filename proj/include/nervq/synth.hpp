#pragma once

#include <cstdint>
#include <string>

#include "nervq/nervlite.hpp"

namespace nervq {

enum class Motif { Blobs, Gradient, CheckerDrift };

Motif motif_from_string(const std::string& name);
const char* motif_name(Motif m);

/// Deterministic seeded clip with per-frame motion.
VideoClip generate_clip(std::uint64_t seed, int frames, int height, int width, Motif motif);

} // namespace nervq
