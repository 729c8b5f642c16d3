#include "nervq/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nervq/rng.hpp"

namespace nervq {

Motif motif_from_string(const std::string& name) {
    if (name == "blobs") return Motif::Blobs;
    if (name == "gradient") return Motif::Gradient;
    if (name == "checker-drift") return Motif::CheckerDrift;
    throw std::invalid_argument("unknown motif '" + name + "' (expected blobs|gradient|checker-drift)");
}

const char* motif_name(Motif m) {
    switch (m) {
        case Motif::Blobs: return "blobs";
        case Motif::Gradient: return "gradient";
        case Motif::CheckerDrift: return "checker-drift";
    }
    return "?";
}

static std::uint8_t to_u8(double v) {
    const double x = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(x * 255.0));
}

VideoClip generate_clip(std::uint64_t seed, int frames, int height, int width, Motif motif) {
    if (frames < 2) throw std::invalid_argument("clip needs at least 2 frames, got " + std::to_string(frames));
    if (height < 1 || width < 1) throw std::invalid_argument("clip dims must be positive");

    VideoClip clip;
    clip.frames = static_cast<std::uint32_t>(frames);
    clip.height = static_cast<std::uint32_t>(height);
    clip.width = static_cast<std::uint32_t>(width);
    clip.data.assign(static_cast<std::size_t>(frames) * 3 * height * width, 0);

    Rng rng(seed);
    auto px = [&](int t, int c, int y, int x) -> std::uint8_t& {
        return clip.data[((static_cast<std::size_t>(t) * 3 + c) * height + y) * width + x];
    };

    switch (motif) {
        case Motif::Blobs: {
            struct Blob {
                double x, y, vx, vy, r;
                double rgb[3];
            };
            const int nblobs = 3;
            std::vector<Blob> blobs;
            for (int i = 0; i < nblobs; ++i) {
                Blob b;
                b.x = rng.uniform(0.2, 0.8) * width;
                b.y = rng.uniform(0.2, 0.8) * height;
                // keep speeds >= ~0.4 px/frame so motion is visible
                b.vx = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.4, 1.2) * width / 16.0;
                b.vy = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.4, 1.2) * height / 16.0;
                b.r = rng.uniform(0.15, 0.3) * std::min(height, width);
                for (double& c : b.rgb) c = rng.uniform(0.3, 1.0);
                blobs.push_back(b);
            }
            double bg[3];
            for (double& c : bg) c = rng.uniform(0.0, 0.2);
            for (int t = 0; t < frames; ++t) {
                for (int y = 0; y < height; ++y) {
                    for (int x = 0; x < width; ++x) {
                        double acc[3] = {bg[0], bg[1], bg[2]};
                        for (const Blob& b : blobs) {
                            // wrap-around translation keeps blobs on screen
                            double cx = std::fmod(b.x + b.vx * t, static_cast<double>(width));
                            double cy = std::fmod(b.y + b.vy * t, static_cast<double>(height));
                            if (cx < 0) cx += width;
                            if (cy < 0) cy += height;
                            double dx = std::abs(x - cx), dy = std::abs(y - cy);
                            dx = std::min(dx, width - dx);
                            dy = std::min(dy, height - dy);
                            const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * b.r * b.r));
                            for (int c = 0; c < 3; ++c) acc[c] += b.rgb[c] * g;
                        }
                        for (int c = 0; c < 3; ++c) px(t, c, y, x) = to_u8(acc[c]);
                    }
                }
            }
            break;
        }
        case Motif::Gradient: {
            const double phase0 = rng.uniform(0.0, 1.0);
            const double angle = rng.uniform(0.0, 6.283185307179586);
            const double gx = std::cos(angle), gy = std::sin(angle);
            double tint[3];
            for (double& c : tint) c = rng.uniform(0.5, 1.0);
            for (int t = 0; t < frames; ++t) {
                const double phase = phase0 + static_cast<double>(t) / frames;
                for (int y = 0; y < height; ++y) {
                    for (int x = 0; x < width; ++x) {
                        const double u = (gx * x / width + gy * y / height) + phase;
                        const double v = 0.5 + 0.5 * std::sin(6.283185307179586 * u);
                        for (int c = 0; c < 3; ++c) px(t, c, y, x) = to_u8(v * tint[c]);
                    }
                }
            }
            break;
        }
        case Motif::CheckerDrift: {
            const int cell = std::max(2, std::min(height, width) / 4);
            double ca[3], cb[3];
            for (int c = 0; c < 3; ++c) {
                ca[c] = rng.uniform(0.6, 1.0);
                cb[c] = rng.uniform(0.0, 0.3);
            }
            for (int t = 0; t < frames; ++t) {
                for (int y = 0; y < height; ++y) {
                    for (int x = 0; x < width; ++x) {
                        const int cx = (x + t) / cell, cy = (y + t / 2) / cell;
                        const bool a = ((cx + cy) & 1) == 0;
                        for (int c = 0; c < 3; ++c) px(t, c, y, x) = to_u8(a ? ca[c] : cb[c]);
                    }
                }
            }
            break;
        }
    }
    return clip;
}

} // namespace nervq
