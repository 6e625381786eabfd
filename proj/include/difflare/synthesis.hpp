#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "difflare/image.hpp"
#include "difflare/rng.hpp"

namespace difflare {

// Paired training record: GT = clip(B (+) L), x_in = clip(B (+) L (+) F_r (+) F_s),
// with (+) linear-light addition (gamma 2.2 decode / encode).
struct FlareSample {
    ImageRGB background;    // B
    ImageRGB light_source;  // L
    ImageRGB reflective;    // F_r
    ImageRGB scattering;    // F_s
    ImageRGB gt;            // GT
    ImageRGB input;         // x_in
    uint64_t seed = 0;
    int background_id = -1;
};

struct AugmentSpec {
    double rotation_deg = 0;   // [0, 360)
    double scale = 1.0;        // [0.8, 1.5]
    double translate_x = 0, translate_y = 0;
    bool flip = false;
    double flare_gain = 1.0;   // [0.8, 3.0]
    int crop_x = 0, crop_y = 0;
};

AugmentSpec sample_augment(Rng& rng, int bg_h, int bg_w, int crop);

enum class FlareKind { scattering, reflective };

struct FlareParams {
    double intensity = 1.0;   // peak value, [0, 1]
    int num_rays = 12;        // scattering: streak count
    double radius = 0.45;     // streak length / chain extent, fraction of min(H,W)
    int num_discs = 3;        // reflective: disc count
    double center_x = 0.5, center_y = 0.5;  // light position, fraction of size
};

// Linear-light compositing: decode gamma 2.2, sum, clip, re-encode.
ImageRGB composite(const std::vector<ImageRGB>& parts);

// Procedural stand-ins for real flare assets.
ImageRGB procedural_flare(FlareKind kind, const FlareParams& params, int h, int w,
                          uint64_t seed);
ImageRGB procedural_background(uint64_t seed, int h, int w);
// Gaussian blob light source, peak >= 0.9, centered at (cx, cy) fractions
ImageRGB procedural_light(double cx, double cy, int h, int w, uint64_t seed);

struct FlareAssets {
    ImageRGB scattering;   // co-centered with light
    ImageRGB light;
    ImageRGB reflective;
    bool has_flares = true;  // false -> degenerate zero-flare sample
    int scattering_id = -1, reflective_id = -1, light_id = -1;
};

FlareSample make_sample(const ImageRGB& background, const FlareAssets& assets, uint64_t seed,
                        int crop);

struct CorpusConfig {
    std::string kind = "procedural";  // or "folder"
    std::string folder;               // corpus root for folder-backed
    int train_backgrounds = 48;
    int test_backgrounds = 32;
    int crop = 64;
    int samples_per_background = 1;
    double noflare_prob = 0.0;        // fraction of degenerate zero-flare samples
    uint64_t seed = 0;
};

enum class Split { train, test };

// Deterministic sample stream; train/test background pools are disjoint.
class DatasetStream {
  public:
    DatasetStream(const CorpusConfig& cfg, Split split);
    int size() const { return count_; }
    FlareSample sample(int index) const;  // index in [0, size)
    std::string manifest_line(int index) const;

  private:
    CorpusConfig cfg_;
    Split split_;
    int count_ = 0;
    std::vector<std::string> folder_backgrounds_;  // sorted paths when folder-backed
    ImageRGB background_for(int bg_id) const;
    FlareAssets assets_for(uint64_t sample_seed, int h, int w) const;
};

// Writes corpus PNGs + manifest under dir (backgrounds/, flares/..., light/).
void write_corpus(const CorpusConfig& cfg, const std::string& dir);

}  // namespace difflare
