#pragma once

#include <cstdint>
#include <vector>

#include "difflare/image.hpp"

namespace difflare {

// Binary luminance-threshold mask; 1 marks flare-free pixels (Y below s).
struct LuminanceMask {
    int h = 0, w = 0;
    double threshold = 0.85;
    std::vector<uint8_t> mask;  // 1 = flare-free

    uint8_t at(int y, int x) const { return mask[static_cast<size_t>(y) * w + x]; }
};

// Pooled + SiLU-activated latent-resolution attention mask. Conceptually
// shape (1, N, N) with N = h_l*w_l and every row identical; only the shared
// row is stored.
struct AttentionMask {
    int h_l = 0, w_l = 0;
    std::vector<double> pooled;  // (h_l, w_l) average-pooled mask, pre-activation
    std::vector<double> row;     // silu(pooled) flattened, length h_l*w_l

    double entry(int i, int j) const {
        (void)i;  // rows are stacked copies
        return row[j];
    }
    // full (N, N) matrix, mostly for tests and the masked-attention path
    std::vector<double> materialize() const;
};

// The threshold is applied to Y of rgb_to_ycbcr. The module name mentions a
// gradient, but the mask itself thresholds luminance values only; an optional
// gradient-magnitude dilation of the flare (zero) region is available behind
// a flag, off by default.
LuminanceMask luminance_mask(const ImageRGB& img, double s, bool gradient_dilation = false);

// Average-pool to (h_l, w_l) (adaptive bin edges when not divisible), SiLU,
// flatten, stack rows.
AttentionMask to_attention_mask(const LuminanceMask& lm, int h_l, int w_l);

double silu_scalar(double x);

}  // namespace difflare
