#include "difflare/lgp.hpp"

#include <cmath>

#include "difflare/errors.hpp"

namespace difflare {

double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }

std::vector<double> AttentionMask::materialize() const {
    size_t n = row.size();
    std::vector<double> m(n * n);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) m[i * n + j] = row[j];
    return m;
}

LuminanceMask luminance_mask(const ImageRGB& img, double s, bool gradient_dilation) {
    if (s <= 0.0 || s >= 1.0) throw ParameterError("luminance threshold s must be in (0,1)");
    ImageYCbCr yc = rgb_to_ycbcr(img);
    LuminanceMask lm;
    lm.h = img.h;
    lm.w = img.w;
    lm.threshold = s;
    lm.mask.resize(static_cast<size_t>(img.h) * img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            lm.mask[static_cast<size_t>(y) * img.w + x] = yc.at(y, x, 0) < s ? 1 : 0;
    if (gradient_dilation) {
        // grow the flare (zero) region across pixels with a strong luminance step
        std::vector<uint8_t> out = lm.mask;
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                if (!lm.mask[static_cast<size_t>(y) * img.w + x]) continue;
                double gx = 0, gy = 0;
                if (x > 0 && x < img.w - 1) gx = yc.at(y, x + 1, 0) - yc.at(y, x - 1, 0);
                if (y > 0 && y < img.h - 1) gy = yc.at(y + 1, x, 0) - yc.at(y - 1, x, 0);
                bool near_flare = false;
                for (int dy = -1; dy <= 1 && !near_flare; ++dy)
                    for (int dx = -1; dx <= 1 && !near_flare; ++dx) {
                        int yy = y + dy, xx = x + dx;
                        if (yy >= 0 && yy < img.h && xx >= 0 && xx < img.w &&
                            !lm.mask[static_cast<size_t>(yy) * img.w + xx])
                            near_flare = true;
                    }
                if (near_flare && std::hypot(gx, gy) > 0.25)
                    out[static_cast<size_t>(y) * img.w + x] = 0;
            }
        lm.mask = std::move(out);
    }
    return lm;
}

AttentionMask to_attention_mask(const LuminanceMask& lm, int h_l, int w_l) {
    if (h_l <= 0 || w_l <= 0) throw ParameterError("latent shape must be positive");
    if (h_l > lm.h || w_l > lm.w) throw DimensionError("latent shape larger than mask");
    AttentionMask am;
    am.h_l = h_l;
    am.w_l = w_l;
    am.pooled.resize(static_cast<size_t>(h_l) * w_l);
    // adaptive average pooling: output-driven bin edges, exact average per bin
    for (int oy = 0; oy < h_l; ++oy) {
        int y0 = oy * lm.h / h_l, y1 = (oy + 1) * lm.h / h_l;
        for (int ox = 0; ox < w_l; ++ox) {
            int x0 = ox * lm.w / w_l, x1 = (ox + 1) * lm.w / w_l;
            double s = 0;
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) s += lm.at(y, x);
            am.pooled[static_cast<size_t>(oy) * w_l + ox] =
                s / static_cast<double>((y1 - y0) * (x1 - x0));
        }
    }
    am.row.resize(am.pooled.size());
    for (size_t i = 0; i < am.pooled.size(); ++i) am.row[i] = silu_scalar(am.pooled[i]);
    return am;
}

}  // namespace difflare
