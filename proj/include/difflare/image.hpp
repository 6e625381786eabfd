#pragma once

#include <string>
#include <vector>

namespace difflare {

enum class Colorspace { srgb, linear };

// H x W x 3 interleaved, values in [0,1]. H, W >= 8.
struct ImageRGB {
    int h = 0, w = 0;
    std::vector<double> px;
    Colorspace cs = Colorspace::srgb;

    ImageRGB() = default;
    ImageRGB(int h, int w, Colorspace cs = Colorspace::srgb);

    double& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    double at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    size_t numel() const { return px.size(); }
    void clip();  // clamp all values into [0,1]
};

// Y in [0,1], Cb/Cr in [-0.5, 0.5], interleaved like ImageRGB.
struct ImageYCbCr {
    int h = 0, w = 0;
    std::vector<double> pl;
    double& at(int y, int x, int c) { return pl[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    double at(int y, int x, int c) const { return pl[(static_cast<size_t>(y) * w + x) * 3 + c]; }
};

struct MetricReport {
    double psnr_db = 0.0;
    double ssim = 0.0;
};

// BT.601 full range
ImageYCbCr rgb_to_ycbcr(const ImageRGB& img);
ImageRGB ycbcr_to_rgb(const ImageYCbCr& img);

// 10*log10(1/MSE), capped at 100 dB when MSE < 1e-10
double psnr(const ImageRGB& a, const ImageRGB& b);
// mean SSIM over channels, 11x11 Gaussian window sigma 1.5, K1=.01 K2=.03, L=1
double ssim(const ImageRGB& a, const ImageRGB& b);
MetricReport metrics(const ImageRGB& a, const ImageRGB& b);

// 8-bit PNG, linear [0,255] <-> [0,1] mapping
ImageRGB read_png(const std::string& path);
void write_png(const std::string& path, const ImageRGB& img);

// gamma 2.2 helpers used by the compositing pipeline
double srgb_decode(double v);
double srgb_encode(double v);

}  // namespace difflare
