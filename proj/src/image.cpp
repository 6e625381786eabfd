#include "difflare/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "difflare/errors.hpp"

namespace difflare {

ImageRGB::ImageRGB(int h, int w, Colorspace cs) : h(h), w(w), cs(cs) {
    if (h < 8 || w < 8) throw DimensionError("ImageRGB: minimum size is 8x8");
    px.assign(static_cast<size_t>(h) * w * 3, 0.0);
}

void ImageRGB::clip() {
    for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
}

ImageYCbCr rgb_to_ycbcr(const ImageRGB& img) {
    ImageYCbCr out;
    out.h = img.h;
    out.w = img.w;
    out.pl.resize(img.px.size());
    for (size_t i = 0; i < img.px.size(); i += 3) {
        double r = img.px[i], g = img.px[i + 1], b = img.px[i + 2];
        out.pl[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        out.pl[i + 1] = -0.168736 * r - 0.331264 * g + 0.5 * b;
        out.pl[i + 2] = 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
    return out;
}

ImageRGB ycbcr_to_rgb(const ImageYCbCr& img) {
    ImageRGB out(img.h, img.w);
    for (size_t i = 0; i < img.pl.size(); i += 3) {
        double y = img.pl[i], cb = img.pl[i + 1], cr = img.pl[i + 2];
        out.px[i] = y + 1.402 * cr;
        out.px[i + 1] = y - 0.344136 * cb - 0.714136 * cr;
        out.px[i + 2] = y + 1.772 * cb;
    }
    out.clip();
    return out;
}

double psnr(const ImageRGB& a, const ImageRGB& b) {
    if (a.h != b.h || a.w != b.w) throw DimensionError("psnr: shape mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.px.size(); ++i) {
        double d = a.px[i] - b.px[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.px.size());
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

// 11-tap Gaussian, sigma 1.5, normalized
const std::vector<double>& ssim_window() {
    static const std::vector<double> w = [] {
        std::vector<double> k(11);
        double s = 0;
        for (int i = 0; i < 11; ++i) {
            double d = i - 5;
            k[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            s += k[i];
        }
        for (auto& v : k) v /= s;
        return k;
    }();
    return w;
}

}  // namespace

double ssim(const ImageRGB& a, const ImageRGB& b) {
    if (a.h != b.h || a.w != b.w) throw DimensionError("ssim: shape mismatch");
    if (a.h < 11 || a.w < 11) throw DimensionError("ssim: image smaller than 11x11 window");
    const auto& k = ssim_window();
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0;
    long count = 0;
    // valid windows only; separable weighting done directly per window
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y + 11 <= a.h; ++y) {
            for (int x = 0; x + 11 <= a.w; ++x) {
                double mua = 0, mub = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        double wgt = k[i] * k[j];
                        mua += wgt * a.at(y + i, x + j, c);
                        mub += wgt * b.at(y + i, x + j, c);
                    }
                double va = 0, vb = 0, cov = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        double wgt = k[i] * k[j];
                        double da = a.at(y + i, x + j, c) - mua;
                        double db = b.at(y + i, x + j, c) - mub;
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cov += wgt * da * db;
                    }
                double num = (2 * mua * mub + c1) * (2 * cov + c2);
                double den = (mua * mua + mub * mub + c1) * (va + vb + c2);
                total += num / den;
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

MetricReport metrics(const ImageRGB& a, const ImageRGB& b) {
    return {psnr(a, b), ssim(a, b)};
}

ImageRGB read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("failed to decode " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    png_byte ct = png_get_color_type(png, info), depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (ct == PNG_COLOR_TYPE_GRAY || ct == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    ImageRGB img(static_cast<int>(h), static_cast<int>(w));
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(static_cast<int>(y), static_cast<int>(x), c) =
                    row[static_cast<size_t>(x) * 3 + c] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

void write_png(const std::string& path, const ImageRGB& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("failed to encode " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.w, img.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(img.w) * 3);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(img.at(y, x, c), 0.0, 1.0);
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<png_byte>(std::lround(v * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

double srgb_decode(double v) { return std::pow(std::clamp(v, 0.0, 1.0), 2.2); }
double srgb_encode(double v) { return std::pow(std::clamp(v, 0.0, 1.0), 1.0 / 2.2); }

}  // namespace difflare
