#include "difflare/synthesis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "difflare/errors.hpp"

namespace fs = std::filesystem;

namespace difflare {

namespace {

constexpr double kPi = 3.14159265358979323846;

// inverse-mapped affine warp about the image center, bilinear, zero fill
ImageRGB warp(const ImageRGB& src, double rot_deg, double scale, double tx, double ty,
              bool flip) {
    ImageRGB out(src.h, src.w, src.cs);
    double a = rot_deg * kPi / 180.0;
    double ca = std::cos(a), sa = std::sin(a);
    double cx = (src.w - 1) / 2.0, cy = (src.h - 1) / 2.0;
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) {
            double dx = x - cx - tx, dy = y - cy - ty;
            // inverse of rotate+scale
            double sx = (ca * dx + sa * dy) / scale + cx;
            double sy = (-sa * dx + ca * dy) / scale + cy;
            if (flip) sx = (src.w - 1) - sx;
            int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            double fx = sx - x0, fy = sy - y0;
            for (int c = 0; c < 3; ++c) {
                double v = 0;
                for (int j = 0; j < 2; ++j)
                    for (int i = 0; i < 2; ++i) {
                        int yy = y0 + j, xx = x0 + i;
                        if (yy < 0 || yy >= src.h || xx < 0 || xx >= src.w) continue;
                        double wgt = (i ? fx : 1 - fx) * (j ? fy : 1 - fy);
                        v += wgt * src.at(yy, xx, c);
                    }
                out.at(y, x, c) = v;
            }
        }
    }
    return out;
}

// gain in linear light, clipped
ImageRGB apply_gain(const ImageRGB& img, double gain) {
    ImageRGB out(img.h, img.w, img.cs);
    for (size_t i = 0; i < img.px.size(); ++i)
        out.px[i] = srgb_encode(std::clamp(srgb_decode(img.px[i]) * gain, 0.0, 1.0));
    return out;
}

ImageRGB crop_image(const ImageRGB& img, int x0, int y0, int size) {
    if (x0 < 0 || y0 < 0 || x0 + size > img.w || y0 + size > img.h)
        throw DimensionError("crop outside background bounds");
    ImageRGB out(size, size, img.cs);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

}  // namespace

AugmentSpec sample_augment(Rng& rng, int bg_h, int bg_w, int crop) {
    AugmentSpec s;
    s.rotation_deg = rng.uniform(0.0, 360.0);
    s.scale = rng.uniform(0.8, 1.5);
    s.translate_x = rng.uniform(-crop / 8.0, crop / 8.0);
    s.translate_y = rng.uniform(-crop / 8.0, crop / 8.0);
    s.flip = rng.uniform() < 0.5;
    s.flare_gain = rng.uniform(0.8, 3.0);
    s.crop_x = (bg_w > crop) ? rng.uniform_int(bg_w - crop + 1) : 0;
    s.crop_y = (bg_h > crop) ? rng.uniform_int(bg_h - crop + 1) : 0;
    return s;
}

ImageRGB composite(const std::vector<ImageRGB>& parts) {
    if (parts.empty()) throw ParameterError("composite: empty part list");
    int h = parts[0].h, w = parts[0].w;
    for (const auto& p : parts)
        if (p.h != h || p.w != w) throw DimensionError("composite: shape mismatch");
    ImageRGB out(h, w);
    std::vector<double> lin(out.px.size(), 0.0);
    for (const auto& p : parts)
        for (size_t i = 0; i < lin.size(); ++i) lin[i] += srgb_decode(p.px[i]);
    for (size_t i = 0; i < lin.size(); ++i)
        out.px[i] = srgb_encode(std::clamp(lin[i], 0.0, 1.0));
    return out;
}

ImageRGB procedural_flare(FlareKind kind, const FlareParams& p, int h, int w, uint64_t seed) {
    if (p.intensity < 0.0 || p.intensity > 1.0) throw ParameterError("flare intensity out of [0,1]");
    if (p.num_rays < 1 || p.num_discs < 1) throw ParameterError("flare counts must be >= 1");
    if (p.radius <= 0.0 || p.radius > 1.0) throw ParameterError("flare radius out of (0,1]");
    if (p.center_x < 0 || p.center_x > 1 || p.center_y < 0 || p.center_y > 1)
        throw ParameterError("flare center out of [0,1]");
    ImageRGB out(h, w);
    if (p.intensity == 0.0) return out;
    Rng rng(seed);
    if (kind == FlareKind::scattering) {
        double cx = p.center_x * (w - 1), cy = p.center_y * (h - 1);
        double len = p.radius * std::min(h, w);
        int icx = static_cast<int>(std::lround(cx)), icy = static_cast<int>(std::lround(cy));
        std::vector<double> ray_angle(p.num_rays), ray_gain(p.num_rays);
        double phase = rng.uniform(0.0, 2.0 * kPi);
        for (int k = 0; k < p.num_rays; ++k) {
            ray_angle[k] = phase + 2.0 * kPi * k / p.num_rays + rng.uniform(-0.05, 0.05);
            ray_gain[k] = rng.uniform(0.6, 1.0);
        }
        double ang_sigma = 0.06;
        double halo_sigma = 0.45 * len;
        double tint[3] = {1.0, rng.uniform(0.85, 1.0), rng.uniform(0.7, 0.95)};
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double dx = x - cx, dy = y - cy;
                double r = std::sqrt(dx * dx + dy * dy);
                double v;
                if (x == icx && y == icy) {
                    v = 1.0;  // streak center carries the image maximum
                } else {
                    double theta = std::atan2(dy, dx);
                    double prof = 0;
                    for (int k = 0; k < p.num_rays; ++k) {
                        double d = std::remainder(theta - ray_angle[k], 2.0 * kPi);
                        prof = std::max(prof, ray_gain[k] * std::exp(-d * d / (2 * ang_sigma * ang_sigma)));
                    }
                    double core = std::exp(-r * r / (2.0 * 2.0));  // small bright core
                    double halo = 0.45 * std::exp(-r * r / (2.0 * halo_sigma * halo_sigma));
                    v = std::min(0.999,
                                 std::max({prof * std::exp(-r / len), core, halo}));
                }
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = p.intensity * v * tint[c];
            }
        }
    } else {
        // chain of small low-opacity discs along a line through the image center
        double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
        double ang = rng.uniform(0.0, kPi);
        double dirx = std::cos(ang), diry = std::sin(ang);
        double extent = p.radius * std::min(h, w) / 2.0;
        double disc_r = std::max(3.0, std::min(8.0, extent / (1.6 * p.num_discs)));
        double tint[3] = {rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0), 1.0};
        for (int j = 0; j < p.num_discs; ++j) {
            double t = (p.num_discs == 1) ? 0.0
                                          : -extent + 2.0 * extent * j / (p.num_discs - 1);
            double px = cx + t * dirx, py = cy + t * diry;
            double op = 0.5 * rng.uniform(0.75, 1.0);  // low opacity
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double d = std::hypot(x - px, y - py);
                    if (d > disc_r + 1.5) continue;
                    double fall = std::clamp(1.0 - (d - disc_r) / 1.5, 0.0, 1.0);
                    double v = p.intensity * op * fall;
                    for (int c = 0; c < 3; ++c)
                        out.at(y, x, c) = std::max(out.at(y, x, c), v * tint[c]);
                }
        }
    }
    out.clip();
    return out;
}

ImageRGB procedural_background(uint64_t seed, int h, int w) {
    Rng rng(seed);
    ImageRGB out(h, w);
    // smooth low-frequency base with correlated channels plus a few soft blobs
    double base[3], amp[3][3], fx[3], fy[3], ph[3];
    for (int c = 0; c < 3; ++c) base[c] = rng.uniform(0.25, 0.6);
    for (int k = 0; k < 3; ++k) {
        fx[k] = rng.uniform(0.5, 2.0) * kPi / w;
        fy[k] = rng.uniform(0.5, 2.0) * kPi / h;
        ph[k] = rng.uniform(0.0, 2 * kPi);
        for (int c = 0; c < 3; ++c) amp[k][c] = rng.uniform(-0.12, 0.12);
    }
    int nblobs = 2 + rng.uniform_int(3);
    std::vector<std::array<double, 6>> blobs;  // x, y, sigma, r, g, b
    for (int i = 0; i < nblobs; ++i)
        blobs.push_back({rng.uniform(0.0, w - 1.0), rng.uniform(0.0, h - 1.0),
                         rng.uniform(0.08, 0.25) * std::min(h, w), rng.uniform(-0.2, 0.25),
                         rng.uniform(-0.2, 0.25), rng.uniform(-0.2, 0.25)});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = base[c];
                for (int k = 0; k < 3; ++k)
                    v += amp[k][c] * std::sin(fx[k] * x + fy[k] * y + ph[k]);
                for (auto& bl : blobs) {
                    double d2 = (x - bl[0]) * (x - bl[0]) + (y - bl[1]) * (y - bl[1]);
                    v += bl[3 + c] * std::exp(-d2 / (2 * bl[2] * bl[2]));
                }
                out.at(y, x, c) = std::clamp(v, 0.02, 0.9);
            }
    return out;
}

ImageRGB procedural_light(double cx, double cy, int h, int w, uint64_t seed) {
    Rng rng(seed);
    ImageRGB out(h, w);
    double peak = rng.uniform(0.9, 1.0);  // near-saturated so the LGP threshold bites
    double sigma = rng.uniform(2.0, 4.5);
    // snap to the pixel grid so one pixel carries the exact peak value
    double px = std::round(cx * (w - 1)), py = std::round(cy * (h - 1));
    double warm = rng.uniform(0.85, 1.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double d2 = (x - px) * (x - px) + (y - py) * (y - py);
            double v = peak * std::exp(-d2 / (2 * sigma * sigma));
            out.at(y, x, 0) = v;
            out.at(y, x, 1) = v * warm;
            out.at(y, x, 2) = v * warm * 0.95;
        }
    return out;
}

FlareSample make_sample(const ImageRGB& background, const FlareAssets& assets, uint64_t seed,
                        int crop) {
    if (background.h < crop || background.w < crop)
        throw DimensionError("background smaller than crop size");
    if (assets.has_flares &&
        (assets.scattering.h == 0 || assets.reflective.h == 0 || assets.light.h == 0))
        throw AssetError("make_sample: missing flare asset");

    Rng rng(seed);
    AugmentSpec aug = sample_augment(rng, background.h, background.w, crop);

    FlareSample s;
    s.seed = seed;
    s.background = crop_image(background, aug.crop_x, aug.crop_y, crop);

    if (assets.has_flares) {
        // scattering flare and its light source move together
        s.scattering = warp(assets.scattering, aug.rotation_deg, aug.scale, aug.translate_x,
                            aug.translate_y, aug.flip);
        s.light_source = warp(assets.light, aug.rotation_deg, aug.scale, aug.translate_x,
                              aug.translate_y, aug.flip);
        s.reflective = warp(assets.reflective, aug.rotation_deg, aug.scale, 0.0, 0.0, aug.flip);
        s.scattering = apply_gain(s.scattering, aug.flare_gain);
        s.reflective = apply_gain(s.reflective, aug.flare_gain);
    } else {
        s.scattering = ImageRGB(crop, crop);
        s.reflective = ImageRGB(crop, crop);
        s.light_source = ImageRGB(crop, crop);
    }
    if (s.scattering.h != crop || s.scattering.w != crop)
        throw DimensionError("flare asset size must match crop size");

    s.gt = composite({s.background, s.light_source});
    s.input = composite({s.background, s.light_source, s.reflective, s.scattering});
    return s;
}

DatasetStream::DatasetStream(const CorpusConfig& cfg, Split split) : cfg_(cfg), split_(split) {
    if (cfg.crop < 8) throw ConfigError("corpus.crop must be >= 8");
    int n_bg = split == Split::train ? cfg.train_backgrounds : cfg.test_backgrounds;
    if (cfg.kind == "folder") {
        fs::path root = fs::path(cfg.folder) / "backgrounds";
        if (!fs::exists(root)) throw CorpusError("corpus folder not found: " + root.string());
        for (auto& e : fs::directory_iterator(root))
            if (e.path().extension() == ".png") folder_backgrounds_.push_back(e.path().string());
        std::sort(folder_backgrounds_.begin(), folder_backgrounds_.end());
        if (static_cast<int>(folder_backgrounds_.size()) < cfg.train_backgrounds + cfg.test_backgrounds)
            throw CorpusError("corpus folder has too few backgrounds");
    } else if (cfg.kind != "procedural") {
        throw ConfigError("corpus.kind must be 'procedural' or 'folder'");
    }
    if (n_bg <= 0) throw CorpusError("empty corpus: no backgrounds for split");
    count_ = n_bg * cfg.samples_per_background;
}

ImageRGB DatasetStream::background_for(int bg_id) const {
    if (cfg_.kind == "folder") return read_png(folder_backgrounds_[bg_id]);
    // generated a margin larger than the crop so random crops have room
    int sz = cfg_.crop + cfg_.crop / 2;
    return procedural_background(Rng::key(cfg_.seed, "background", bg_id), sz, sz);
}

FlareAssets DatasetStream::assets_for(uint64_t sample_seed, int h, int w) const {
    FlareAssets a;
    Rng rng(sample_seed);
    if (cfg_.noflare_prob > 0.0 && rng.uniform() < cfg_.noflare_prob) {
        a.has_flares = false;
        return a;
    }
    double cx = rng.uniform(0.2, 0.8), cy = rng.uniform(0.2, 0.8);
    FlareParams sp;
    sp.intensity = rng.uniform(0.6, 1.0);
    sp.num_rays = 8 + rng.uniform_int(9);
    sp.radius = rng.uniform(0.3, 0.6);
    sp.center_x = cx;
    sp.center_y = cy;
    FlareParams rp;
    rp.intensity = rng.uniform(0.5, 1.0);
    rp.num_discs = 2 + rng.uniform_int(3);
    rp.radius = rng.uniform(0.5, 0.9);
    a.scattering_id = static_cast<int>(rng.next_u64() % 1000000);
    a.reflective_id = static_cast<int>(rng.next_u64() % 1000000);
    a.light_id = static_cast<int>(rng.next_u64() % 1000000);
    a.scattering = procedural_flare(FlareKind::scattering, sp, h, w,
                                    Rng::key(cfg_.seed, "flare.scattering", a.scattering_id));
    a.reflective = procedural_flare(FlareKind::reflective, rp, h, w,
                                    Rng::key(cfg_.seed, "flare.reflective", a.reflective_id));
    a.light = procedural_light(cx, cy, h, w, Rng::key(cfg_.seed, "light", a.light_id));
    return a;
}

FlareSample DatasetStream::sample(int index) const {
    if (index < 0 || index >= count_) throw ParameterError("dataset index out of range");
    const char* split_name = split_ == Split::train ? "train" : "test";
    int local_bg = index / cfg_.samples_per_background;
    int bg_id = (split_ == Split::train ? 0 : cfg_.train_backgrounds) + local_bg;
    uint64_t sample_seed = Rng::key(cfg_.seed, std::string("sample.") + split_name, index);
    ImageRGB bg = background_for(bg_id);
    FlareAssets assets = assets_for(sample_seed, cfg_.crop, cfg_.crop);
    FlareSample s = make_sample(bg, assets, sample_seed, cfg_.crop);
    s.background_id = bg_id;
    return s;
}

std::string DatasetStream::manifest_line(int index) const {
    const char* split_name = split_ == Split::train ? "train" : "test";
    int local_bg = index / cfg_.samples_per_background;
    int bg_id = (split_ == Split::train ? 0 : cfg_.train_backgrounds) + local_bg;
    uint64_t sample_seed = Rng::key(cfg_.seed, std::string("sample.") + split_name, index);
    FlareAssets a = assets_for(sample_seed, cfg_.crop, cfg_.crop);
    return std::string("{\"split\":\"") + split_name + "\",\"index\":" + std::to_string(index) +
           ",\"background_id\":" + std::to_string(bg_id) +
           ",\"seed\":" + std::to_string(sample_seed) +
           ",\"scattering_id\":" + std::to_string(a.scattering_id) +
           ",\"reflective_id\":" + std::to_string(a.reflective_id) +
           ",\"light_id\":" + std::to_string(a.light_id) + "}";
}

void write_corpus(const CorpusConfig& cfg, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "backgrounds");
    fs::create_directories(fs::path(dir) / "flares" / "scattering");
    fs::create_directories(fs::path(dir) / "flares" / "reflective");
    fs::create_directories(fs::path(dir) / "light");
    int total = cfg.train_backgrounds + cfg.test_backgrounds;
    int sz = cfg.crop + cfg.crop / 2;
    char name[64];
    for (int i = 0; i < total; ++i) {
        std::snprintf(name, sizeof(name), "bg_%04d.png", i);
        write_png((fs::path(dir) / "backgrounds" / name).string(),
                  procedural_background(Rng::key(cfg.seed, "background", i), sz, sz));
    }
    // a small shared pool of flare/light assets for inspection
    for (int i = 0; i < 8; ++i) {
        FlareParams sp;
        sp.center_x = 0.5;
        sp.center_y = 0.5;
        std::snprintf(name, sizeof(name), "scatter_%02d.png", i);
        write_png((fs::path(dir) / "flares" / "scattering" / name).string(),
                  procedural_flare(FlareKind::scattering, sp, cfg.crop, cfg.crop,
                                   Rng::key(cfg.seed, "flare.scattering", i)));
        FlareParams rp;
        std::snprintf(name, sizeof(name), "reflect_%02d.png", i);
        write_png((fs::path(dir) / "flares" / "reflective" / name).string(),
                  procedural_flare(FlareKind::reflective, rp, cfg.crop, cfg.crop,
                                   Rng::key(cfg.seed, "flare.reflective", i)));
        std::snprintf(name, sizeof(name), "light_%02d.png", i);
        write_png((fs::path(dir) / "light" / name).string(),
                  procedural_light(0.5, 0.5, cfg.crop, cfg.crop, Rng::key(cfg.seed, "light", i)));
    }
    // per-sample manifest enabling exact regeneration
    std::ofstream mf(fs::path(dir) / "manifest.jsonl");
    for (auto split : {Split::train, Split::test}) {
        DatasetStream ds(cfg, split);
        for (int i = 0; i < ds.size(); ++i) mf << ds.manifest_line(i) << "\n";
    }
}

}  // namespace difflare
