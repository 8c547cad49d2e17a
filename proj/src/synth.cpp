#include "flowmatte/synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

#include "flowmatte/image_io.hpp"

namespace flowmatte {

namespace fs = std::filesystem;

std::pair<double, double> MotionSpec::offset(double t) const {
    if (kind == Kind::Linear) return {vx * t, vy * t};
    return {amp_x * std::sin(2.0 * M_PI * freq_x * t + phase_x),
            amp_y * std::sin(2.0 * M_PI * freq_y * t + phase_y)};
}

namespace {

struct Vec2 {
    double x = 0, y = 0;
};

double dist_point_segment(double px, double py, Vec2 a, Vec2 b) {
    double dx = b.x - a.x, dy = b.y - a.y;
    double len2 = dx * dx + dy * dy;
    double u = len2 > 0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    double cx = a.x + u * dx, cy = a.y + u * dy;
    return std::hypot(px - cx, py - cy);
}

double soft_cov(double signed_dist, double softness) {
    // signed_dist < 0 inside; transition of width `softness` about the edge
    return std::clamp(0.5 - signed_dist / softness, 0.0, 1.0);
}

constexpr int kStrandSegments = 10;

// One strand, baked per frame: quadratic Bezier (mid control point swayed
// by the frame time) flattened to a polyline, plus its bounding box.
struct BakedStrand {
    Vec2 pts[kStrandSegments + 1];
    double width;
    double bx0, by0, bx1, by1;
};

struct ElementGeom {
    const ElementSpec* spec = nullptr;
    Vec2 center;  // motion applied
    Vec2 cap_a, cap_b;
    std::vector<BakedStrand> strands;
    double bbox_x0 = 0, bbox_y0 = 0, bbox_x1 = 0, bbox_y1 = 0;
};

double element_coverage(const ElementGeom& g, double px, double py) {
    const ElementSpec& e = *g.spec;
    switch (e.shape) {
        case ElementSpec::Shape::Disk: {
            double d = std::hypot(px - g.center.x, py - g.center.y) - e.size;
            return soft_cov(d, e.edge_softness);
        }
        case ElementSpec::Shape::Capsule: {
            double d = dist_point_segment(px, py, g.cap_a, g.cap_b) - e.radius;
            return soft_cov(d, e.edge_softness);
        }
        case ElementSpec::Shape::StrandBundle: {
            double keep = 1.0;
            for (const auto& s : g.strands) {
                if (px < s.bx0 || px > s.bx1 || py < s.by0 || py > s.by1) continue;
                double dmin = 1e30;
                for (int i = 0; i < kStrandSegments; ++i)
                    dmin = std::min(dmin, dist_point_segment(px, py, s.pts[i], s.pts[i + 1]));
                double cov = soft_cov(dmin - 0.5 * s.width, e.edge_softness);
                keep *= 1.0 - cov;
            }
            return 1.0 - keep;
        }
    }
    return 0.0;
}

ElementGeom element_geometry(const ElementSpec& e, double tt) {
    ElementGeom g;
    g.spec = &e;
    auto [ox, oy] = e.motion.offset(tt);
    g.center = {e.cx + ox, e.cy + oy};

    double margin = e.edge_softness + 1.0;
    if (e.shape == ElementSpec::Shape::Disk) {
        g.bbox_x0 = g.center.x - e.size - margin;
        g.bbox_x1 = g.center.x + e.size + margin;
        g.bbox_y0 = g.center.y - e.size - margin;
        g.bbox_y1 = g.center.y + e.size + margin;
    } else if (e.shape == ElementSpec::Shape::Capsule) {
        double dx = std::cos(e.angle) * e.size, dy = std::sin(e.angle) * e.size;
        g.cap_a = {g.center.x - dx, g.center.y - dy};
        g.cap_b = {g.center.x + dx, g.center.y + dy};
        double r = e.radius + margin;
        g.bbox_x0 = std::min(g.cap_a.x, g.cap_b.x) - r;
        g.bbox_x1 = std::max(g.cap_a.x, g.cap_b.x) + r;
        g.bbox_y0 = std::min(g.cap_a.y, g.cap_b.y) - r;
        g.bbox_y1 = std::max(g.cap_a.y, g.cap_b.y) + r;
    } else {
        // strands grow from the center along the base angle with jitter;
        // the mid control point sways with the frame time
        Rng jitter(Rng::derive(e.seed, 0xdead));
        g.bbox_x0 = g.bbox_y0 = 1e30;
        g.bbox_x1 = g.bbox_y1 = -1e30;
        for (int s = 0; s < e.strand_count; ++s) {
            double ang = e.angle + jitter.uniform(-0.6, 0.6);
            double len = e.size * jitter.uniform(0.7, 1.15);
            double bulge = jitter.uniform(-0.35, 0.35) * len;
            Vec2 p0 = g.center;
            Vec2 p2{g.center.x + std::cos(ang) * len, g.center.y + std::sin(ang) * len};
            double mx = 0.5 * (p0.x + p2.x), my = 0.5 * (p0.y + p2.y);
            Vec2 p1{mx - std::sin(ang) * bulge, my + std::cos(ang) * bulge};
            double width = std::max(0.5, e.strand_width * jitter.uniform(0.8, 1.25));
            double sway_phase = jitter.uniform(0.0, 2.0 * M_PI);
            double sway = e.sway_amp * std::sin(2.0 * M_PI * e.sway_freq * tt + sway_phase);

            BakedStrand st;
            st.width = width;
            st.bx0 = st.by0 = 1e30;
            st.bx1 = st.by1 = -1e30;
            for (int i = 0; i <= kStrandSegments; ++i) {
                double u = double(i) / kStrandSegments;
                double omu = 1.0 - u;
                st.pts[i] = {omu * omu * p0.x + 2 * omu * u * (p1.x + sway) + u * u * p2.x,
                             omu * omu * p0.y + 2 * omu * u * p1.y + u * u * p2.y};
                st.bx0 = std::min(st.bx0, st.pts[i].x);
                st.bx1 = std::max(st.bx1, st.pts[i].x);
                st.by0 = std::min(st.by0, st.pts[i].y);
                st.by1 = std::max(st.by1, st.pts[i].y);
            }
            double pad = 0.5 * width + margin;
            st.bx0 -= pad;
            st.bx1 += pad;
            st.by0 -= pad;
            st.by1 += pad;
            g.strands.push_back(st);
            g.bbox_x0 = std::min(g.bbox_x0, st.bx0);
            g.bbox_x1 = std::max(g.bbox_x1, st.bx1);
            g.bbox_y0 = std::min(g.bbox_y0, st.by0);
            g.bbox_y1 = std::max(g.bbox_y1, st.by1);
        }
    }
    return g;
}

}  // namespace

std::pair<VideoClip, AlphaSequence> render_scene(const SceneSpec& spec, int supersample) {
    if (spec.frames < 1 || spec.height < 1 || spec.width < 1)
        throw ConfigError("render_scene: degenerate scene dimensions");
    for (const auto& e : spec.elements) {
        if (e.edge_softness <= 0)
            throw ConfigError("render_scene: edge_softness must be > 0");
        if (e.size <= 0) throw ConfigError("render_scene: zero-size element");
    }
    const int T = spec.frames, H = spec.height, W = spec.width, S = supersample;
    Tensor4d alpha(T, 1, H, W);
    Tensor4d fg(T, 3, H, W);

    for (int t = 0; t < T; ++t) {
        std::vector<ElementGeom> geoms;
        geoms.reserve(spec.elements.size());
        for (const auto& e : spec.elements) geoms.push_back(element_geometry(e, double(t)));

        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                bool any = false;
                for (const auto& g : geoms)
                    if (x + 1.0 > g.bbox_x0 && double(x) < g.bbox_x1 && y + 1.0 > g.bbox_y0 &&
                        double(y) < g.bbox_y1) {
                        any = true;
                        break;
                    }
                double cov_px = 0.0;
                double wsum = 0.0, cr = 0.0, cg = 0.0, cb = 0.0;
                if (any) {
                    for (int sy = 0; sy < S; ++sy)
                        for (int sx = 0; sx < S; ++sx) {
                            double px = x + (sx + 0.5) / S;
                            double py = y + (sy + 0.5) / S;
                            double keep = 1.0;
                            for (const auto& g : geoms) {
                                double c = element_coverage(g, px, py);
                                keep *= 1.0 - c;
                            }
                            cov_px += 1.0 - keep;
                        }
                    cov_px /= double(S) * S;
                    for (const auto& g : geoms) {
                        double c = element_coverage(g, x + 0.5, y + 0.5);
                        wsum += c;
                        cr += c * g.spec->color[0];
                        cg += c * g.spec->color[1];
                        cb += c * g.spec->color[2];
                    }
                }
                alpha(t, 0, y, x) = cov_px;
                double shade = 0.9 + 0.1 * double(y) / H;
                if (wsum > 1e-12) {
                    fg(t, 0, y, x) = std::clamp(cr / wsum * shade, 0.0, 1.0);
                    fg(t, 1, y, x) = std::clamp(cg / wsum * shade, 0.0, 1.0);
                    fg(t, 2, y, x) = std::clamp(cb / wsum * shade, 0.0, 1.0);
                } else {
                    fg(t, 0, y, x) = 0.5 * shade;
                    fg(t, 1, y, x) = 0.5 * shade;
                    fg(t, 2, y, x) = 0.5 * shade;
                }
            }
    }
    return {VideoClip(std::move(fg)), AlphaSequence(std::move(alpha))};
}

VideoClip render_background(const BackgroundSpec& bg, int T, int H, int W) {
    Tensor4d frames(T, 3, H, W);
    switch (bg.mode) {
        case BackgroundSpec::Mode::Gradient: {
            Rng rng(Rng::derive(bg.seed, 0xb0));
            double c00[3], c11[3];
            for (int c = 0; c < 3; ++c) {
                c00[c] = rng.uniform(0.05, 0.95);
                c11[c] = rng.uniform(0.05, 0.95);
            }
            for (int t = 0; t < T; ++t) {
                double ox = bg.drift_vx * t, oy = bg.drift_vy * t;
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        double u = std::fmod((x + ox) / W + (y + oy) / H, 2.0);
                        if (u < 0) u += 2.0;
                        double w = u <= 1.0 ? u : 2.0 - u;  // triangle wave
                        for (int c = 0; c < 3; ++c)
                            frames(t, c, y, x) = (1.0 - w) * c00[c] + w * c11[c];
                    }
            }
            break;
        }
        case BackgroundSpec::Mode::BandNoise: {
            Rng rng(Rng::derive(bg.seed, 0xb1));
            const int K = 5;
            double fx[3][K], fy[3][K], ph[3][K], amp[3][K], base[3];
            for (int c = 0; c < 3; ++c) {
                base[c] = rng.uniform(0.3, 0.7);
                for (int k = 0; k < K; ++k) {
                    fx[c][k] = rng.uniform(-3.0, 3.0) * 2.0 * M_PI / W;
                    fy[c][k] = rng.uniform(-3.0, 3.0) * 2.0 * M_PI / H;
                    ph[c][k] = rng.uniform(0.0, 2.0 * M_PI);
                    amp[c][k] = rng.uniform(0.02, 0.09);
                }
            }
            for (int t = 0; t < T; ++t) {
                double ox = bg.drift_vx * t, oy = bg.drift_vy * t;
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        for (int c = 0; c < 3; ++c) {
                            double v = base[c];
                            for (int k = 0; k < K; ++k)
                                v += amp[c][k] *
                                     std::sin(fx[c][k] * (x + ox) + fy[c][k] * (y + oy) +
                                              ph[c][k]);
                            frames(t, c, y, x) = std::clamp(v, 0.0, 1.0);
                        }
            }
            break;
        }
        case BackgroundSpec::Mode::ImageSequence: {
            if (bg.image_dir.empty())
                throw ConfigError("background image-sequence mode needs image_dir");
            VideoClip src = read_clip_rgb(bg.image_dir);
            for (int t = 0; t < T; ++t) {
                int ts = t % src.t();
                double ox = bg.drift_vx * t, oy = bg.drift_vy * t;
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        int sy = int(std::floor(y + oy)) % src.height();
                        int sx = int(std::floor(x + ox)) % src.width();
                        if (sy < 0) sy += src.height();
                        if (sx < 0) sx += src.width();
                        for (int c = 0; c < 3; ++c)
                            frames(t, c, y, x) = src.frames(ts, c, sy, sx);
                    }
            }
            break;
        }
    }
    return VideoClip(std::move(frames));
}

SceneSpec random_scene(Rng& rng, const std::string& family, int frames, int height, int width) {
    SceneSpec spec;
    spec.frames = frames;
    spec.height = height;
    spec.width = width;
    spec.seed = rng.next_u64();

    auto rand_motion = [&](double scale) {
        MotionSpec m;
        if (rng.uniform() < 0.5) {
            m.kind = MotionSpec::Kind::Linear;
            m.vx = rng.uniform(-scale, scale);
            m.vy = rng.uniform(-scale, scale);
        } else {
            m.kind = MotionSpec::Kind::Sinusoidal;
            m.amp_x = rng.uniform(0.0, 3.0 * scale);
            m.amp_y = rng.uniform(0.0, 3.0 * scale);
            m.freq_x = rng.uniform(0.05, 0.25);
            m.freq_y = rng.uniform(0.05, 0.25);
            m.phase_x = rng.uniform(0.0, 2.0 * M_PI);
            m.phase_y = rng.uniform(0.0, 2.0 * M_PI);
        }
        return m;
    };
    auto rand_color = [&](ElementSpec& e) {
        for (int c = 0; c < 3; ++c) e.color[c] = rng.uniform(0.15, 0.9);
    };
    auto rand_center = [&](ElementSpec& e, double reach) {
        double rx = std::min(reach, width / 2.0 - 1);
        double ry = std::min(reach, height / 2.0 - 1);
        e.cx = rng.uniform(rx, width - rx);
        e.cy = rng.uniform(ry, height - ry);
    };

    double s = std::min(height, width) / 64.0;

    if (family == "bodies") {
        ElementSpec torso;
        torso.shape = ElementSpec::Shape::Capsule;
        torso.size = rng.uniform(10, 16) * s;
        torso.radius = rng.uniform(5, 9) * s;
        torso.angle = rng.uniform(1.2, 1.9);  // roughly vertical
        torso.edge_softness = rng.uniform(0.6, 1.2);
        torso.motion = rand_motion(0.8);
        rand_color(torso);
        rand_center(torso, torso.size + torso.radius + 4);
        torso.seed = rng.next_u64();
        spec.elements.push_back(torso);

        ElementSpec head;
        head.shape = ElementSpec::Shape::Disk;
        head.size = rng.uniform(4, 7) * s;
        head.edge_softness = rng.uniform(0.6, 1.2);
        head.cx = torso.cx + rng.uniform(-3, 3);
        head.cy = std::max(head.size + 2.0,
                           torso.cy - torso.size - head.size * rng.uniform(0.3, 0.8));
        head.motion = torso.motion;
        rand_color(head);
        head.seed = rng.next_u64();
        spec.elements.push_back(head);

        if (rng.uniform() < 0.6) {
            ElementSpec limb;
            limb.shape = ElementSpec::Shape::Capsule;
            limb.size = rng.uniform(7, 12) * s;
            limb.radius = rng.uniform(2, 4) * s;
            limb.angle = rng.uniform(0.0, 2.0 * M_PI);
            limb.edge_softness = rng.uniform(0.6, 1.2);
            limb.cx = torso.cx + rng.uniform(-6, 6);
            limb.cy = torso.cy + rng.uniform(-4, 8);
            limb.motion = rand_motion(1.0);
            rand_color(limb);
            limb.seed = rng.next_u64();
            spec.elements.push_back(limb);
        }
    } else if (family == "mixed" || family == "mixed_soft") {
        bool soft = family == "mixed_soft";
        int n = rng.uniform_int(2, 4);
        for (int i = 0; i < n; ++i) {
            ElementSpec e;
            double pick = rng.uniform();
            if (soft && pick > 0.75) {
                e.shape = ElementSpec::Shape::StrandBundle;
                e.size = rng.uniform(10, 18) * s;
                e.strand_count = rng.uniform_int(6, 12);
                e.strand_width = rng.uniform(1.0, 1.6);
                e.angle = rng.uniform(0.0, 2.0 * M_PI);
                e.sway_amp = rng.uniform(0.5, 2.0);
                e.sway_freq = rng.uniform(0.1, 0.4);
                e.edge_softness = rng.uniform(0.8, 1.4);
            } else if (pick > 0.5) {
                e.shape = ElementSpec::Shape::Capsule;
                e.size = rng.uniform(6, 13) * s;
                e.radius = rng.uniform(2.5, 6) * s;
                e.angle = rng.uniform(0.0, 2.0 * M_PI);
                e.edge_softness = soft ? rng.uniform(1.2, 3.0) : rng.uniform(0.6, 1.2);
            } else {
                e.shape = ElementSpec::Shape::Disk;
                e.size = rng.uniform(5, 12) * s;
                e.edge_softness = soft ? rng.uniform(1.2, 3.0) : rng.uniform(0.6, 1.2);
            }
            e.motion = rand_motion(1.0);
            rand_color(e);
            rand_center(e, e.size + 5);
            e.seed = rng.next_u64();
            spec.elements.push_back(e);
        }
    } else if (family == "strands") {
        ElementSpec body;
        body.shape = rng.uniform() < 0.5 ? ElementSpec::Shape::Disk
                                         : ElementSpec::Shape::Capsule;
        body.size = rng.uniform(8, 13) * s;
        body.radius = rng.uniform(4, 7) * s;
        body.angle = rng.uniform(0.0, 2.0 * M_PI);
        body.edge_softness = rng.uniform(1.0, 2.0);
        body.motion = rand_motion(0.7);
        rand_color(body);
        rand_center(body, body.size + 8);
        body.seed = rng.next_u64();
        spec.elements.push_back(body);

        int bundles = rng.uniform_int(2, 3);
        for (int i = 0; i < bundles; ++i) {
            ElementSpec hair;
            hair.shape = ElementSpec::Shape::StrandBundle;
            hair.size = rng.uniform(10, 20) * s;
            hair.strand_count = rng.uniform_int(10, 18);
            hair.strand_width = rng.uniform(1.0, 1.5);
            hair.angle = rng.uniform(0.0, 2.0 * M_PI);
            hair.sway_amp = rng.uniform(1.0, 2.5);
            hair.sway_freq = rng.uniform(0.15, 0.4);
            hair.edge_softness = rng.uniform(0.8, 1.3);
            hair.cx = body.cx + rng.uniform(-body.size, body.size);
            hair.cy = body.cy + rng.uniform(-body.size, body.size);
            hair.cx = std::clamp(hair.cx, 4.0, width - 4.0);
            hair.cy = std::clamp(hair.cy, 4.0, height - 4.0);
            hair.motion = body.motion;
            rand_color(hair);
            hair.seed = rng.next_u64();
            spec.elements.push_back(hair);
        }
    } else {
        throw ConfigError(strf("unknown scene family '%s'", family.c_str()));
    }

    spec.background.mode = rng.uniform() < 0.5 ? BackgroundSpec::Mode::Gradient
                                               : BackgroundSpec::Mode::BandNoise;
    spec.background.drift_vx = rng.uniform(-0.8, 0.8);
    spec.background.drift_vy = rng.uniform(-0.8, 0.8);
    spec.background.seed = rng.next_u64();
    return spec;
}

const char* to_string(DatasetKind kind) {
    return kind == DatasetKind::Matte ? "matte" : "segmentation";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
    if (s == "matte") return DatasetKind::Matte;
    if (s == "segmentation") return DatasetKind::Segmentation;
    throw ConfigError(strf("unknown dataset kind '%s'", s.c_str()));
}

void save_manifest(const DatasetManifest& manifest, const fs::path& dir) {
    nlohmann::ordered_json j;
    j["format_version"] = manifest.format_version;
    j["name"] = manifest.name;
    j["kind"] = to_string(manifest.kind);
    j["seed"] = manifest.seed;
    j["clips"] = nlohmann::ordered_json::array();
    for (const auto& c : manifest.clips)
        j["clips"].push_back({{"path", c.path},
                              {"frames", c.frames},
                              {"height", c.height},
                              {"width", c.width}});
    fs::create_directories(dir);
    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError(strf("cannot write %s", (dir / "manifest.json").string().c_str()));
    os << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const fs::path& path) {
    fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
    std::ifstream is(file);
    if (!is) throw IoError(strf("cannot read manifest %s", file.string().c_str()));
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ConfigError(strf("bad manifest %s: %s", file.string().c_str(), e.what()));
    }
    DatasetManifest m;
    m.format_version = j.value("format_version", 1);
    m.name = j.value("name", "");
    m.kind = dataset_kind_from_string(j.value("kind", "matte"));
    m.seed = j.value("seed", std::uint64_t(0));
    for (const auto& c : j["clips"]) {
        ManifestClip clip;
        clip.path = c.at("path").get<std::string>();
        clip.frames = c.at("frames").get<int>();
        clip.height = c.at("height").get<int>();
        clip.width = c.at("width").get<int>();
        m.clips.push_back(std::move(clip));
    }
    m.root = file.parent_path();
    return m;
}

void validate_manifest(const DatasetManifest& manifest) {
    for (const auto& clip : manifest.clips) {
        fs::path dir = manifest.root / clip.path;
        int n = clip_frame_count(dir);
        if (n != clip.frames)
            throw IoError(strf("clip %s: rgb frames %d != manifest %d", clip.path.c_str(), n,
                               clip.frames));
        if (!fs::exists(dir / "alpha" / "00000.png"))
            throw IoError(strf("clip %s: missing alpha labels", clip.path.c_str()));
        if (manifest.kind == DatasetKind::Segmentation) {
            AlphaSequence labels = read_clip_alpha(dir);
            for (std::int64_t i = 0; i < labels.alphas.size(); ++i) {
                double v = labels.alphas.data[i];
                if (v != 0.0 && v != 1.0)
                    throw IoError(strf("clip %s: non-binary segmentation label %g",
                                       clip.path.c_str(), v));
            }
        }
    }
}

DatasetManifest compose_dataset(const std::vector<SceneSpec>& specs,
                                const std::vector<BackgroundSpec>& backgrounds, DatasetKind kind,
                                const std::string& name, const fs::path& out_dir,
                                std::uint64_t seed) {
    if (specs.empty()) throw ConfigError("compose_dataset: no scenes");
    DatasetManifest manifest;
    manifest.name = name;
    manifest.kind = kind;
    manifest.seed = seed;
    manifest.root = out_dir;

    for (std::size_t i = 0; i < specs.size(); ++i) {
        std::string clip_id = strf("clip_%05d", int(i));
        try {
            auto [fg, alpha] = render_scene(specs[i]);
            const BackgroundSpec& bspec =
                backgrounds.empty() ? specs[i].background : backgrounds[i % backgrounds.size()];
            VideoClip bg = render_background(bspec, fg.t(), fg.height(), fg.width());
            if (kind == DatasetKind::Segmentation) alpha = binarize_alpha(alpha, 0.5);
            VideoClip comp = composite(fg, bg, alpha);
            write_clip(out_dir / clip_id, comp, alpha);
            manifest.clips.push_back({clip_id, comp.t(), comp.height(), comp.width()});
        } catch (const Error& e) {
            throw IoError(strf("clip %s: %s", clip_id.c_str(), e.what()));
        }
    }
    save_manifest(manifest, out_dir);
    return manifest;
}

MixtureSampler::MixtureSampler(MixtureConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.entries.empty()) throw ConfigError("mixture: no entries");
    double sum = 0;
    for (const auto& e : cfg_.entries) {
        if (!e.manifest) throw ConfigError("mixture: null manifest");
        if (e.manifest->clips.empty())
            throw ConfigError(strf("mixture: dataset '%s' is empty", e.manifest->name.c_str()));
        if (e.ratio <= 0) throw ConfigError("mixture: ratios must be positive");
        sum += e.ratio;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError(strf("mixture: ratios sum to %.12f, expected 1", sum));
    double acc = 0;
    for (const auto& e : cfg_.entries) {
        acc += e.ratio;
        cdf_.push_back(acc);
    }
    cdf_.back() = 1.0;
}

MixtureDraw MixtureSampler::next(Rng& rng) const {
    double u = rng.uniform();
    int idx = int(std::lower_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
    if (idx >= int(cfg_.entries.size())) idx = int(cfg_.entries.size()) - 1;
    const MixtureEntry& e = cfg_.entries[idx];
    MixtureDraw draw;
    draw.manifest = e.manifest;
    draw.entry_index = idx;
    draw.clip_index = rng.uniform_int(0, int(e.manifest->clips.size()) - 1);
    draw.pixel_loss_enabled = e.pixel_loss_enabled;
    return draw;
}

int sample_sequence_length(Rng& rng, int min_len, int max_len) {
    if (min_len > max_len)
        throw ParamError(strf("sample_sequence_length: min %d > max %d", min_len, max_len));
    return rng.uniform_int(min_len, max_len);
}

CropParams sample_crop_params(Rng& rng, int T, int H, int W, int target_h, int target_w,
                              int length) {
    if (target_h > H || target_w > W)
        throw ShapeError(strf("crop: target %dx%d exceeds source %dx%d", target_h, target_w, H,
                              W));
    CropParams p;
    // random zoom between the native target size and the largest crop that fits
    double max_scale = std::min(double(H) / target_h, double(W) / target_w);
    double scale = rng.uniform(1.0, max_scale);
    p.crop_h = std::min(H, int(std::round(target_h * scale)));
    p.crop_w = std::min(W, int(std::round(target_w * scale)));
    p.y0 = rng.uniform_int(0, H - p.crop_h);
    p.x0 = rng.uniform_int(0, W - p.crop_w);
    if (T >= length) {
        p.t_start = rng.uniform_int(0, T - length);
    } else {
        p.t_start = 0;
        p.wrapped = true;
    }
    return p;
}

namespace {

// Bilinear sample with pixel-center alignment; exact copy when sizes match.
void resize_bilinear(const Tensor4d& src, int t_src, int y0, int x0, int crop_h, int crop_w,
                     Tensor4d& dst, int t_dst) {
    const int th = dst.h, tw = dst.w;
    for (int c = 0; c < src.c; ++c)
        for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x) {
                double sy = (y + 0.5) * crop_h / th - 0.5;
                double sx = (x + 0.5) * crop_w / tw - 0.5;
                int iy = int(std::floor(sy)), ix = int(std::floor(sx));
                double fy = sy - iy, fx = sx - ix;
                auto at = [&](int yy, int xx) {
                    yy = std::clamp(yy, 0, crop_h - 1);
                    xx = std::clamp(xx, 0, crop_w - 1);
                    return src(t_src, c, y0 + yy, x0 + xx);
                };
                double v = (1 - fy) * ((1 - fx) * at(iy, ix) + fx * at(iy, ix + 1)) +
                           fy * ((1 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
                dst(t_dst, c, y, x) = v;
            }
}

}  // namespace

TrainingSample apply_crop(const VideoClip& rgb, const AlphaSequence& alpha, const CropParams& p,
                          int target_h, int target_w, int length) {
    if (rgb.t() != alpha.t() || rgb.height() != alpha.height() || rgb.width() != alpha.width())
        throw ShapeError("apply_crop: rgb/alpha mismatch");
    if (p.wrapped)
        std::cerr << "crop: clip shorter than requested length, wrap-padding frames\n";
    TrainingSample out;
    out.rgb.frames = Tensor4d(length, 3, target_h, target_w);
    out.alpha.alphas = Tensor4d(length, 1, target_h, target_w);
    const int T = rgb.t();
    for (int i = 0; i < length; ++i) {
        int ts = (p.t_start + i) % T;
        resize_bilinear(rgb.frames, ts, p.y0, p.x0, p.crop_h, p.crop_w, out.rgb.frames, i);
        resize_bilinear(alpha.alphas, ts, p.y0, p.x0, p.crop_h, p.crop_w, out.alpha.alphas, i);
    }
    return out;
}

TrainingSample crop_resize_batch(const VideoClip& rgb, const AlphaSequence& alpha, Rng& rng,
                                 int target_h, int target_w, int length) {
    CropParams p = sample_crop_params(rng, rgb.t(), rgb.height(), rgb.width(), target_h,
                                      target_w, length);
    return apply_crop(rgb, alpha, p, target_h, target_w, length);
}

}  // namespace flowmatte
