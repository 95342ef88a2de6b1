#include "radiopipe/augment.hpp"

#include <cmath>
#include <numbers>

#include "radiopipe/error.hpp"

namespace radiopipe {

Volume rotate90(const Volume& v, int k) {
    if (k < 1 || k > 3) fail("UsageError", "rotation turns must be 1, 2, or 3");
    if ((k == 1 || k == 3) && v.height != v.width) {
        fail("NonSquarePlane", "quarter turns need a square plane, got " +
                                   std::to_string(v.height) + "x" + std::to_string(v.width));
    }
    Volume out = Volume::zeros(v.height, v.width, v.depth);
    out.subject_id = v.subject_id;
    out.modality = v.modality;
    for (int d = 0; d < v.depth; ++d) {
        for (int h = 0; h < v.height; ++h) {
            for (int w = 0; w < v.width; ++w) {
                float src;
                switch (k) {
                    case 1: src = v.at(v.height - 1 - w, h, d); break;
                    case 2: src = v.at(v.height - 1 - h, v.width - 1 - w, d); break;
                    default: src = v.at(w, v.width - 1 - h, d); break;
                }
                out.at(h, w, d) = src;
            }
        }
    }
    return out;
}

Volume horizontal_flip(const Volume& v) {
    Volume out = v;
    for (int d = 0; d < v.depth; ++d) {
        for (int h = 0; h < v.height; ++h) {
            for (int w = 0; w < v.width; ++w) {
                out.at(h, w, d) = v.at(h, v.width - 1 - w, d);
            }
        }
    }
    return out;
}

AffineParams sample_affine_params(const AugmentPolicy& policy, int height, int width, Rng& rng) {
    if (policy.max_rotation_deg < 0) fail("UsageError", "max_rotation_deg must be >= 0");
    if (policy.max_translate_frac < 0 || policy.max_translate_frac >= 1) {
        fail("UsageError", "max_translate_frac must be in [0, 1)");
    }
    AffineParams p;
    p.angle_deg = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg);
    p.dx = rng.uniform(-policy.max_translate_frac * width, policy.max_translate_frac * width);
    p.dy = rng.uniform(-policy.max_translate_frac * height, policy.max_translate_frac * height);
    return p;
}

Volume random_affine(const Volume& v, const AugmentPolicy& policy, Rng& rng) {
    const AffineParams p = sample_affine_params(policy, v.height, v.width, rng);
    const double theta = p.angle_deg * std::numbers::pi / 180.0;
    const double cos_t = std::cos(theta);
    const double sin_t = std::sin(theta);
    const double cy = (v.height - 1) / 2.0;
    const double cx = (v.width - 1) / 2.0;

    Volume out = Volume::zeros(v.height, v.width, v.depth);
    out.subject_id = v.subject_id;
    out.modality = v.modality;
    for (int d = 0; d < v.depth; ++d) {
        for (int h = 0; h < v.height; ++h) {
            for (int w = 0; w < v.width; ++w) {
                // Invert "rotate about center, then translate": undo the shift,
                // then rotate by -theta about the center.
                const double qx = w - p.dx - cx;
                const double qy = h - p.dy - cy;
                const double sx = cos_t * qx + sin_t * qy + cx;
                const double sy = -sin_t * qx + cos_t * qy + cy;

                const int x0 = static_cast<int>(std::floor(sx));
                const int y0 = static_cast<int>(std::floor(sy));
                const double fx = sx - x0;
                const double fy = sy - y0;
                double acc = 0.0;
                for (int dy2 = 0; dy2 <= 1; ++dy2) {
                    for (int dx2 = 0; dx2 <= 1; ++dx2) {
                        const int yy = y0 + dy2;
                        const int xx = x0 + dx2;
                        if (yy < 0 || yy >= v.height || xx < 0 || xx >= v.width) continue;
                        const double weight = (dx2 ? fx : 1.0 - fx) * (dy2 ? fy : 1.0 - fy);
                        acc += weight * v.at(yy, xx, d);
                    }
                }
                out.at(h, w, d) = static_cast<float>(acc);
            }
        }
    }
    return out;
}

std::vector<Volume> expand_training_set(const std::vector<Volume>& volumes) {
    std::vector<Volume> out;
    out.reserve(volumes.size() * 4);
    for (const auto& v : volumes) out.push_back(v);
    for (int k = 1; k <= 3; ++k) {
        for (const auto& v : volumes) out.push_back(rotate90(v, k));
    }
    return out;
}

}  // namespace radiopipe
