#pragma once

#include <cstdint>
#include <vector>

#include "radiopipe/rng.hpp"
#include "radiopipe/volume.hpp"

namespace radiopipe {

enum class AugmentKind { Rot90CW, Rot90CCW, Rot180, HFlip, RandomAffine };

struct AugmentPolicy {
    AugmentKind kind = AugmentKind::RandomAffine;
    double max_rotation_deg = 36.0;
    double max_translate_frac = 0.10;
    uint64_t seed = 0;
};

struct AffineParams {
    double angle_deg = 0.0;
    double dx = 0.0;  // horizontal shift in voxels
    double dy = 0.0;  // vertical shift in voxels
};

// Rotate every in-plane slice k * 90 degrees clockwise. k in {1,2,3};
// k in {1,3} requires a square plane.
Volume rotate90(const Volume& v, int k);

// Reverse the columns of every slice.
Volume horizontal_flip(const Volume& v);

// Draw one (angle, dx, dy) triple for a volume of the given plane size.
AffineParams sample_affine_params(const AugmentPolicy& policy, int height, int width, Rng& rng);

// Rotate about the slice center then translate, shared params across slices,
// bilinear resampling with zero fill outside the frame.
Volume random_affine(const Volume& v, const AugmentPolicy& policy, Rng& rng);

// Originals first, then the rot90, rot180, rot270 copies of the whole list.
// Labels for the output repeat the input labels with period volumes.size().
std::vector<Volume> expand_training_set(const std::vector<Volume>& volumes);

}  // namespace radiopipe
