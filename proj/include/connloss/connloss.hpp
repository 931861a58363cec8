#pragma once

#include "connloss/analysis.hpp"
#include "connloss/embstore.hpp"
#include "connloss/geometry.hpp"
#include "connloss/image.hpp"
#include "connloss/linalg.hpp"
#include "connloss/procrustes.hpp"
#include "connloss/recon/checkpoint.hpp"
#include "connloss/recon/model.hpp"
#include "connloss/recon/patch_loss.hpp"
#include "connloss/recon/trainer.hpp"
#include "connloss/synth.hpp"

namespace connloss {
inline constexpr const char* kVersion = "0.1.0";
}
