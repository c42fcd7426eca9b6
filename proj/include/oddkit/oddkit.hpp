#pragma once
// Umbrella header: the whole pipeline in one include.

#include "oddkit/common.hpp"
#include "oddkit/rng.hpp"
#include "oddkit/tensor.hpp"
#include "oddkit/gemm.hpp"
#include "oddkit/autodiff.hpp"
#include "oddkit/conv.hpp"
#include "oddkit/image_io.hpp"
#include "oddkit/image.hpp"
#include "oddkit/coco.hpp"
#include "oddkit/patches.hpp"
#include "oddkit/checkpoint.hpp"
#include "oddkit/models.hpp"
#include "oddkit/optimizer.hpp"
#include "oddkit/trainer.hpp"
#include "oddkit/scoring.hpp"
#include "oddkit/evaluate.hpp"
#include "oddkit/config.hpp"
