#pragma once

#include "pfd2m/audio.hpp"
#include "pfd2m/autodiff.hpp"
#include "pfd2m/codec.hpp"
#include "pfd2m/conditioning.hpp"
#include "pfd2m/container.hpp"
#include "pfd2m/data.hpp"
#include "pfd2m/diffusion.hpp"
#include "pfd2m/dit.hpp"
#include "pfd2m/dsp.hpp"
#include "pfd2m/pipeline.hpp"
#include "pfd2m/plots.hpp"
#include "pfd2m/rhythm.hpp"
#include "pfd2m/rng.hpp"
#include "pfd2m/tensor.hpp"
#include "pfd2m/training.hpp"
#include "pfd2m/wav.hpp"
