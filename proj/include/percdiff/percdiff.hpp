#pragma once

#include "percdiff/codec.hpp"
#include "percdiff/config.hpp"
#include "percdiff/dataset.hpp"
#include "percdiff/denoiser.hpp"
#include "percdiff/errors.hpp"
#include "percdiff/grid.hpp"
#include "percdiff/io.hpp"
#include "percdiff/metrics.hpp"
#include "percdiff/parallel.hpp"
#include "percdiff/rng.hpp"
#include "percdiff/sampler.hpp"
#include "percdiff/schedule.hpp"
