#pragma once

#include "conpet/cache.hpp"
#include "conpet/config.hpp"
#include "conpet/core_data.hpp"
#include "conpet/dataset.hpp"
#include "conpet/dynamic_conpet.hpp"
#include "conpet/encoder.hpp"
#include "conpet/errors.hpp"
#include "conpet/eval.hpp"
#include "conpet/learner.hpp"
#include "conpet/pet.hpp"
#include "conpet/replay.hpp"
#include "conpet/rng.hpp"
#include "conpet/runner.hpp"
#include "conpet/static_conpet.hpp"
#include "conpet/synthetic.hpp"
