#pragma once

#include "centers.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "evaluation.hpp"
#include "gradcheck.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "pipeline.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "tensor.hpp"
