#pragma once

#include "dspert/errors.hpp"
#include "dspert/rng.hpp"
#include "dspert/tensor.hpp"
#include "dspert/ops.hpp"
#include "dspert/gradcheck.hpp"
#include "dspert/transformer.hpp"
#include "dspert/span_encoder.hpp"
#include "dspert/heads.hpp"
#include "dspert/data.hpp"
#include "dspert/model.hpp"
#include "dspert/metrics.hpp"
#include "dspert/training.hpp"
#include "dspert/analysis.hpp"
#include "dspert/config.hpp"
#include "dspert/checkpoint.hpp"
