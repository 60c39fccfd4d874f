#pragma once

#include "corrflow/attention.hpp"
#include "corrflow/color.hpp"
#include "corrflow/config.hpp"
#include "corrflow/data_io.hpp"
#include "corrflow/encoder.hpp"
#include "corrflow/metrics.hpp"
#include "corrflow/ops.hpp"
#include "corrflow/optim.hpp"
#include "corrflow/propagation.hpp"
#include "corrflow/tensor.hpp"
#include "corrflow/training.hpp"
