#pragma once

#include "fcdn/architecture.hpp"
#include "fcdn/blocks.hpp"
#include "fcdn/checkpoint.hpp"
#include "fcdn/config.hpp"
#include "fcdn/data.hpp"
#include "fcdn/errors.hpp"
#include "fcdn/gradcheck.hpp"
#include "fcdn/graph.hpp"
#include "fcdn/image_io.hpp"
#include "fcdn/kernels.hpp"
#include "fcdn/metrics.hpp"
#include "fcdn/ops.hpp"
#include "fcdn/optim.hpp"
#include "fcdn/reference_tables.hpp"
#include "fcdn/report.hpp"
#include "fcdn/rng.hpp"
#include "fcdn/tensor.hpp"
#include "fcdn/train.hpp"
