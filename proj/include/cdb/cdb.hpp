#pragma once

#include "cdb/baselines.hpp"
#include "cdb/cdb_block.hpp"
#include "cdb/checkpoint.hpp"
#include "cdb/config.hpp"
#include "cdb/correlation.hpp"
#include "cdb/data.hpp"
#include "cdb/error.hpp"
#include "cdb/inspect.hpp"
#include "cdb/layers.hpp"
#include "cdb/network.hpp"
#include "cdb/optimizer.hpp"
#include "cdb/random.hpp"
#include "cdb/tensor.hpp"
#include "cdb/train.hpp"
