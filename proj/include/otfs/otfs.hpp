#pragma once

#include "otfs/channel.hpp"
#include "otfs/core.hpp"
#include "otfs/detect.hpp"
#include "otfs/effective.hpp"
#include "otfs/experiment.hpp"
#include "otfs/grid.hpp"
#include "otfs/metrics.hpp"
#include "otfs/rfcp.hpp"
#include "otfs/serialize.hpp"
#include "otfs/version.hpp"
