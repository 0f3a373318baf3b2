// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "splatfield/backprojection.hpp"
#include "splatfield/error.hpp"
#include "splatfield/feature_store.hpp"
#include "splatfield/gaussian.hpp"
#include "splatfield/identity.hpp"
#include "splatfield/parallel.hpp"
#include "splatfield/query.hpp"
#include "splatfield/raster.hpp"
#include "splatfield/rasterizer.hpp"
#include "splatfield/scene_io.hpp"
#include "splatfield/service.hpp"
#include "splatfield/synthetic.hpp"
