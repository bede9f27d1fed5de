#pragma once

#include "satellite/embedding.hpp"
#include "satellite/error.hpp"
#include "satellite/feature_store.hpp"
#include "satellite/fuzzy_topology.hpp"
#include "satellite/layout_alt.hpp"
#include "satellite/layout_umap.hpp"
#include "satellite/neighbor_graph.hpp"
#include "satellite/pipeline.hpp"
#include "satellite/satellite_detector.hpp"
#include "satellite/seed_probe.hpp"
#include "satellite/spatial2d.hpp"
