#pragma once

#include "pfrag/common.hpp"
#include "pfrag/config.hpp"
#include "pfrag/serialize.hpp"
#include "pfrag/trace.hpp"
#include "pfrag/retriever.hpp"
#include "pfrag/features.hpp"
#include "pfrag/labels.hpp"
#include "pfrag/predictor.hpp"
#include "pfrag/monitor.hpp"
#include "pfrag/query.hpp"
#include "pfrag/policy.hpp"
#include "pfrag/runtime.hpp"
#include "pfrag/bench.hpp"
