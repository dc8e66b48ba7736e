#pragma once

#include "fsmt/analysis.hpp"
#include "fsmt/common.hpp"
#include "fsmt/corpus.hpp"
#include "fsmt/csv.hpp"
#include "fsmt/dataset.hpp"
#include "fsmt/evaluation.hpp"
#include "fsmt/fewshot.hpp"
#include "fsmt/generation.hpp"
#include "fsmt/metrics.hpp"
#include "fsmt/templates.hpp"
