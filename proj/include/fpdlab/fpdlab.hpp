#pragma once

#include "fpdlab/checkpoint.hpp"
#include "fpdlab/config.hpp"
#include "fpdlab/distill.hpp"
#include "fpdlab/drift.hpp"
#include "fpdlab/gradcheck.hpp"
#include "fpdlab/masking.hpp"
#include "fpdlab/metrics.hpp"
#include "fpdlab/nn.hpp"
#include "fpdlab/pipeline.hpp"
#include "fpdlab/rng.hpp"
#include "fpdlab/teacher.hpp"
#include "fpdlab/tensor.hpp"
#include "fpdlab/toyworld.hpp"
