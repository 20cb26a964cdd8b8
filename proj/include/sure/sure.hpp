#pragma once

#include "sure/error.hpp"
#include "sure/tensor.hpp"
#include "sure/autodiff.hpp"
#include "sure/model.hpp"
#include "sure/loss.hpp"
#include "sure/optim.hpp"
#include "sure/metrics.hpp"
#include "sure/data.hpp"
#include "sure/reweight.hpp"
#include "sure/config.hpp"
#include "sure/experiment.hpp"
#include "sure/report.hpp"
#include "sure/ablation.hpp"
