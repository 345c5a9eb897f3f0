#pragma once

#include "reflctrl/activation_store.hpp"
#include "reflctrl/config.hpp"
#include "reflctrl/core_types.hpp"
#include "reflctrl/direction_lab.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/eval/analytics.hpp"
#include "reflctrl/eval/dataset.hpp"
#include "reflctrl/eval/grading.hpp"
#include "reflctrl/eval/sweep.hpp"
#include "reflctrl/hash.hpp"
#include "reflctrl/model/activation_record.hpp"
#include "reflctrl/model/causal_lm.hpp"
#include "reflctrl/model/generate.hpp"
#include "reflctrl/model/mock_model.hpp"
#include "reflctrl/model/transformer.hpp"
#include "reflctrl/pipeline.hpp"
#include "reflctrl/reflection_labeler.hpp"
#include "reflctrl/report/svg.hpp"
#include "reflctrl/segmenter.hpp"
#include "reflctrl/steering.hpp"
#include "reflctrl/uncertainty_probe.hpp"
