#pragma once

#include "memscore/baseline.hpp"
#include "memscore/data_io.hpp"
#include "memscore/errors.hpp"
#include "memscore/experiments.hpp"
#include "memscore/influence.hpp"
#include "memscore/instance.hpp"
#include "memscore/model.hpp"
#include "memscore/parallel.hpp"
#include "memscore/stats.hpp"
#include "memscore/trainer.hpp"
