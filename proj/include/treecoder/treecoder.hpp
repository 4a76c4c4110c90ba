#pragma once

#include "treecoder/autodiff.hpp"
#include "treecoder/checkpoint.hpp"
#include "treecoder/data.hpp"
#include "treecoder/errors.hpp"
#include "treecoder/experiment.hpp"
#include "treecoder/generate.hpp"
#include "treecoder/grad_check.hpp"
#include "treecoder/nn.hpp"
#include "treecoder/selector.hpp"
#include "treecoder/tokenizer.hpp"
#include "treecoder/trainer.hpp"
#include "treecoder/tree.hpp"
#include "treecoder/tree_math.hpp"
