#pragma once

#include "ragner/crf.hpp"
#include "ragner/encoder.hpp"
#include "ragner/error.hpp"
#include "ragner/evaluation.hpp"
#include "ragner/lstm.hpp"
#include "ragner/nerhead.hpp"
#include "ragner/optim.hpp"
#include "ragner/pipeline.hpp"
#include "ragner/retrieval.hpp"
#include "ragner/summarizer.hpp"
#include "ragner/textdata.hpp"
#include "ragner/toy.hpp"
#include "ragner/training.hpp"
