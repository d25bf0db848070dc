#pragma once

#include "arrag/common.hpp"
#include "arrag/image.hpp"
#include "arrag/codebook.hpp"
#include "arrag/patchdb.hpp"
#include "arrag/ddm.hpp"
#include "arrag/sfb.hpp"
#include "arrag/backbone.hpp"
#include "arrag/generate.hpp"
#include "arrag/eval.hpp"
#include "arrag/synth.hpp"
#include "arrag/config.hpp"
