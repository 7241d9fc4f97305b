#pragma once

#define PLANSMOOTH_VERSION_MAJOR 0
#define PLANSMOOTH_VERSION_MINOR 1
#define PLANSMOOTH_VERSION_PATCH 0
#define PLANSMOOTH_VERSION "0.1.0"

namespace plansmooth {

inline const char* version() { return PLANSMOOTH_VERSION; }

}  // namespace plansmooth
