#pragma once

namespace textseg {

// Numeric width of tensor storage. Double by default so finite-difference
// gradient checks are meaningful; float builds are intended for training runs
// only (configure with -DTEXTSEG_SINGLE_PRECISION=ON).
#ifdef TEXTSEG_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

}  // namespace textseg
