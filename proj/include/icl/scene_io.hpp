#pragma once

#include <filesystem>
#include <iosfwd>

#include "icl/kernel_attention.hpp"

namespace icl {

// Plain-text scene format, whitespace separated, row-major:
//
//   icl-scene v1
//   kernel <linear|rbf|exponential> <gamma>
//   ridge <lambda>
//   temperature <tau>
//   keys <rows> <cols>
//   <rows * cols values>
//   values <rows> <cols>
//   <rows * cols values>
//   query <n>
//   <n values>
//
// Numbers are written with 17 significant digits so a save/load cycle is exact.
void write_scene(std::ostream& out, const KernelScene<double>& scene);
KernelScene<double> read_scene(std::istream& in);

void save_scene(const KernelScene<double>& scene, const std::filesystem::path& path);
KernelScene<double> load_scene(const std::filesystem::path& path);

}  // namespace icl
