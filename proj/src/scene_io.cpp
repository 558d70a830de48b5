#include "icl/scene_io.hpp"

#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace icl {

namespace {

void write_block(std::ostream& out, const char* tag, const Eigen::MatrixXd& m) {
  out << tag << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? " " : "") << m(r, c);
    out << '\n';
  }
}

void expect(std::istream& in, const std::string& word) {
  std::string got;
  if (!(in >> got) || got != word) throw FormatError("scene file: expected '" + word + "', found '" + got + "'");
}

Eigen::MatrixXd read_block(std::istream& in, const char* tag) {
  expect(in, tag);
  Eigen::Index rows = 0, cols = 0;
  if (!(in >> rows >> cols) || rows < 0 || cols < 0) throw FormatError(std::string("scene file: bad shape for ") + tag);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      if (!(in >> m(r, c))) throw FormatError(std::string("scene file: truncated ") + tag + " block");
  return m;
}

}  // namespace

void write_scene(std::ostream& out, const KernelScene<double>& s) {
  const auto old = out.precision(std::numeric_limits<double>::max_digits10);
  out << "icl-scene v1\n";
  out << "kernel " << kernel_name(s.kernel.kind) << ' ' << s.kernel.gamma << '\n';
  out << "ridge " << s.ridge << '\n';
  out << "temperature " << s.temperature << '\n';
  write_block(out, "keys", s.keys);
  write_block(out, "values", s.values);
  out << "query " << s.query.size() << '\n';
  for (Eigen::Index i = 0; i < s.query.size(); ++i) out << (i ? " " : "") << s.query[i];
  out << '\n';
  out.precision(old);
}

KernelScene<double> read_scene(std::istream& in) {
  expect(in, "icl-scene");
  expect(in, "v1");
  KernelScene<double> s;
  expect(in, "kernel");
  std::string kind;
  if (!(in >> kind >> s.kernel.gamma)) throw FormatError("scene file: bad kernel line");
  try {
    s.kernel.kind = kernel_from_name(kind);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("scene file: ") + e.what());
  }
  expect(in, "ridge");
  if (!(in >> s.ridge)) throw FormatError("scene file: bad ridge");
  expect(in, "temperature");
  if (!(in >> s.temperature)) throw FormatError("scene file: bad temperature");
  s.keys = read_block(in, "keys");
  s.values = read_block(in, "values");
  expect(in, "query");
  Eigen::Index n = 0;
  if (!(in >> n) || n < 0) throw FormatError("scene file: bad query size");
  s.query.resize(n);
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(in >> s.query[i])) throw FormatError("scene file: truncated query");
  s.validate();
  return s;
}

void save_scene(const KernelScene<double>& scene, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write scene file " + path.string());
  write_scene(out, scene);
}

KernelScene<double> load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open scene file " + path.string());
  return read_scene(in);
}

}  // namespace icl
