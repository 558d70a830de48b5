#include "icl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <string>
#include <type_traits>

#include "icl/errors.hpp"

namespace icl {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr const char* kMagic = "ICLCKPT 1";

template <typename Fn>
void for_each_block(TransformerParams& p, Fn&& fn) {
  for (std::size_t t = 0; t < p.layers.size(); ++t) {
    auto& l = p.layers[t];
    const std::string pre = "layer" + std::to_string(t) + ".";
    for (std::size_t i = 0; i < l.wq.size(); ++i) fn(pre + "wq" + std::to_string(i), l.wq[i]);
    for (std::size_t i = 0; i < l.wk.size(); ++i) fn(pre + "wk" + std::to_string(i), l.wk[i]);
    for (std::size_t i = 0; i < l.wv.size(); ++i) fn(pre + "wv" + std::to_string(i), l.wv[i]);
    fn(pre + "a1", l.a1);
    fn(pre + "a2", l.a2);
  }
  fn("out", p.out);
}

}  // namespace

json shape_to_json(const TransformerShape& s) {
  const ThetaBounds& b = s.bounds;
  return {{"d", s.d},
          {"d_y", s.d_y},
          {"d_f", s.d_f},
          {"heads", s.heads},
          {"depth", s.depth},
          {"tau", s.tau},
          {"head", s.head == HeadKind::softmax ? "softmax" : "l2"},
          {"bounds", {{"b_a", b.b_a}, {"b_a1", b.b_a1}, {"b_a2", b.b_a2}, {"b_q", b.b_q}, {"b_k", b.b_k}, {"b_v", b.b_v}}}};
}

TransformerShape shape_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) throw SchemaError(path, "expected an object");
  TransformerShape s;
  auto number = [&](const json& obj, const std::string& key, const std::string& at, auto& field) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (!v.is_number()) throw SchemaError(at + "." + key, "expected a number");
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw SchemaError(at + "." + key, "expected an integer");
    }
    field = v.get<T>();
  };
  for (const auto& [key, value] : j.items()) {
    static const char* known[] = {"d", "d_y", "d_f", "heads", "depth", "tau", "head", "bounds"};
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) throw SchemaError(path + "." + key, "unknown key");
  }
  number(j, "d", path, s.d);
  number(j, "d_y", path, s.d_y);
  number(j, "d_f", path, s.d_f);
  number(j, "heads", path, s.heads);
  number(j, "depth", path, s.depth);
  number(j, "tau", path, s.tau);
  if (j.contains("head")) {
    const json& h = j.at("head");
    if (!h.is_string() || (h != "softmax" && h != "l2")) throw SchemaError(path + ".head", "expected softmax or l2");
    s.head = h == "softmax" ? HeadKind::softmax : HeadKind::l2;
  }
  if (j.contains("bounds")) {
    const json& b = j.at("bounds");
    const std::string at = path + ".bounds";
    if (!b.is_object()) throw SchemaError(at, "expected an object");
    for (const auto& [key, value] : b.items()) {
      static const char* known[] = {"b_a", "b_a1", "b_a2", "b_q", "b_k", "b_v"};
      if (std::find(std::begin(known), std::end(known), key) == std::end(known)) throw SchemaError(at + "." + key, "unknown key");
    }
    number(b, "b_a", at, s.bounds.b_a);
    number(b, "b_a1", at, s.bounds.b_a1);
    number(b, "b_a2", at, s.bounds.b_a2);
    number(b, "b_q", at, s.bounds.b_q);
    number(b, "b_k", at, s.bounds.b_k);
    number(b, "b_v", at, s.bounds.b_v);
  }
  return s;
}

void save_checkpoint(const TransformerParams& params, std::uint64_t seed, const std::filesystem::path& path,
                     const json& metadata) {
  TransformerParams p = params;
  json header = shape_to_json(p.shape);
  header["seed"] = seed;
  header["metadata"] = metadata;
  json gammas = json::array();
  for (const auto& l : p.layers) gammas.push_back({l.gamma1, l.gamma2});
  header["gammas"] = gammas;
  json blocks = json::array();
  for_each_block(p, [&](const std::string& name, const Eigen::MatrixXd& m) {
    blocks.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  header["blocks"] = blocks;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out << kMagic << '\n' << header.dump() << '\n';
  for_each_block(p, [&](const std::string&, const Eigen::MatrixXd& m) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
  });
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kMagic) throw FormatError("checkpoint: bad magic line in " + path.string());
  std::getline(in, header_line);
  Checkpoint ck;
  try {
    const json header = json::parse(header_line);
    json shape_doc = header;
    for (const char* key : {"seed", "gammas", "blocks", "metadata"}) shape_doc.erase(key);
    const TransformerShape shape = shape_from_json(shape_doc, "checkpoint");
    shape.validate();
    ck.seed = header.at("seed");
    ck.metadata = header.value("metadata", json::object());
    ck.params = TransformerParams::zeros(shape);
    const json& gammas = header.at("gammas");
    if (gammas.size() != ck.params.layers.size()) throw FormatError("checkpoint: gamma list has wrong length");
    for (std::size_t t = 0; t < gammas.size(); ++t) {
      ck.params.layers[t].gamma1 = gammas[t].at(0);
      ck.params.layers[t].gamma2 = gammas[t].at(1);
    }
    const json& blocks = header.at("blocks");
    std::size_t index = 0;
    for_each_block(ck.params, [&](const std::string& name, Eigen::MatrixXd& m) {
      if (index >= blocks.size()) throw FormatError("checkpoint: block list is too short");
      const json& b = blocks[index++];
      if (b.at("name") != name || b.at("rows") != m.rows() || b.at("cols") != m.cols()) {
        throw FormatError("checkpoint: block " + name + " does not match the declared shape");
      }
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(m.rows(), m.cols());
      in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
      if (!in) throw FormatError("checkpoint: truncated block " + name);
      m = rm;
    });
    if (index != blocks.size()) throw FormatError("checkpoint: unexpected extra blocks");
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  } catch (const SchemaError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  } catch (const ShapeMismatch& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes");
  if (!in_theta(ck.params)) throw FormatError("checkpoint parameters lie outside the bounded class");
  return ck;
}

}  // namespace icl
