#include "icl/model_io.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "icl/errors.hpp"

namespace icl {

namespace {

using nlohmann::json;

constexpr const char* kFormat = "icl-concept-model";
constexpr int kVersion = 1;

json vector_to_json(const Eigen::VectorXd& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::RowVectorXd row = m.row(r);
    rows.push_back(std::vector<double>(row.data(), row.data() + row.size()));
  }
  return rows;
}

Eigen::VectorXd vector_from_json(const json& j, const std::string& what) {
  if (!j.is_array()) throw FormatError(what + " must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw FormatError(what + " must contain numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

Eigen::MatrixXd matrix_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw FormatError(what + " must be a non-empty array of rows");
  const std::size_t cols = j[0].size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw FormatError(what + " rows must have equal length");
    m.row(static_cast<Eigen::Index>(r)) = vector_from_json(j[r], what).transpose();
  }
  return m;
}

template <typename T>
T required(const json& doc, const char* key) {
  if (!doc.contains(key)) throw FormatError(std::string("model document is missing '") + key + "'");
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("model field '") + key + "': " + e.what());
  }
}

Structure structure_from_string(const std::string& s) {
  if (s == "markov") return Structure::markov;
  if (s == "pairs") return Structure::pairs;
  throw FormatError("unknown structure '" + s + "'");
}

}  // namespace

json model_to_json(const LatentConceptModel& model) {
  json doc;
  doc["format"] = kFormat;
  doc["version"] = kVersion;
  doc["structure"] = model.structure() == Structure::markov ? "markov" : "pairs";
  doc["alphabet_size"] = model.alphabet_size();
  doc["prior"] = vector_to_json(model.prior());
  if (model.c0_floor()) doc["c0_floor"] = *model.c0_floor();
  json tables = json::array();
  for (int z = 0; z < model.num_concepts(); ++z) tables.push_back(matrix_to_json(model.table(z)));
  if (model.structure() == Structure::markov) {
    doc["order"] = model.order();
    doc["tables"] = std::move(tables);
  } else {
    doc["covariate_length"] = model.covariate_length();
    json laws = json::array();
    for (int z = 0; z < model.num_concepts(); ++z) laws.push_back(vector_to_json(model.covariate_law(z)));
    doc["covariate_laws"] = std::move(laws);
    doc["response_tables"] = std::move(tables);
  }
  return doc;
}

LatentConceptModel model_from_json(const json& doc) {
  if (!doc.is_object()) throw FormatError("model document must be an object");
  if (doc.contains("format") && doc["format"] != kFormat) throw FormatError("unexpected model format tag");
  if (doc.contains("version") && doc["version"] != kVersion) throw FormatError("unsupported model version");
  if (doc.contains("generator")) return generate_model(recipe_from_json(doc["generator"]));

  const Structure structure = structure_from_string(required<std::string>(doc, "structure"));
  const int alphabet = required<int>(doc, "alphabet_size");
  Eigen::VectorXd prior = vector_from_json(doc.at("prior"), "prior");
  std::optional<double> c0;
  if (doc.contains("c0_floor") && !doc["c0_floor"].is_null()) c0 = doc["c0_floor"].get<double>();

  if (structure == Structure::markov) {
    std::vector<Eigen::MatrixXd> tables;
    for (const auto& t : required<json>(doc, "tables")) tables.push_back(matrix_from_json(t, "tables"));
    return LatentConceptModel::markov(std::move(prior), alphabet, required<int>(doc, "order"), std::move(tables), c0);
  }
  std::vector<Eigen::VectorXd> laws;
  for (const auto& l : required<json>(doc, "covariate_laws")) laws.push_back(vector_from_json(l, "covariate_laws"));
  std::vector<Eigen::MatrixXd> tables;
  for (const auto& t : required<json>(doc, "response_tables")) tables.push_back(matrix_from_json(t, "response_tables"));
  return LatentConceptModel::pairs(std::move(prior), alphabet, required<int>(doc, "covariate_length"), std::move(laws),
                                   std::move(tables), c0);
}

GeneratorRecipe recipe_from_json(const json& doc) {
  static const std::vector<std::string> known = {"structure",     "num_concepts", "alphabet_size",
                                                 "order",         "covariate_length", "shared_covariates",
                                                 "c0",            "concentration", "prior", "seed"};
  if (!doc.is_object()) throw FormatError("generator recipe must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw SchemaError("generator." + key, "unknown generator field");
    }
  }
  GeneratorRecipe g;
  g.structure = structure_from_string(doc.value("structure", std::string("markov")));
  g.num_concepts = doc.value("num_concepts", g.num_concepts);
  g.alphabet_size = doc.value("alphabet_size", g.alphabet_size);
  g.order = doc.value("order", g.order);
  g.covariate_length = doc.value("covariate_length", g.covariate_length);
  g.shared_covariates = doc.value("shared_covariates", g.shared_covariates);
  g.c0 = doc.value("c0", g.c0);
  g.concentration = doc.value("concentration", g.concentration);
  const std::string prior = doc.value("prior", std::string("uniform"));
  if (prior != "uniform" && prior != "dirichlet") throw SchemaError("generator.prior", "expected uniform or dirichlet");
  g.dirichlet_prior = prior == "dirichlet";
  g.seed = doc.value("seed", g.seed);
  return g;
}

json recipe_to_json(const GeneratorRecipe& g) {
  return json{{"structure", g.structure == Structure::markov ? "markov" : "pairs"},
              {"num_concepts", g.num_concepts},
              {"alphabet_size", g.alphabet_size},
              {"order", g.order},
              {"covariate_length", g.covariate_length},
              {"shared_covariates", g.shared_covariates},
              {"c0", g.c0},
              {"concentration", g.concentration},
              {"prior", g.dirichlet_prior ? "dirichlet" : "uniform"},
              {"seed", g.seed}};
}

void save_model(const LatentConceptModel& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write model file " + path.string());
  out << model_to_json(model).dump(2) << '\n';
}

LatentConceptModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open model file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("model file " + path.string() + ": " + e.what());
  }
  return model_from_json(doc);
}

}  // namespace icl
