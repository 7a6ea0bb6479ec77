#include "mdmd/schema.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mdmd/error.hpp"
#include "mdmd/rng.hpp"

namespace mdmd {

using nlohmann::json;

const DatasetSchema& SchemaSet::at(int dataset_id) const {
  if (dataset_id < 0 || dataset_id >= size())
    fail("unknown-schema", "dataset id " + std::to_string(dataset_id) +
                               " out of range [0, " + std::to_string(size()) + ")");
  return schemas[static_cast<size_t>(dataset_id)];
}

int SchemaSet::id_of(const std::string& name) const {
  for (int i = 0; i < size(); ++i)
    if (schemas[static_cast<size_t>(i)].name == name) return i;
  return -1;
}

void validate_schema(const DatasetSchema& schema) {
  const std::string where = "schema '" + schema.name + "'";
  if (schema.name.empty()) fail("schema-invalid", "schema with empty name");
  if (schema.landmark_count <= 0)
    fail("schema-invalid", where + ": landmark_count must be positive");

  const int n = schema.landmark_count;
  std::vector<int> seen(static_cast<size_t>(n), 0);
  for (size_t g = 0; g < schema.flsg_map.groups.size(); ++g) {
    for (int idx : schema.flsg_map.groups[g]) {
      if (idx < 0 || idx >= n)
        fail("schema-invalid", where + ": group " + std::to_string(g) +
                                   " has out-of-range index " + std::to_string(idx));
      if (seen[static_cast<size_t>(idx)]++)
        fail("schema-invalid", where + ": index " + std::to_string(idx) +
                                   " appears in more than one group");
    }
  }
  for (int idx = 0; idx < n; ++idx)
    if (!seen[static_cast<size_t>(idx)])
      fail("schema-invalid",
           where + ": index " + std::to_string(idx) + " missing from every group");

  if (schema.normalization.kind == NormalizationKind::LandmarkPair) {
    const int i = schema.normalization.i;
    const int j = schema.normalization.j;
    if (i < 0 || i >= n || j < 0 || j >= n || i == j)
      fail("schema-invalid", where + ": bad normalization pair (" +
                                 std::to_string(i) + ", " + std::to_string(j) + ")");
  }

  if (schema.flip_permutation) {
    const auto& perm = *schema.flip_permutation;
    if (static_cast<int>(perm.size()) != n)
      fail("schema-invalid", where + ": flip permutation length " +
                                 std::to_string(perm.size()) + " != landmark count " +
                                 std::to_string(n));
    std::vector<int> hit(static_cast<size_t>(n), 0);
    for (int v : perm) {
      if (v < 0 || v >= n)
        fail("schema-invalid",
             where + ": flip permutation has out-of-range entry " + std::to_string(v));
      if (hit[static_cast<size_t>(v)]++)
        fail("schema-invalid",
             where + ": flip permutation repeats entry " + std::to_string(v));
    }
  }
}

std::vector<int> flatten_ids(const FlsgMap& map) {
  std::vector<int> ids;
  for (const auto& g : map.groups) ids.insert(ids.end(), g.begin(), g.end());
  return ids;
}

std::vector<int> group_sizes(const DatasetSchema& schema) {
  std::vector<int> sizes;
  sizes.reserve(schema.flsg_map.groups.size());
  for (const auto& g : schema.flsg_map.groups)
    sizes.push_back(static_cast<int>(g.size()));
  return sizes;
}

namespace {

DatasetSchema parse_schema_object(const json& j) {
  if (!j.is_object()) fail("schema-parse", "schema entry is not an object");
  DatasetSchema s;
  try {
    s.name = j.at("name").get<std::string>();
    s.landmark_count = j.at("landmark_count").get<int>();
    const json& groups = j.at("groups");
    if (!groups.is_array())
      fail("schema-parse", "schema '" + s.name + "': groups must be an array");
    for (const auto& g : groups) {
      if (!g.is_array())
        fail("schema-parse", "schema '" + s.name + "': each group must be an array");
      std::vector<int> ids;
      for (const auto& v : g) ids.push_back(v.get<int>());
      s.flsg_map.groups.push_back(std::move(ids));
    }
    const json& norm = j.at("normalization");
    const std::string kind = norm.at("kind").get<std::string>();
    if (kind == "pair") {
      s.normalization.kind = NormalizationKind::LandmarkPair;
      s.normalization.i = norm.at("i").get<int>();
      s.normalization.j = norm.at("j").get<int>();
    } else if (kind == "bbox") {
      s.normalization.kind = NormalizationKind::BboxSqrtArea;
    } else {
      fail("schema-parse",
           "schema '" + s.name + "': unknown normalization kind '" + kind + "'");
    }
    if (j.contains("flip_permutation")) {
      std::vector<int> perm;
      for (const auto& v : j.at("flip_permutation")) perm.push_back(v.get<int>());
      s.flip_permutation = std::move(perm);
    }
  } catch (const json::exception& e) {
    fail("schema-parse", std::string("malformed schema object: ") + e.what());
  }
  return s;
}

void finalize(SchemaSet& set) {
  if (set.schemas.empty()) fail("schema-parse", "no schemas in document");
  for (const auto& s : set.schemas) validate_schema(s);
  set.group_count = set.schemas.front().flsg_map.group_count();
  for (const auto& s : set.schemas) {
    if (s.flsg_map.group_count() != set.group_count)
      fail("schema-invalid", "schema '" + s.name + "' has " +
                                 std::to_string(s.flsg_map.group_count()) +
                                 " groups, expected " + std::to_string(set.group_count));
  }
  for (size_t i = 0; i < set.schemas.size(); ++i)
    for (size_t k = i + 1; k < set.schemas.size(); ++k)
      if (set.schemas[i].name == set.schemas[k].name)
        fail("schema-invalid", "duplicate schema name '" + set.schemas[i].name + "'");
}

void append_document(SchemaSet& set, const std::string& text,
                     const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail("schema-parse", origin + ": " + e.what());
  }
  if (doc.is_array()) {
    for (const auto& entry : doc) set.schemas.push_back(parse_schema_object(entry));
  } else if (doc.is_object() && doc.contains("schemas")) {
    for (const auto& entry : doc.at("schemas"))
      set.schemas.push_back(parse_schema_object(entry));
  } else {
    set.schemas.push_back(parse_schema_object(doc));
  }
}

}  // namespace

SchemaSet load_schemas(const std::string& document_text) {
  SchemaSet set;
  append_document(set, document_text, "schema document");
  finalize(set);
  return set;
}

SchemaSet load_schema_files(const std::vector<std::filesystem::path>& paths) {
  SchemaSet set;
  for (const auto& p : paths) {
    std::ifstream in(p);
    if (!in) fail("io", "cannot open schema file " + p.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    append_document(set, buf.str(), p.string());
  }
  finalize(set);
  return set;
}

SchemaSet load_schema_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> paths;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec))
    if (entry.path().extension() == ".json") paths.push_back(entry.path());
  if (ec) fail("io", "cannot list schema directory " + dir.string());
  if (paths.empty()) fail("io", "no *.json schema files in " + dir.string());
  std::sort(paths.begin(), paths.end());
  return load_schema_files(paths);
}

std::string schema_set_to_json(const SchemaSet& set) {
  json out = json::array();
  for (const auto& s : set.schemas) {
    json j;
    j["name"] = s.name;
    j["landmark_count"] = s.landmark_count;
    j["groups"] = s.flsg_map.groups;
    if (s.normalization.kind == NormalizationKind::LandmarkPair)
      j["normalization"] = {{"kind", "pair"}, {"i", s.normalization.i}, {"j", s.normalization.j}};
    else
      j["normalization"] = {{"kind", "bbox"}};
    if (s.flip_permutation) j["flip_permutation"] = *s.flip_permutation;
    out.push_back(std::move(j));
  }
  // nlohmann::json serializes object keys sorted, so this form is canonical.
  return out.dump();
}

SchemaSet to_per_landmark(const SchemaSet& set) {
  SchemaSet out;
  for (const DatasetSchema& s : set.schemas) {
    if (s.landmark_count != set.schemas.front().landmark_count)
      fail("schema-invalid",
           "per-landmark tokens need one landmark count across the set; '" +
               s.name + "' has " + std::to_string(s.landmark_count) + ", '" +
               set.schemas.front().name + "' has " +
               std::to_string(set.schemas.front().landmark_count));
    DatasetSchema t = s;
    t.flsg_map.groups.clear();
    for (int k = 0; k < s.landmark_count; ++k) t.flsg_map.groups.push_back({k});
    out.schemas.push_back(std::move(t));
  }
  for (const auto& s : out.schemas) validate_schema(s);
  out.group_count = out.schemas.front().flsg_map.group_count();
  return out;
}

std::string schema_set_fingerprint(const SchemaSet& set) {
  const uint64_t h = hash_str(schema_set_to_json(set));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace mdmd
