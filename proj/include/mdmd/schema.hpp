#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mdmd {

// Partition of landmark indices into semantic groups. Group order is fixed;
// empty groups are legal and carry no parameters downstream.
struct FlsgMap {
  std::vector<std::vector<int>> groups;

  int group_count() const { return static_cast<int>(groups.size()); }
};

enum class NormalizationKind { LandmarkPair, BboxSqrtArea };

struct Normalization {
  NormalizationKind kind = NormalizationKind::BboxSqrtArea;
  int i = -1;  // valid for LandmarkPair
  int j = -1;
};

// One landmark definition: how many points, how they map onto the shared
// groups, how errors are normalized, and (optionally) how indices permute
// under a horizontal flip.
struct DatasetSchema {
  std::string name;
  int landmark_count = 0;
  FlsgMap flsg_map;
  Normalization normalization;
  std::optional<std::vector<int>> flip_permutation;
};

// Ordered collection of schemas sharing one group count. Dataset ids are
// positional. Immutable after load.
struct SchemaSet {
  std::vector<DatasetSchema> schemas;
  int group_count = 0;

  int size() const { return static_cast<int>(schemas.size()); }
  const DatasetSchema& at(int dataset_id) const;
  int id_of(const std::string& name) const;  // -1 when absent
};

// Throws Error("schema-invalid", ...) naming the schema and offending index.
void validate_schema(const DatasetSchema& schema);

// Concatenation of all group index lists in group order; length N. Position k
// of a gathered array belongs at canonical landmark index flatten_ids[k].
std::vector<int> flatten_ids(const FlsgMap& map);

// Per-group landmark counts; sums to landmark_count.
std::vector<int> group_sizes(const DatasetSchema& schema);

// Parses one schema document: a single schema object, an array of schema
// objects, or {"schemas": [...]}. Validates everything.
SchemaSet load_schemas(const std::string& document_text);

// Loads and merges several documents into one set (common group count).
SchemaSet load_schema_files(const std::vector<std::filesystem::path>& paths);

// Convenience: loads every *.json in a directory, sorted by filename.
SchemaSet load_schema_dir(const std::filesystem::path& dir);

// Canonical serialization and its FNV-1a 64 fingerprint. Checkpoints embed the
// fingerprint and refuse to resume against a different set.
std::string schema_set_to_json(const SchemaSet& set);
std::string schema_set_fingerprint(const SchemaSet& set);

// Ablation variant: one singleton group per landmark, so each landmark gets
// its own decoder query token. All schemas must share one landmark count
// (group counts stay uniform across the set).
SchemaSet to_per_landmark(const SchemaSet& set);

}  // namespace mdmd
