#pragma once

// Synthetic defect dataset: textured objects on contrasting backgrounds with
// injected defects and exact masks. Pixels are quantized to 8-bit levels so
// the on-disk PPM/PGM form round-trips exactly.

#include "filo/config.hpp"
#include "filo/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace filo {

enum class Split { kTrain, kTest, kReference };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct SampleRecord {
  std::string id;
  Image image;
  int label = 0;
  GroundTruthMask mask;
  std::string class_name;
  Split split = Split::kTrain;
  std::vector<std::string> defect_types;

  void validate() const;  // label, mask and defect list agree
};

const std::vector<std::string>& supported_defects();

std::vector<SampleRecord> generate_dataset(const DatasetConfig& spec, int image_size);

// One sample; defect empty for a normal sample.
SampleRecord render_sample(const std::string& class_name, const std::string& defect, int image_size,
                           std::uint64_t seed);

std::vector<SampleRecord> filter_split(const std::vector<SampleRecord>& records, Split split);

void save_dataset(const std::vector<SampleRecord>& records, const std::filesystem::path& dir);
std::vector<SampleRecord> load_dataset(const std::filesystem::path& dir);

}  // namespace filo
