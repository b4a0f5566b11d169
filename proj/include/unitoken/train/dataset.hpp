#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "unitoken/core/image.hpp"
#include "unitoken/sequence/codec.hpp"
#include "unitoken/vq/tokenizer.hpp"

namespace unitoken {

/// One raw record: an image plus its text. For generation the prompt is the
/// caption and the image is the target; `answer` is empty.
struct Sample {
  Task task = Task::understanding;
  Image image;
  std::string prompt;
  std::string answer;
  std::string image_path;  // relative to the manifest, when loaded from disk
};

using Dataset = std::vector<Sample>;

/// JSONL manifest, one {"task","image","prompt","answer"} record per line.
/// Images are P6 PPM files resolved relative to the manifest's directory.
Dataset read_manifest(const std::filesystem::path& path);

/// Writes the manifest and one PPM per sample into `dir` (created if needed).
void write_manifest(const Dataset& data, const std::filesystem::path& dir,
                    const std::string& manifest_name = "manifest.jsonl");

/// A sample with its image already tokenized by the frozen VQ tokenizer.
struct TrainingExample {
  Task task = Task::understanding;
  Image image;
  TokenGrid grid;
  std::vector<int> prompt;
  std::vector<int> answer;
};

struct TrainingData {
  std::vector<TrainingExample> understanding;
  std::vector<TrainingExample> generation;
};

TrainingData prepare_data(const Dataset& data, VQTokenizer<float>& tokenizer);

}  // namespace unitoken
