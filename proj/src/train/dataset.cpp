#include "unitoken/train/dataset.hpp"

#include <fstream>

#include <json.hpp>

namespace unitoken {

Dataset read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read manifest " + path.string());
  const auto base = path.parent_path();
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    Sample s;
    const std::string task = rec.at("task").get<std::string>();
    if (task == "und") {
      s.task = Task::understanding;
    } else if (task == "gen") {
      s.task = Task::generation;
    } else {
      throw ParseError(line_no, "manifest line " + std::to_string(line_no) + ": unknown task '" + task + "'");
    }
    s.image_path = rec.at("image").get<std::string>();
    s.prompt = rec.value("prompt", "");
    s.answer = rec.value("answer", "");
    if (s.task == Task::understanding && s.answer.empty()) {
      throw ParseError(line_no, "manifest line " + std::to_string(line_no) + ": understanding record without answer");
    }
    s.image = read_ppm(base / s.image_path);
    data.push_back(std::move(s));
  }
  return data;
}

void write_manifest(const Dataset& data, const std::filesystem::path& dir, const std::string& manifest_name) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream out(dir / manifest_name, std::ios::trunc);
  if (!out) throw UsageError("cannot write manifest in " + dir.string());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    const std::string rel = "images/" + std::to_string(i) + ".ppm";
    write_ppm(s.image, dir / rel);
    nlohmann::json rec;
    rec["task"] = s.task == Task::understanding ? "und" : "gen";
    rec["image"] = rel;
    rec["prompt"] = s.prompt;
    if (s.task == Task::understanding) rec["answer"] = s.answer;
    out << rec.dump() << '\n';
  }
}

TrainingData prepare_data(const Dataset& data, VQTokenizer<float>& tokenizer) {
  TrainingData out;
  for (const Sample& s : data) {
    TrainingExample ex;
    ex.task = s.task;
    ex.image = s.image;
    ex.grid = tokenizer.encode_image(s.image);
    ex.prompt = encode_text(s.prompt);
    ex.answer = encode_text(s.answer);
    if (s.task == Task::understanding) {
      if (ex.answer.empty()) throw UsageError("understanding sample without an answer");
      out.understanding.push_back(std::move(ex));
    } else {
      out.generation.push_back(std::move(ex));
    }
  }
  return out;
}

}  // namespace unitoken
