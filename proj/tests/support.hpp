#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "mcqc/backend.hpp"
#include "mcqc/dataset.hpp"
#include "mcqc/model_ops.hpp"

namespace testing {

using namespace mcqc;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mcqc-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline McqItem make_item(std::string id, std::string stem, std::vector<std::string> options, std::size_t correct) {
  McqItem it;
  it.id = std::move(id);
  it.stem = std::move(stem);
  it.options = std::move(options);
  it.correct = correct;
  return it;
}

// n options "<id> option <i>" with the correct one at a random position.
inline McqItem random_item(std::mt19937_64& rng, const std::string& id, std::size_t n) {
  std::vector<std::string> opts;
  for (std::size_t i = 0; i < n; ++i) opts.push_back(id + " option " + std::to_string(i));
  return make_item(id, "Question " + id + "?", opts, std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
}

inline Model synthetic(SyntheticOracleSpec spec, double temperature = 0.7) {
  BackendConfig c;
  c.temperature = temperature;
  return {std::make_shared<SyntheticOracle>(std::move(spec)), c};
}

inline Model scripted(std::shared_ptr<FunctionBackend> fn, int max_retries = 3) {
  BackendConfig c;
  c.max_retries = max_retries;
  return {std::move(fn), c};
}

inline std::string fenced(const Json& j) { return "```json\n" + j.dump() + "\n```"; }

inline std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testing
