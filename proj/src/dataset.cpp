#include "composer/dataset.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "composer/errors.hpp"
#include "composer/image.hpp"
#include "composer/serialize.hpp"
#include "composer/vocab.hpp"

namespace composer {

namespace fs = std::filesystem;

namespace {

std::string stem(int64_t index) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << index;
  return os.str();
}

}  // namespace

void save_record(const fs::path& dir, int64_t index,
                 const DatasetRecord& rec) {
  const std::string s = stem(index);
  save_ppm(dir / (s + ".ppm"), rec.image);
  save_ctsr(dir / (s + ".depth.ctsr"), rec.depth);
  save_ctsr(dir / (s + ".inst.ctsr"), rec.instances);
  std::ofstream cap(dir / (s + ".caption.txt"), std::ios::trunc);
  if (!cap) throw IoError("cannot write caption for record " + s);
  cap << rec.caption_text << '\n';
}

DatasetRecord load_record(const fs::path& dir, int64_t index, uint64_t seed) {
  const std::string s = stem(index);
  DatasetRecord rec;
  rec.image = load_ppm(dir / (s + ".ppm"));
  rec.depth = load_ctsr(dir / (s + ".depth.ctsr"));
  rec.instances = load_ctsr(dir / (s + ".inst.ctsr"));
  std::ifstream cap(dir / (s + ".caption.txt"));
  if (!cap) throw IoError("cannot read caption for record " + s);
  std::getline(cap, rec.caption_text);
  rec.caption = tokenize(rec.caption_text);
  rec.seed = seed;
  return rec;
}

void write_dataset(const fs::path& dir,
                   const std::vector<DatasetRecord>& records) {
  fs::create_directories(dir);
  std::ofstream index(dir / "index.txt", std::ios::trunc);
  if (!index) throw IoError("cannot write " + (dir / "index.txt").string());
  for (size_t i = 0; i < records.size(); ++i) {
    save_record(dir, int64_t(i), records[i]);
    index << stem(int64_t(i)) << ' ' << records[i].seed << '\n';
  }
}

std::vector<DatasetRecord> load_dataset(const fs::path& dir) {
  std::ifstream index(dir / "index.txt");
  if (!index) throw IoError("cannot open " + (dir / "index.txt").string());
  std::vector<DatasetRecord> out;
  std::string name;
  uint64_t seed;
  while (index >> name >> seed) {
    out.push_back(load_record(dir, std::stoll(name), seed));
    out.back().validate();
  }
  if (out.empty())
    throw IoError("dataset at " + dir.string() + " has an empty index");
  return out;
}

}  // namespace composer
