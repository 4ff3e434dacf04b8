#include "metaseg/dataset_io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace metaseg {

namespace {

std::string frame_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d.png", index);
  return buf;
}

}  // namespace

void write_davis_layout(const fs::path& root, const std::vector<Sequence>& seqs) {
  nlohmann::json meta;
  meta["sequences"] = nlohmann::json::object();
  for (const Sequence& seq : seqs) {
    require<SequenceError>(seq.frames.size() == seq.annotations.size(),
                           "write_davis_layout: frame/annotation count mismatch");
    const fs::path fdir = root / "Frames" / seq.id;
    const fs::path adir = root / "Annotations" / seq.id;
    fs::create_directories(fdir);
    fs::create_directories(adir);
    for (size_t f = 0; f < seq.frames.size(); ++f) {
      write_png_rgb((fdir / frame_name(static_cast<int>(f))).string(), *seq.frames[f]);
      write_png_gray((adir / frame_name(static_cast<int>(f))).string(), seq.annotations[f]);
    }
    meta["sequences"][seq.id] = {{"fps", seq.fps},
                                 {"frames", static_cast<int>(seq.frames.size())}};
  }
  std::ofstream out(root / "meta.json");
  require<FormatError>(out.good(), "write_davis_layout: cannot write meta.json");
  out << meta.dump(2) << "\n";
}

std::vector<Sequence> load_davis_sequences(const fs::path& root) {
  std::vector<Sequence> seqs;
  const fs::path frames_root = root / "Frames";
  if (!fs::is_directory(frames_root)) return seqs;

  nlohmann::json meta;
  {
    std::ifstream in(root / "meta.json");
    if (in.good()) {
      try {
        in >> meta;
      } catch (const nlohmann::json::exception&) {
        throw FormatError("load_davis_sequences: malformed meta.json");
      }
    }
  }

  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(frames_root))
    if (e.is_directory()) ids.push_back(e.path().filename().string());
  std::sort(ids.begin(), ids.end());

  for (const std::string& id : ids) {
    Sequence seq;
    seq.id = id;
    if (meta.contains("sequences") && meta["sequences"].contains(id) &&
        meta["sequences"][id].contains("fps"))
      seq.fps = meta["sequences"][id]["fps"].get<double>();

    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(frames_root / id))
      if (e.path().extension() == ".png") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    require<SequenceError>(!names.empty(), "load_davis_sequences: sequence has no frames");

    const fs::path adir = root / "Annotations" / id;
    require<SequenceError>(fs::exists(adir / names[0]),
                           "load_davis_sequences: missing annotation for frame 0");
    for (size_t f = 0; f < names.size(); ++f) {
      auto img = std::make_shared<Image>(read_png_rgb((frames_root / id / names[f]).string()));
      Mask ann;
      if (fs::exists(adir / names[f])) {
        ann = read_png_gray((adir / names[f]).string());
        require<SizeError>(ann.h == img->h && ann.w == img->w,
                           "load_davis_sequences: frame/mask size mismatch");
      } else {
        ann = Mask(img->h, img->w);
      }
      seq.frames.push_back(std::move(img));
      seq.annotations.push_back(std::move(ann));
    }
    seqs.push_back(std::move(seq));
  }
  return seqs;
}

TaskSet load_davis_layout(const fs::path& root, std::string split) {
  return tasks_from_sequences(load_davis_sequences(root), std::move(split));
}

}  // namespace metaseg
