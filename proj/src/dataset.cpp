#include "vasplat/dataset.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>

#include "vasplat/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vasplat {

namespace {

constexpr char kFieldMagic[8] = {'S', 'P', 'L', 'A', 'T', 'F', '1', '\n'};
constexpr int kFloatsPerGaussian = 17;

static_assert(std::endian::native == std::endian::little,
              "field serialization assumes a little-endian host");

void put_f32(std::string& out, double v) {
  const float f = static_cast<float>(v);
  char buf[4];
  std::memcpy(buf, &f, 4);
  out.append(buf, 4);
}

double get_f32(const char* p) {
  float f;
  std::memcpy(&f, p, 4);
  return f;
}

std::string frame_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu.png", i);
  return buf;
}

}  // namespace

std::string serialize_field(const GaussianField& field) {
  std::string out(kFieldMagic, 8);
  const std::uint64_t count = field.size();
  char buf[8];
  std::memcpy(buf, &count, 8);
  out.append(buf, 8);
  out.push_back(static_cast<char>(field.role));
  out.reserve(out.size() + field.size() * kFloatsPerGaussian * 4);
  for (const GaussianParams& g : field.gaussians) {
    for (int k = 0; k < 3; ++k) put_f32(out, g.position[k]);
    for (int k = 0; k < 3; ++k) put_f32(out, g.log_scale[k]);
    for (int k = 0; k < 4; ++k) put_f32(out, g.rotation[k]);
    put_f32(out, g.opacity_logit);
    for (int k = 0; k < 3; ++k) put_f32(out, g.color[k]);
    for (int k = 0; k < 3; ++k) put_f32(out, g.normal_residual[k]);
  }
  return out;
}

GaussianField deserialize_field(const std::string& bytes) {
  constexpr std::size_t kHeader = 8 + 8 + 1;
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kFieldMagic, 8) != 0) {
    fail(ErrorCode::kMalformedHeader, "field file: bad magic");
  }
  if (bytes.size() < kHeader) {
    fail(ErrorCode::kTruncatedFile, "field file: truncated header");
  }
  std::uint64_t count = 0;
  std::memcpy(&count, bytes.data() + 8, 8);
  const auto role = static_cast<std::uint8_t>(bytes[16]);
  if (role > 1) {
    fail(ErrorCode::kMalformedHeader, "field file: unknown role " + std::to_string(role));
  }
  const std::size_t record = kFloatsPerGaussian * 4;
  if (count > (bytes.size() - kHeader) / record) {
    fail(ErrorCode::kTruncatedFile, "field file: expected " + std::to_string(count) +
                                        " Gaussians, payload is shorter");
  }
  if (bytes.size() != kHeader + count * record) {
    fail(ErrorCode::kDimensionMismatch, "field file: trailing bytes after payload");
  }
  GaussianField field;
  field.role = static_cast<LayerRole>(role);
  field.stage = FieldStage::kCanonical;
  field.gaussians.resize(count);
  const char* p = bytes.data() + kHeader;
  for (GaussianParams& g : field.gaussians) {
    for (int k = 0; k < 3; ++k, p += 4) g.position[k] = get_f32(p);
    for (int k = 0; k < 3; ++k, p += 4) g.log_scale[k] = get_f32(p);
    for (int k = 0; k < 4; ++k, p += 4) g.rotation[k] = get_f32(p);
    g.opacity_logit = get_f32(p);
    p += 4;
    for (int k = 0; k < 3; ++k, p += 4) g.color[k] = get_f32(p);
    for (int k = 0; k < 3; ++k, p += 4) g.normal_residual[k] = get_f32(p);
  }
  return field;
}

void save_field(const GaussianField& field, const fs::path& path) {
  write_file_atomic(path, serialize_field(field));
}

GaussianField load_field(const fs::path& path) {
  return deserialize_field(read_file(path));
}

// ---- JSON helpers -------------------------------------------------------------

json camera_to_json(const Camera& c) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) rot.push_back(c.rotation(r, k));
  return json{{"fx", c.fx},
              {"fy", c.fy},
              {"cx", c.cx},
              {"cy", c.cy},
              {"rotation", rot},
              {"translation", {c.translation[0], c.translation[1], c.translation[2]}},
              {"width", c.width},
              {"height", c.height}};
}

Camera camera_from_json(const json& j) {
  Camera c;
  try {
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    const auto& rot = j.at("rotation");
    const auto& tr = j.at("translation");
    if (rot.size() != 9 || tr.size() != 3) {
      fail(ErrorCode::kMalformedHeader, "camera: rotation needs 9 and translation 3 entries");
    }
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) c.rotation(r, k) = rot[r * 3 + k].get<double>();
    for (int k = 0; k < 3; ++k) c.translation[k] = tr[k].get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedHeader, std::string("camera: ") + e.what());
  }
  c.validate();
  return c;
}

json conditions_to_json(const FrameConditions& c) {
  return json{{"a", std::vector<double>(c.audio.data(), c.audio.data() + c.audio.size())},
              {"u", std::vector<double>(c.action_units.data(),
                                        c.action_units.data() + c.action_units.size())},
              {"e", {c.emotion[0], c.emotion[1]}},
              {"camera", camera_to_json(c.camera)}};
}

FrameConditions conditions_from_json(const json& j) {
  FrameConditions c;
  try {
    const auto a = j.at("a").get<std::vector<double>>();
    const auto u = j.at("u").get<std::vector<double>>();
    const auto e = j.at("e").get<std::vector<double>>();
    if (e.size() != 2) {
      fail(ErrorCode::kMalformedHeader, "conditions: e must have 2 entries");
    }
    c.audio = Eigen::Map<const VecX>(a.data(), static_cast<Eigen::Index>(a.size()));
    c.action_units = Eigen::Map<const VecX>(u.data(), static_cast<Eigen::Index>(u.size()));
    c.emotion = Vec2(e[0], e[1]);
    c.camera = camera_from_json(j.at("camera"));
  } catch (const json::exception& ex) {
    fail(ErrorCode::kMalformedHeader, std::string("conditions: ") + ex.what());
  }
  return c;
}

std::string va_tag(const Vec2& e) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "v%.2f_a%.2f", e[0], e[1]);
  return buf;
}

// ---- Dataset ------------------------------------------------------------------

void Dataset::validate() const {
  const std::size_t n = frames.size();
  if (conditions.size() != n || face_masks.size() != n || mouth_masks.size() != n ||
      normal_targets.size() != n) {
    fail(ErrorCode::kDimensionMismatch,
         "dataset arrays disagree: frames=" + std::to_string(n) +
             " conditions=" + std::to_string(conditions.size()) +
             " face_masks=" + std::to_string(face_masks.size()) +
             " mouth_masks=" + std::to_string(mouth_masks.size()) +
             " normals=" + std::to_string(normal_targets.size()));
  }
  auto check_res = [&](const Image& img, const char* what) {
    if (img.width != width || img.height != height) {
      fail(ErrorCode::kResolutionMismatch, std::string("dataset ") + what + " resolution");
    }
  };
  check_res(background, "background");
  for (std::size_t i = 0; i < n; ++i) {
    check_res(frames[i], "frame");
    check_res(face_masks[i], "face mask");
    check_res(mouth_masks[i], "mouth mask");
    check_res(normal_targets[i], "normal map");
    for (std::size_t p = 0; p < face_masks[i].data.size(); ++p) {
      if (face_masks[i].data[p] > 0.5 && mouth_masks[i].data[p] > 0.5) {
        fail(ErrorCode::kInvalidArgument, "face and mouth masks overlap in frame " + std::to_string(i));
      }
    }
    const FrameConditions& c = conditions[i];
    if (c.audio.size() != audio_dim || c.action_units.size() != au_dim) {
      fail(ErrorCode::kDimensionMismatch,
           "frame " + std::to_string(i) + " condition dimensions do not match header");
    }
    if (c.emotion.cwiseAbs().maxCoeff() > 1.0) {
      fail(ErrorCode::kInvalidArgument, "frame " + std::to_string(i) + " emotion outside [-1,1]");
    }
  }
  for (const EmotionalTarget& t : emotional_targets) {
    if (t.frame < 0 || static_cast<std::size_t>(t.frame) >= n) {
      fail(ErrorCode::kDimensionMismatch, "emotional target refers to missing frame");
    }
    check_res(t.image, "emotional target");
  }
  for (int f : neutral_frames) {
    if (f < 0 || static_cast<std::size_t>(f) >= n) {
      fail(ErrorCode::kDimensionMismatch, "neutral frame index out of range");
    }
  }
  for (const VecX& a : audio_only) {
    if (a.size() != audio_dim) {
      fail(ErrorCode::kDimensionMismatch, "audio-only window dimension does not match header");
    }
  }
}

namespace {

Image mask_product(const Image& image, const Image& mask) {
  Image out = image;
  for (std::size_t p = 0; p < mask.pixel_count(); ++p) {
    const double m = mask.data[p];
    for (int c = 0; c < image.channels; ++c) out.data[p * image.channels + c] *= m;
  }
  return out;
}

}  // namespace

Image Dataset::masked_face(std::size_t frame) const {
  return mask_product(frames.at(frame), face_masks.at(frame));
}

Image Dataset::masked_mouth(std::size_t frame) const {
  return mask_product(frames.at(frame), mouth_masks.at(frame));
}

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    fail(ErrorCode::kIo, "dataset directory not found: " + dir.string());
  }
  Dataset ds;
  json header;
  try {
    header = json::parse(read_file(dir / "dataset.json"));
    ds.width = header.at("width").get<int>();
    ds.height = header.at("height").get<int>();
    ds.audio_dim = header.at("audio_dim").get<int>();
    ds.au_dim = header.at("au_dim").get<int>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedHeader, std::string("dataset.json: ") + e.what());
  }
  std::size_t frame_count = 0;
  try {
    frame_count = header.at("frame_count").get<std::size_t>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedHeader, std::string("dataset.json: ") + e.what());
  }

  {
    std::istringstream lines(read_file(dir / "conditions.jsonl"));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        fail(ErrorCode::kMalformedHeader, std::string("conditions.jsonl: ") + e.what());
      }
      ds.conditions.push_back(conditions_from_json(j));
    }
  }
  if (ds.conditions.size() != frame_count) {
    fail(ErrorCode::kDimensionMismatch,
         "conditions.jsonl has " + std::to_string(ds.conditions.size()) +
             " entries, header says " + std::to_string(frame_count));
  }
  for (std::size_t i = 0;; ++i) {
    const fs::path p = dir / "frames" / frame_name(i);
    if (!fs::exists(p)) break;
    ds.frames.push_back(read_png(p, 3, PngEncoding::kGamma22));
  }
  if (ds.frames.size() != frame_count) {
    fail(ErrorCode::kDimensionMismatch, "frames/ has " + std::to_string(ds.frames.size()) +
                                            " images, header says " + std::to_string(frame_count));
  }
  for (std::size_t i = 0; i < frame_count; ++i) {
    const auto name = frame_name(i);
    if (!fs::exists(dir / "masks_face" / name) || !fs::exists(dir / "masks_mouth" / name) ||
        !fs::exists(dir / "normals" / name)) {
      fail(ErrorCode::kDimensionMismatch, "missing mask or normal map for frame " + std::to_string(i));
    }
    Image face = read_png(dir / "masks_face" / name, 1, PngEncoding::kLinear);
    Image mouth = read_png(dir / "masks_mouth" / name, 1, PngEncoding::kLinear);
    for (double& v : face.data) v = v > 0.5 ? 1.0 : 0.0;
    for (double& v : mouth.data) v = v > 0.5 ? 1.0 : 0.0;
    Image normals = read_normal_png(dir / "normals" / name);
    if (normals.same_resolution(face)) normals = mask_product(normals, face);
    ds.face_masks.push_back(std::move(face));
    ds.mouth_masks.push_back(std::move(mouth));
    ds.normal_targets.push_back(std::move(normals));
  }
  ds.background = read_png(dir / "background.png", 3, PngEncoding::kGamma22);
  try {
    if (header.contains("neutral_frames")) {
      ds.neutral_frames = header.at("neutral_frames").get<std::vector<int>>();
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedHeader, std::string("dataset.json: ") + e.what());
  }
  if (fs::exists(dir / "audio_only.jsonl")) {
    std::istringstream lines(read_file(dir / "audio_only.jsonl"));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      try {
        const auto a = json::parse(line).at("a").get<std::vector<double>>();
        ds.audio_only.push_back(Eigen::Map<const VecX>(a.data(), static_cast<Eigen::Index>(a.size())));
      } catch (const json::exception& e) {
        fail(ErrorCode::kMalformedHeader, std::string("audio_only.jsonl: ") + e.what());
      }
    }
  }
  if (fs::exists(dir / "init_face.splatf")) ds.init_face = load_field(dir / "init_face.splatf");
  if (fs::exists(dir / "init_mouth.splatf")) ds.init_mouth = load_field(dir / "init_mouth.splatf");

  const fs::path emo_dir = dir / "emotional";
  if (fs::is_directory(emo_dir)) {
    static const std::regex pattern(R"((\d{3})_v(-?[0-9.]+)_a(-?[0-9.]+)\.png)");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(emo_dir)) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& p : files) {
      std::smatch m;
      const std::string name = p.filename().string();
      if (!std::regex_match(name, m, pattern)) continue;
      EmotionalTarget t;
      t.frame = std::stoi(m[1]);
      t.emotion = Vec2(std::stod(m[2]), std::stod(m[3]));
      t.image = read_png(p, 3, PngEncoding::kGamma22);
      const fs::path np = dir / "emotional_normals" / name;
      if (fs::exists(np)) {
        Image n = read_normal_png(np);
        for (std::size_t q = 0; q < n.pixel_count(); ++q) {
          Eigen::Map<Vec3> v(&n.data[q * 3]);
          if (v.norm() < 0.5) v.setZero();
        }
        t.normals = std::move(n);
      }
      ds.emotional_targets.push_back(std::move(t));
    }
  }
  ds.validate();
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
  ds.validate();
  for (const char* sub : {"frames", "masks_face", "masks_mouth", "normals"}) {
    fs::create_directories(dir / sub);
  }
  json header{{"version", 1},
              {"width", ds.width},
              {"height", ds.height},
              {"frame_count", ds.size()},
              {"audio_dim", ds.audio_dim},
              {"au_dim", ds.au_dim}};
  if (!ds.neutral_frames.empty()) header["neutral_frames"] = ds.neutral_frames;
  write_file_atomic(dir / "dataset.json", header.dump(2) + "\n");
  std::string lines;
  for (const FrameConditions& c : ds.conditions) lines += conditions_to_json(c).dump() + "\n";
  write_file_atomic(dir / "conditions.jsonl", lines);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto name = frame_name(i);
    write_png(dir / "frames" / name, ds.frames[i], PngEncoding::kGamma22);
    write_png(dir / "masks_face" / name, ds.face_masks[i], PngEncoding::kLinear);
    write_png(dir / "masks_mouth" / name, ds.mouth_masks[i], PngEncoding::kLinear);
    write_normal_png(dir / "normals" / name, ds.normal_targets[i]);
  }
  write_png(dir / "background.png", ds.background, PngEncoding::kGamma22);
  if (!ds.audio_only.empty()) {
    std::string audio;
    for (const VecX& a : ds.audio_only) {
      audio += json{{"a", std::vector<double>(a.data(), a.data() + a.size())}}.dump() + "\n";
    }
    write_file_atomic(dir / "audio_only.jsonl", audio);
  }
  if (ds.init_face) save_field(*ds.init_face, dir / "init_face.splatf");
  if (ds.init_mouth) save_field(*ds.init_mouth, dir / "init_mouth.splatf");
  if (!ds.emotional_targets.empty()) {
    fs::create_directories(dir / "emotional");
    for (const EmotionalTarget& t : ds.emotional_targets) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "%03d_%s.png", t.frame, va_tag(t.emotion).c_str());
      write_png(dir / "emotional" / buf, t.image, PngEncoding::kGamma22);
      if (t.normals) {
        fs::create_directories(dir / "emotional_normals");
        write_normal_png(dir / "emotional_normals" / buf, *t.normals);
      }
    }
  }
}

}  // namespace vasplat
