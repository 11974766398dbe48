#include "vcore/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include <httplib.h>

namespace vcore {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Manifest

void to_json(json& j, const CoreManifest& m) {
  j = {{"core_id", m.core_id},
       {"D", m.depth},
       {"mpp", m.mpp},
       {"canvas", {{"width", m.canvas_width}, {"height", m.canvas_height}}},
       {"pyramids", m.pyramids},
       {"diagnostics", m.diagnostics}};
}

void from_json(const json& j, CoreManifest& m) {
  m.core_id = j.at("core_id").get<std::string>();
  m.depth = j.at("D").get<int>();
  m.mpp = j.at("mpp").get<double>();
  m.canvas_width = j.at("canvas").at("width").get<int>();
  m.canvas_height = j.at("canvas").at("height").get<int>();
  m.pyramids = j.at("pyramids").get<std::vector<std::string>>();
  m.diagnostics = j.value("diagnostics", json::object());
}

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

std::string z_dir(int z) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "z_%03d", z);
  return buf;
}

// Counts only; the full per-pair report stays in report.json.
json summarise(const json& report) {
  json s = json::object();
  if (!report.is_object()) return s;
  if (report.contains("pairs")) {
    int failed = 0;
    std::int64_t inliers = 0;
    for (const auto& p : report["pairs"]) {
      failed += p.value("failed", false) ? 1 : 0;
      inliers += p.value("inlier_count", std::int64_t{0});
    }
    s["pairs"] = report["pairs"].size();
    s["failed_pairs"] = failed;
    s["total_inliers"] = inliers;
  }
  for (const char* key : {"thumbnail_factor", "matcher"})
    if (report.contains(key)) s[key] = report[key];
  if (report.contains("nonrigid")) s["nonrigid_pairs"] = report["nonrigid"].size();
  return s;
}

}  // namespace

CoreManifest tile_core(const fs::path& core_dir, const PyramidOptions& options) {
  const VolumetricCore core = read_core(core_dir);
  if (core.depth() < 1) throw std::runtime_error("tile_core: core has no sections");
  CoreManifest m;
  m.core_id = fs::absolute(core_dir).lexically_normal().filename().string();
  if (m.core_id.empty()) m.core_id = fs::absolute(core_dir).lexically_normal().parent_path().filename().string();
  m.depth = core.depth();
  m.mpp = core.mpp;
  m.canvas_width = core.canvas.width;
  m.canvas_height = core.canvas.height;
  for (int z = 0; z < core.depth(); ++z) {
    const fs::path rel = fs::path("pyramids") / z_dir(z);
    build_pyramid(core.sections[z].rgb, core_dir / rel, "image", options);
    m.pyramids.push_back((rel / "image.dzi").generic_string());
  }
  if (fs::exists(core_dir / "report.json")) m.diagnostics = summarise(read_json_file(core_dir / "report.json"));
  std::ofstream out(core_dir / "manifest.json");
  out << json(m).dump(2) << '\n';
  if (!out) throw std::runtime_error("tile_core: cannot write manifest");
  return m;
}

CoreManifest read_manifest(const fs::path& core_dir) {
  CoreManifest m = read_json_file(core_dir / "manifest.json").get<CoreManifest>();
  if (m.depth < 1) throw std::runtime_error("manifest: D must be >= 1");
  if (static_cast<int>(m.pyramids.size()) != m.depth) throw std::runtime_error("manifest: pyramid count != D");
  for (const auto& p : m.pyramids)
    if (!fs::exists(core_dir / p)) throw std::runtime_error("manifest: missing " + p);
  return m;
}

// ---------------------------------------------------------------------------
// Grade records

void validate(const GradeRecord& r) {
  if (r.reader_id.empty()) throw InvalidRecord("reader_id", "must not be empty");
  if (std::find(kDiagnoses.begin(), kDiagnoses.end(), r.final_diagnosis) == kDiagnoses.end())
    throw InvalidRecord("final_diagnosis", "unknown diagnosis '" + r.final_diagnosis + "'");
  const bool pca = r.final_diagnosis == "PCA";
  if (pca && !r.ggg) throw InvalidRecord("ggg", "required when final_diagnosis is PCA");
  if (!pca && r.ggg) throw InvalidRecord("ggg", "only allowed when final_diagnosis is PCA");
  if (r.ggg && (*r.ggg < 1 || *r.ggg > 5)) throw InvalidRecord("ggg", "must be in 1..5");
  if (!std::isfinite(r.tumor_percent) || r.tumor_percent < 0 || r.tumor_percent > 100)
    throw InvalidRecord("tumor_percent", "must be in [0, 100]");
  if (!std::isfinite(r.tumor_mm) || r.tumor_mm < 0) throw InvalidRecord("tumor_mm", "must be >= 0");
}

GradeRecord parse_grade_record(const json& j) {
  if (!j.is_object()) throw InvalidRecord("record", "must be a JSON object");
  static const std::vector<std::string> known{"core_id",  "reader_id", "final_diagnosis", "ggg",
                                              "tumor_percent", "tumor_mm", "cribriform", "idc",
                                              "pni",      "timestamp"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw InvalidRecord(key, "unknown field");

  GradeRecord r;
  auto text = [&](const char* key, bool required) {
    if (!j.contains(key)) {
      if (required) throw InvalidRecord(key, "required");
      return std::string();
    }
    if (!j[key].is_string()) throw InvalidRecord(key, "must be a string");
    return j[key].get<std::string>();
  };
  auto number = [&](const char* key) {
    if (!j.contains(key)) return 0.0;
    if (!j[key].is_number()) throw InvalidRecord(key, "must be a number");
    return j[key].get<double>();
  };
  auto flag = [&](const char* key) {
    if (!j.contains(key)) return false;
    if (!j[key].is_boolean()) throw InvalidRecord(key, "must be a boolean");
    return j[key].get<bool>();
  };
  r.core_id = text("core_id", false);
  r.reader_id = text("reader_id", true);
  r.final_diagnosis = text("final_diagnosis", true);
  if (j.contains("ggg") && !j["ggg"].is_null()) {
    if (!j["ggg"].is_number_integer()) throw InvalidRecord("ggg", "must be an integer or null");
    r.ggg = j["ggg"].get<int>();
  }
  r.tumor_percent = number("tumor_percent");
  r.tumor_mm = number("tumor_mm");
  r.cribriform = flag("cribriform");
  r.idc = flag("idc");
  r.pni = flag("pni");
  validate(r);
  return r;
}

json to_json(const GradeRecord& r) {
  return {{"core_id", r.core_id},
          {"reader_id", r.reader_id},
          {"final_diagnosis", r.final_diagnosis},
          {"ggg", r.ggg ? json(*r.ggg) : json(nullptr)},
          {"tumor_percent", r.tumor_percent},
          {"tumor_mm", r.tumor_mm},
          {"cribriform", r.cribriform},
          {"idc", r.idc},
          {"pni", r.pni},
          {"timestamp", r.timestamp}};
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

// ---------------------------------------------------------------------------
// Record log

RecordLog::RecordLog(fs::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
}

void RecordLog::append(const json& record) {
  const std::string line = record.dump() + '\n';
  std::lock_guard lock(mutex_);
  const int fd = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw std::runtime_error("record log: cannot open " + path_.string() + ": " + std::strerror(errno));
  const ssize_t n = ::write(fd, line.data(), line.size());
  const int err = errno;
  ::close(fd);
  if (n != static_cast<ssize_t>(line.size()))
    throw std::runtime_error("record log: short write: " + std::string(std::strerror(err)));
}

std::vector<json> RecordLog::read(const std::optional<std::string>& core_id) const {
  std::lock_guard lock(mutex_);
  std::vector<json> out;
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    if (core_id && j.value("core_id", std::string()) != *core_id) continue;
    out.push_back(std::move(j));
  }
  return out;
}

// ---------------------------------------------------------------------------
// HTTP

fs::path env_root() {
  const char* v = std::getenv("VOLCORE_ROOT");
  return v && *v ? fs::path(v) : fs::path(".");
}

int env_port() {
  const char* v = std::getenv("VOLCORE_PORT");
  if (!v || !*v) return 8080;
  const int port = std::atoi(v);
  if (port < 0 || port > 65535) throw std::invalid_argument("VOLCORE_PORT out of range");
  return port;
}

struct TileService::Impl {
  ServiceOptions options;
  RecordLog log;
  httplib::Server server;

  explicit Impl(ServiceOptions o)
      : options(std::move(o)), log(options.log.empty() ? options.root / "reads.ndjson" : options.log) {
    routes();
  }

  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void not_found(httplib::Response& res, const std::string& what) {
    send_json(res, 404, {{"error", "not found"}, {"detail", what}});
  }

  static bool safe_id(const std::string& id) { return id != "." && id != ".."; }

  std::optional<CoreManifest> manifest(const std::string& id) const {
    if (!safe_id(id)) return std::nullopt;
    const fs::path dir = options.root / id;
    if (!fs::exists(dir / "manifest.json")) return std::nullopt;
    try {
      return read_manifest(dir);
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  std::vector<json> list_cores() const {
    std::vector<json> out;
    if (!fs::is_directory(options.root)) return out;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(options.root))
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      const auto m = manifest(d.filename().string());
      if (m) out.push_back({{"core_id", d.filename().string()}, {"D", m->depth}});
    }
    return out;
  }

  void routes() {
    const std::string id = "([A-Za-z0-9._-]+)";

    server.Get("/cores", [this](const httplib::Request&, httplib::Response& res) { send_json(res, 200, list_cores()); });

    server.Get("/cores/" + id + "/manifest", [this](const httplib::Request& req, httplib::Response& res) {
      const auto m = manifest(req.matches[1]);
      if (!m) return not_found(res, "core");
      send_json(res, 200, *m);
    });

    server.Get("/cores/" + id + R"(/z/(\d+)/image\.dzi)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto path = descriptor(req.matches[1], req.matches[2]);
      if (!path) return not_found(res, "core or z");
      std::ifstream in(*path);
      std::stringstream s;
      s << in.rdbuf();
      res.set_content(s.str(), "application/xml");
    });

    // `files/` is the public route; `image_files/` is what stock deep-zoom
    // clients derive from the descriptor URL.
    auto tile = [this](const httplib::Request& req, httplib::Response& res) {
      const auto path = descriptor(req.matches[1], req.matches[2]);
      if (!path) return not_found(res, "core or z");
      std::ifstream in(*path);
      std::stringstream s;
      s << in.rdbuf();
      const TilePyramid p = parse_dzi(s.str());
      const int level = std::stoi(req.matches[3]), col = std::stoi(req.matches[4]), row = std::stoi(req.matches[5]);
      if (!p.has_tile(level, col, row)) return not_found(res, "tile");
      const fs::path file = tile_path(path->parent_path(), path->stem().string(), level, col, row, p.format);
      std::ifstream t(file, std::ios::binary);
      if (!t) return not_found(res, "tile file");
      std::stringstream bytes;
      bytes << t.rdbuf();
      res.set_content(bytes.str(), "image/jpeg");
    };
    const std::string tile_tail = R"(/(\d+)/(\d+)_(\d+)\.jpg)";
    server.Get("/cores/" + id + R"(/z/(\d+)/files)" + tile_tail, tile);
    server.Get("/cores/" + id + R"(/z/(\d+)/image_files)" + tile_tail, tile);

    server.Post("/cores/" + id + "/reads", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string core = req.matches[1];
      if (!manifest(core)) return not_found(res, "core");
      json body = json::parse(req.body, nullptr, false);
      if (body.is_discarded()) return send_json(res, 400, {{"error", "malformed JSON"}});
      try {
        const GradeRecord r = parse_grade_record(body);
        if (!r.core_id.empty() && r.core_id != core) throw InvalidRecord("core_id", "does not match the URL");
      } catch (const InvalidRecord& e) {
        return send_json(res, 422, {{"error", e.what()}, {"field", e.field()}});
      }
      // Store the payload as sent so its fields round-trip unchanged.
      body["core_id"] = core;
      body["timestamp"] = utc_timestamp();
      log.append(body);
      send_json(res, 201, body);
    });

    server.Get("/cores/" + id + "/reads", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string core = req.matches[1];
      if (!manifest(core)) return not_found(res, "core");
      send_json(res, 200, log.read(core));
    });

    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      send_json(res, 500, {{"error", what}});
    });
  }

  std::optional<fs::path> descriptor(const std::string& core, const std::string& z_text) const {
    const auto m = manifest(core);
    if (!m || z_text.size() > 6) return std::nullopt;
    const int z = std::stoi(z_text);
    if (z < 0 || z >= m->depth) return std::nullopt;
    return options.root / core / m->pyramids[z];
  }
};

TileService::TileService(ServiceOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {}
TileService::~TileService() { stop(); }

int TileService::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw std::runtime_error("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void TileService::run() { impl_->server.listen_after_bind(); }
void TileService::stop() {
  if (impl_) impl_->server.stop();
}
bool TileService::running() const { return impl_->server.is_running(); }

}  // namespace vcore
