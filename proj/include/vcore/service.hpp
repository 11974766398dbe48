#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcore/pyramid.hpp"
#include "vcore/volume.hpp"

namespace vcore {

// ---------------------------------------------------------------------------
// Manifest

struct CoreManifest {
  std::string core_id;
  int depth = 0;
  double mpp = 0.5;
  int canvas_width = 0;
  int canvas_height = 0;
  std::vector<std::string> pyramids;  ///< per z, descriptor path relative to the core directory
  nlohmann::json diagnostics = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const CoreManifest& m);
void from_json(const nlohmann::json& j, CoreManifest& m);

/// Builds one pyramid per section under `<core_dir>/pyramids/z_XXX/` and
/// writes `<core_dir>/manifest.json`. The id is the directory name; the
/// diagnostics summary comes from report.json when present.
CoreManifest tile_core(const std::filesystem::path& core_dir, const PyramidOptions& options = {});

/// Throws std::runtime_error when the manifest is missing, D < 1 or a
/// referenced descriptor does not exist.
CoreManifest read_manifest(const std::filesystem::path& core_dir);

// ---------------------------------------------------------------------------
// Grade records

class InvalidRecord : public std::invalid_argument {
 public:
  InvalidRecord(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

inline const std::vector<std::string> kDiagnoses{"Benign", "PCA",    "HGPIN", "ASAP",
                                                 "PINATYP", "ASAP-HI", "AIP",   "BFM"};

struct GradeRecord {
  std::string core_id;
  std::string reader_id;
  std::string final_diagnosis;
  std::optional<int> ggg;
  double tumor_percent = 0.0;
  double tumor_mm = 0.0;
  bool cribriform = false;
  bool idc = false;
  bool pni = false;
  std::string timestamp;  ///< set by the server, ISO 8601 UTC
};

/// Throws InvalidRecord when an invariant does not hold.
void validate(const GradeRecord& record);

/// Strict parse: unknown fields, wrong types and invariant violations throw
/// InvalidRecord. A timestamp in the payload is ignored.
GradeRecord parse_grade_record(const nlohmann::json& j);
nlohmann::json to_json(const GradeRecord& record);

std::string utc_timestamp();

// ---------------------------------------------------------------------------
// Record log

/// Newline-delimited JSON, append only. Each record is written with a single
/// write(2) on an O_APPEND descriptor under a process-wide mutex, so lines
/// never interleave.
class RecordLog {
 public:
  explicit RecordLog(std::filesystem::path path);

  void append(const nlohmann::json& record);
  /// Every parseable line, optionally filtered by core_id.
  std::vector<nlohmann::json> read(const std::optional<std::string>& core_id = std::nullopt) const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// HTTP

struct ServiceOptions {
  std::filesystem::path root;  ///< one subdirectory per core
  std::filesystem::path log;   ///< defaults to <root>/reads.ndjson
};

/// Reads VOLCORE_ROOT (default ".") and VOLCORE_PORT (default 8080).
std::filesystem::path env_root();
int env_port();

class TileService {
 public:
  explicit TileService(ServiceOptions options);
  ~TileService();
  TileService(const TileService&) = delete;
  TileService& operator=(const TileService&) = delete;

  /// Binds to `port` (0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void run();
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace vcore
