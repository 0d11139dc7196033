#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "redloop/domain.h"

namespace redloop::csv {

struct Record {
  std::vector<std::string> fields;
  std::size_t line = 0;  // 1-based line where the record starts
};

// RFC 4180: comma separated, double-quote quoting with "" escapes, quoted
// fields may span lines, CRLF or LF record ends. An unterminated quote
// throws FormatError naming the line it opened on.
std::vector<Record> parse(std::string_view content);

struct Reject {
  std::size_t row = 0;   // 1-based data row (header excluded)
  std::size_t line = 0;  // source line
  std::string reason;
};

struct IngestResult {
  Dataset dataset;
  std::vector<Reject> rejects;
  std::size_t rows_read = 0;
};

// Reads a header-first CSV into an ExternalTransfer dataset. Rows whose label
// is not 0/1, whose text is blank, or whose width differs from the header are
// collected into `rejects`. Missing columns throw SchemaError. An "id" column,
// when present, supplies prompt ids.
IngestResult ingest_toxic(std::string_view content, const std::string& text_column,
                          const std::string& label_column, const std::string& dataset_id);
IngestResult ingest_toxic_file(const std::filesystem::path& path, const std::string& text_column,
                               const std::string& label_column, const std::string& dataset_id);

}  // namespace redloop::csv
