#include "redloop/csv.h"

#include <algorithm>
#include <cctype>

#include "redloop/error.h"
#include "redloop/fsutil.h"

namespace redloop::csv {

std::vector<Record> parse(std::string_view in) {
  std::vector<Record> out;
  Record rec;
  std::string field;
  std::size_t line = 1;
  std::size_t quote_line = 0;
  bool in_quotes = false;
  bool field_started = false;
  rec.line = 1;

  const auto end_field = [&] {
    rec.fields.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  const auto end_record = [&] {
    end_field();
    out.push_back(std::move(rec));
    rec = Record{};
  };

  for (std::size_t i = 0; i < in.size(); ++i) {
    const char c = in[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < in.size() && in[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        // Quotes open a quoted field only at its start; elsewhere literal.
        if (!field_started) {
          in_quotes = true;
          quote_line = line;
          field_started = true;
        } else {
          field.push_back(c);
        }
        break;
      case ',':
        end_field();
        break;
      case '\r':
        if (i + 1 < in.size() && in[i + 1] == '\n') break;
        [[fallthrough]];
      case '\n':
        end_record();
        ++line;
        rec.line = line;
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) throw FormatError("unterminated quoted field", quote_line);
  if (field_started || !field.empty() || !rec.fields.empty()) end_record();
  return out;
}

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace

IngestResult ingest_toxic(std::string_view content, const std::string& text_column,
                          const std::string& label_column, const std::string& dataset_id) {
  std::vector<Record> records = parse(content);
  if (records.empty()) throw SchemaError("CSV has no header row");
  const auto& header = records.front().fields;
  const auto column = [&](const std::string& name) -> std::ptrdiff_t {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  const std::ptrdiff_t text_col = column(text_column);
  const std::ptrdiff_t label_col = column(label_column);
  const std::ptrdiff_t id_col = column("id");
  if (text_col < 0) throw SchemaError("missing text column '" + text_column + "'");
  if (label_col < 0) throw SchemaError("missing label column '" + label_column + "'");

  IngestResult result;
  result.dataset.id = dataset_id;
  result.dataset.tags = {DatasetTag::ExternalTransfer};
  for (std::size_t r = 1; r < records.size(); ++r) {
    const Record& rec = records[r];
    if (rec.fields.size() == 1 && rec.fields[0].empty()) continue;  // blank line
    ++result.rows_read;
    const auto reject = [&](std::string why) {
      result.rejects.push_back(Reject{r, rec.line, std::move(why)});
    };
    if (rec.fields.size() != header.size()) {
      reject("expected " + std::to_string(header.size()) + " fields, found " +
             std::to_string(rec.fields.size()));
      continue;
    }
    const std::string label = trim(rec.fields[static_cast<std::size_t>(label_col)]);
    if (label != "0" && label != "1") {
      reject("label '" + label + "' is not 0 or 1");
      continue;
    }
    const std::string& text = rec.fields[static_cast<std::size_t>(text_col)];
    if (trim(text).empty()) {
      reject("empty text");
      continue;
    }
    std::string id = id_col >= 0 ? rec.fields[static_cast<std::size_t>(id_col)]
                                 : dataset_id + "-" + std::to_string(r);
    result.dataset.examples.push_back(Example{std::move(id), text, label == "1" ? 1 : 0});
  }
  return result;
}

IngestResult ingest_toxic_file(const std::filesystem::path& path, const std::string& text_column,
                               const std::string& label_column, const std::string& dataset_id) {
  return ingest_toxic(read_file(path), text_column, label_column, dataset_id);
}

}  // namespace redloop::csv
