#pragma once

#include <string>
#include <vector>

#include "qesr/types.hpp"

namespace qesr {

// Fixed 10-significant-digit rendering used for every number we emit, so
// repeated runs produce byte-identical files. Rejects non-finite input.
std::string format_g10(double v);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

// Strict numeric CSV: every row must match the header width and every cell
// must parse as a double. Errors carry line and column positions.
CsvTable read_csv_file(const std::string& path);
CsvTable read_csv_text(const std::string& text, const std::string& origin);

void write_csv_file(const std::string& path,
                    const std::vector<std::string>& header,
                    const std::vector<std::vector<double>>& rows);

// Pulls the response and covariates out of a table and prepends the
// intercept column.
Dataset make_dataset(const CsvTable& table, const std::string& response,
                     const std::vector<std::string>& covariates);

// Streaming JSON writer with caller-controlled key order.
class JsonWriter {
 public:
  JsonWriter& begin_object();
  JsonWriter& end_object();
  JsonWriter& begin_array();
  JsonWriter& end_array();
  JsonWriter& key(const std::string& k);
  JsonWriter& value(double v);
  JsonWriter& value(long long v);
  JsonWriter& value(int v) { return value(static_cast<long long>(v)); }
  JsonWriter& value(const std::string& v);
  JsonWriter& value(const char* v) { return value(std::string(v)); }
  JsonWriter& value(bool v);
  JsonWriter& null();

  const std::string& str() const;

 private:
  void before_item();
  std::string out_;
  // Each frame: 'o' = object awaiting key, 'v' = object awaiting value,
  // 'a' = array.
  std::vector<char> stack_;
  std::vector<bool> has_items_;
};

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace qesr
