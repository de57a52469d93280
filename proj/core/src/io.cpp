#include "qesr/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace qesr {

std::string format_g10(double v) {
  if (!std::isfinite(v)) {
    throw Error("refusing to serialize a non-finite number");
  }
  if (v == 0.0) return "0";  // collapse negative zero
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInputError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw Error("failed writing '" + path + "'");
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  cells.push_back(cur);
  return cells;
}

}  // namespace

CsvTable read_csv_text(const std::string& text, const std::string& origin) {
  CsvTable table;
  std::istringstream in(text);
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && trim(line).empty()) {
      throw InvalidInputError(origin + ": empty header line");
    }
    if (trim(line).empty()) continue;  // ignore trailing blank lines
    const std::vector<std::string> cells = split_line(line);
    if (line_no == 1) {
      for (const std::string& c : cells) {
        const std::string name = trim(c);
        if (name.empty()) {
          throw InvalidInputError(origin + ": blank column name in header");
        }
        table.header.push_back(name);
      }
      continue;
    }
    if (cells.size() != table.header.size()) {
      throw InvalidInputError(origin + " line " + std::to_string(line_no) +
                              ": expected " +
                              std::to_string(table.header.size()) +
                              " cells, found " + std::to_string(cells.size()));
    }
    std::vector<double> row(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const std::string cell = trim(cells[j]);
      const char* begin = cell.c_str();
      char* end = nullptr;
      const double v = std::strtod(begin, &end);
      if (cell.empty() || end != begin + cell.size() || !std::isfinite(v)) {
        throw InvalidInputError(origin + " line " + std::to_string(line_no) +
                                " column " + std::to_string(j + 1) + ": '" +
                                cell + "' is not a finite number");
      }
      row[j] = v;
    }
    table.rows.push_back(std::move(row));
  }
  if (table.header.empty()) {
    throw InvalidInputError(origin + ": no header found");
  }
  if (table.rows.empty()) {
    throw InvalidInputError(origin + ": no data rows found");
  }
  return table;
}

CsvTable read_csv_file(const std::string& path) {
  return read_csv_text(read_text_file(path), path);
}

void write_csv_file(const std::string& path,
                    const std::vector<std::string>& header,
                    const std::vector<std::vector<double>>& rows) {
  std::string out;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (j) out.push_back(',');
    out += header[j];
  }
  out.push_back('\n');
  for (const auto& row : rows) {
    if (row.size() != header.size()) {
      throw InvalidInputError("CSV row width does not match header");
    }
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out.push_back(',');
      out += format_g10(row[j]);
    }
    out.push_back('\n');
  }
  write_text_file(path, out);
}

Dataset make_dataset(const CsvTable& table, const std::string& response,
                     const std::vector<std::string>& covariates) {
  auto find_col = [&](const std::string& name) {
    for (std::size_t j = 0; j < table.header.size(); ++j) {
      if (table.header[j] == name) return static_cast<Eigen::Index>(j);
    }
    throw InvalidInputError("column '" + name + "' not found in the input");
  };
  const Eigen::Index y_col = find_col(response);
  std::vector<Eigen::Index> x_cols;
  x_cols.reserve(covariates.size());
  for (const std::string& name : covariates) {
    if (name == response) {
      throw InvalidInputError("'" + name +
                              "' cannot be both response and covariate");
    }
    x_cols.push_back(find_col(name));
  }

  const auto n = static_cast<Eigen::Index>(table.rows.size());
  const auto p = static_cast<Eigen::Index>(covariates.size()) + 1;
  Dataset data;
  data.y.resize(n);
  data.X.resize(n, p);
  data.column_names.push_back("(intercept)");
  for (const std::string& name : covariates) data.column_names.push_back(name);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = table.rows[static_cast<std::size_t>(i)];
    data.y[i] = row[static_cast<std::size_t>(y_col)];
    data.X(i, 0) = 1.0;
    for (Eigen::Index j = 0; j < p - 1; ++j) {
      data.X(i, j + 1) =
          row[static_cast<std::size_t>(x_cols[static_cast<std::size_t>(j)])];
    }
  }
  data.validate();
  return data;
}

JsonWriter& JsonWriter::begin_object() {
  before_item();
  out_.push_back('{');
  stack_.push_back('o');
  has_items_.push_back(false);
  return *this;
}

JsonWriter& JsonWriter::end_object() {
  if (stack_.empty() || stack_.back() != 'o') {
    throw Error("JSON writer: end_object outside an object");
  }
  out_.push_back('}');
  stack_.pop_back();
  has_items_.pop_back();
  return *this;
}

JsonWriter& JsonWriter::begin_array() {
  before_item();
  out_.push_back('[');
  stack_.push_back('a');
  has_items_.push_back(false);
  return *this;
}

JsonWriter& JsonWriter::end_array() {
  if (stack_.empty() || stack_.back() != 'a') {
    throw Error("JSON writer: end_array outside an array");
  }
  out_.push_back(']');
  stack_.pop_back();
  has_items_.pop_back();
  return *this;
}

namespace {
std::string escape_json(const std::string& s) {
  std::string out;
  out.reserve(s.size() + 2);
  for (char ch : s) {
    switch (ch) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(ch) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof(buf), "\\u%04x", ch);
          out += buf;
        } else {
          out.push_back(ch);
        }
    }
  }
  return out;
}
}  // namespace

JsonWriter& JsonWriter::key(const std::string& k) {
  if (stack_.empty() || stack_.back() != 'o') {
    throw Error("JSON writer: key outside an object");
  }
  if (has_items_.back()) out_.push_back(',');
  has_items_.back() = true;
  out_.push_back('"');
  out_ += escape_json(k);
  out_ += "\":";
  stack_.back() = 'v';
  return *this;
}

void JsonWriter::before_item() {
  if (stack_.empty()) return;
  if (stack_.back() == 'a') {
    if (has_items_.back()) out_.push_back(',');
    has_items_.back() = true;
  } else if (stack_.back() == 'v') {
    stack_.back() = 'o';  // value consumed the pending key
  } else {
    throw Error("JSON writer: value without a key inside an object");
  }
}

JsonWriter& JsonWriter::value(double v) {
  before_item();
  out_ += format_g10(v);
  return *this;
}

JsonWriter& JsonWriter::value(long long v) {
  before_item();
  out_ += std::to_string(v);
  return *this;
}

JsonWriter& JsonWriter::value(const std::string& v) {
  before_item();
  out_.push_back('"');
  out_ += escape_json(v);
  out_.push_back('"');
  return *this;
}

JsonWriter& JsonWriter::value(bool v) {
  before_item();
  out_ += v ? "true" : "false";
  return *this;
}

JsonWriter& JsonWriter::null() {
  before_item();
  out_ += "null";
  return *this;
}

const std::string& JsonWriter::str() const {
  if (!stack_.empty()) throw Error("JSON writer: unclosed containers");
  return out_;
}

}  // namespace qesr
