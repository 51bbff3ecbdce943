#include "mast/results.hpp"

#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mast {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, end);
}

void write_result_header(std::ostream& out) { out << kResultHeader << "\r\n"; }

void write_result_row(std::ostream& out, const ResultRow& r) {
  out << csv_field(r.run_id) << ',' << csv_field(r.policy) << ',' << csv_field(r.scenario) << ',' << r.agents << ','
      << r.seed << ',' << r.t << ',' << csv_field(r.metric_name) << ',' << csv_number(r.value) << "\r\n";
}

void write_results(std::ostream& out, const std::vector<ResultRow>& rows) {
  write_result_header(out);
  for (const auto& r : rows) write_result_row(out, r);
}

namespace {

std::vector<std::string> split_record(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

template <typename T>
T parse_int(const std::string& s, int line) {
  T out{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw std::runtime_error("results line " + std::to_string(line) + ": bad integer '" + s + "'");
  }
  return out;
}

}  // namespace

std::vector<ResultRow> read_results(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("results: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kResultHeader) throw std::runtime_error("results: unexpected header '" + line + "'");
  std::vector<ResultRow> rows;
  int number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_record(line);
    if (f.size() != 8) throw std::runtime_error("results line " + std::to_string(number) + ": expected 8 fields");
    ResultRow r{f[0], f[1], f[2], parse_int<int>(f[3], number), parse_int<std::uint64_t>(f[4], number),
                parse_int<int>(f[5], number), f[6], 0.0};
    try {
      std::size_t used = 0;
      r.value = std::stod(f[7], &used);
      if (used != f[7].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw std::runtime_error("results line " + std::to_string(number) + ": bad value '" + f[7] + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace mast
