#pragma once

// Result rows shared by every evaluation command, written as RFC-4180 CSV.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace mast {

struct ResultRow {
  std::string run_id;
  std::string policy;
  std::string scenario;
  int agents = 0;  // N
  std::uint64_t seed = 0;
  int t = 0;
  std::string metric_name;
  double value = 0.0;
};

inline constexpr const char* kResultHeader = "run_id,policy,scenario,N,seed,t,metric_name,value";

/// Quotes a field when it holds a comma, quote or line break.
std::string csv_field(const std::string& s);
/// Shortest round-trip decimal form, so reruns are byte-identical.
std::string csv_number(double x);

void write_result_header(std::ostream& out);
void write_result_row(std::ostream& out, const ResultRow& row);
void write_results(std::ostream& out, const std::vector<ResultRow>& rows);

/// Parses a CSV produced by write_results; throws std::runtime_error on a schema mismatch.
std::vector<ResultRow> read_results(const std::string& text);

}  // namespace mast
