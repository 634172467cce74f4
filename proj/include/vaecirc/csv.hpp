#pragma once

// RFC-4180 CSV reading/writing. Quoted fields, doubled quotes, CRLF and LF
// line endings. Doubles are emitted with %.17g so a written file reloads
// bit-identically.

#include <string>
#include <vector>

namespace vaecirc {

using CsvRow = std::vector<std::string>;
using CsvTable = std::vector<CsvRow>;

CsvTable parse_csv(const std::string& text, char delimiter = ',');
CsvTable read_csv_file(const std::string& path, char delimiter = ',');

std::string format_double(double v);
std::string csv_escape(const std::string& field, char delimiter = ',');

void write_csv_file(const std::string& path, const CsvRow& header, const CsvTable& rows,
                    char delimiter = ',');

}  // namespace vaecirc
