#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mpq {

/// One line of a results table. Values are kept at their printed precision
/// (see rounded()), so a dump re-parses to the same rows.
struct ReportRow {
    std::string model;
    std::string precision;  // full, uniform or mixed
    std::string method;     // none, uniform, admm-manual, minsen or nas
    double bits = 32.0;
    double ppl = 0.0;
    double size_mb = 0.0;
    double ratio = 1.0;
    double eval_seconds = 0.0;

    bool operator==(const ReportRow&) const = default;
};

inline const std::vector<std::string> kReportColumns{
    "model", "quant. precision", "quant. method", "#bit", "PPL", "size(MB)", "comp. ratio", "eval time(s)"};

/// Average widths are fractional only for the searched methods.
bool fractional_bits(const std::string& method);

/// bits to one decimal (minsen, nas) or an integer, PPL and seconds to two
/// decimals, size to four, ratio to one.
ReportRow rounded(ReportRow row);

/// Printed fields of a row in column order; the ratio of a method-none row is "-".
std::vector<std::string> format_row(const ReportRow& row);

/// Space-padded table with a header rule.
void write_table(std::ostream& os, const std::vector<ReportRow>& rows);

/// Comma-separated dump with a header. Without timing the last column is
/// dropped, which makes the dump a pure function of the seed.
void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows, bool with_timing);
/// Accepts dumps with or without the timing column. Throws FormatError naming the line.
std::vector<ReportRow> read_report_csv(std::istream& is);

}  // namespace mpq
