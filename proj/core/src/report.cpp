#include "mpq/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#include "mpq/errors.hpp"

namespace mpq {

namespace {

double round_to(double x, int decimals) {
    const double scale = std::pow(10.0, decimals);
    return std::round(x * scale) / scale;
}

std::string fixed(double x, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, x);
    return buf;
}

double parse_value(const std::string& text, std::size_t line_no) {
    std::istringstream ss(text);
    double v = 0.0;
    ss >> v;
    if (ss.fail() || !ss.eof()) {
        throw FormatError("report line " + std::to_string(line_no) + ": bad number '" + text + "'");
    }
    return v;
}

}  // namespace

bool fractional_bits(const std::string& method) { return method == "minsen" || method == "nas"; }

ReportRow rounded(ReportRow row) {
    row.bits = round_to(row.bits, fractional_bits(row.method) ? 1 : 0);
    row.ppl = round_to(row.ppl, 2);
    row.size_mb = round_to(row.size_mb, 4);
    row.ratio = row.method == "none" ? 1.0 : round_to(row.ratio, 1);
    row.eval_seconds = round_to(row.eval_seconds, 2);
    return row;
}

std::vector<std::string> format_row(const ReportRow& row) {
    return {row.model,
            row.precision,
            row.method,
            fixed(row.bits, fractional_bits(row.method) ? 1 : 0),
            fixed(row.ppl, 2),
            fixed(row.size_mb, 4),
            row.method == "none" ? "-" : fixed(row.ratio, 1),
            fixed(row.eval_seconds, 2)};
}

void write_table(std::ostream& os, const std::vector<ReportRow>& rows) {
    std::vector<std::vector<std::string>> cells{kReportColumns};
    for (const auto& r : rows) cells.push_back(format_row(r));
    std::vector<std::size_t> width(kReportColumns.size(), 0);
    for (const auto& line : cells)
        for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
    const auto emit = [&](const std::vector<std::string>& line) {
        std::string out;
        for (std::size_t i = 0; i < line.size(); ++i) {
            const std::string pad(width[i] - line[i].size(), ' ');
            // Text columns left-aligned, numbers right-aligned.
            out += i < 3 ? line[i] + pad : pad + line[i];
            if (i + 1 < line.size()) out += "  ";
        }
        os << out << '\n';
    };
    emit(cells[0]);
    std::size_t total = 2 * (width.size() - 1);
    for (std::size_t w : width) total += w;
    os << std::string(total, '-') << '\n';
    for (std::size_t i = 1; i < cells.size(); ++i) emit(cells[i]);
}

void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows, bool with_timing) {
    const std::size_t n = with_timing ? kReportColumns.size() : kReportColumns.size() - 1;
    const auto emit = [&](const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < n; ++i) os << fields[i] << (i + 1 < n ? "," : "\n");
    };
    emit(kReportColumns);
    for (const auto& r : rows) emit(format_row(r));
}

std::vector<ReportRow> read_report_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("report line 1: missing header");
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) header.push_back(f);
    }
    const bool timed = header.size() == kReportColumns.size();
    if ((!timed && header.size() + 1 != kReportColumns.size()) ||
        !std::equal(header.begin(), header.end(), kReportColumns.begin())) {
        throw FormatError("report line 1: unexpected header");
    }
    std::vector<ReportRow> rows;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (f.size() != header.size()) {
            throw FormatError("report line " + std::to_string(line_no) + ": expected " +
                              std::to_string(header.size()) + " fields");
        }
        ReportRow r;
        r.model = f[0];
        r.precision = f[1];
        r.method = f[2];
        r.bits = parse_value(f[3], line_no);
        r.ppl = parse_value(f[4], line_no);
        r.size_mb = parse_value(f[5], line_no);
        r.ratio = f[6] == "-" ? 1.0 : parse_value(f[6], line_no);
        if (timed) r.eval_seconds = parse_value(f[7], line_no);
        rows.push_back(r);
    }
    if (rows.empty()) throw FormatError("report has no rows");
    return rows;
}

}  // namespace mpq
