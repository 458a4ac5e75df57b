#pragma once

// OHLCV ingestion, validation, chronological splitting, min-max
// normalisation and sliding-window construction.

#include <algorithm>
#include <array>
#include <charconv>
#include <limits>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace trendlab::series {

enum class Frequency { daily, hourly };

inline std::string to_string(Frequency f) { return f == Frequency::daily ? "daily" : "hourly"; }

inline Frequency frequency_from_string(const std::string& s) {
    if (s == "daily") return Frequency::daily;
    if (s == "hourly") return Frequency::hourly;
    throw std::invalid_argument("unknown frequency: " + s);
}

// time-zone naive calendar timestamp, minute resolution
struct Timestamp {
    int year = 0;
    unsigned month = 1, day = 1, hour = 0, minute = 0;

    // minutes since an arbitrary epoch; strictly monotone in calendar order
    std::int64_t key() const {
        using namespace std::chrono;
        year_month_day ymd{std::chrono::year{year}, std::chrono::month{month},
                           std::chrono::day{day}};
        auto days = static_cast<sys_days>(ymd).time_since_epoch().count();
        return (static_cast<std::int64_t>(days) * 24 + hour) * 60 + minute;
    }

    bool is_weekend() const {
        using namespace std::chrono;
        year_month_day ymd{std::chrono::year{year}, std::chrono::month{month},
                           std::chrono::day{day}};
        weekday wd{static_cast<sys_days>(ymd)};
        return wd == Saturday || wd == Sunday;
    }

    bool valid() const {
        using namespace std::chrono;
        year_month_day ymd{std::chrono::year{year}, std::chrono::month{month},
                           std::chrono::day{day}};
        return ymd.ok() && hour < 24 && minute < 60;
    }

    std::string iso() const {
        char buf[32];
        if (hour == 0 && minute == 0)
            std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", year, month, day);
        else
            std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02u:%02u", year, month, day, hour,
                          minute);
        return buf;
    }

    auto operator<=>(const Timestamp& o) const { return key() <=> o.key(); }
    bool operator==(const Timestamp& o) const { return key() == o.key(); }
};

// Accepts ISO-8601 (YYYY-MM-DD[ HH:MM[:SS]]) and DD/MM/YYYY[ HH:MM].
inline Timestamp parse_timestamp(const std::string& text) {
    Timestamp ts;
    auto fail = [&] { throw std::invalid_argument("unparseable timestamp: '" + text + "'"); };
    int a = 0, b = 0, c = 0, hh = 0, mm = 0, ss = 0;
    char sep = 0;
    std::istringstream in(text);
    if (text.find('-') != std::string::npos) {
        char d1, d2;
        if (!(in >> a >> d1 >> b >> d2 >> c) || d1 != '-' || d2 != '-') fail();
        ts.year = a;
        ts.month = static_cast<unsigned>(b);
        ts.day = static_cast<unsigned>(c);
    } else if (text.find('/') != std::string::npos) {
        char d1, d2;
        if (!(in >> a >> d1 >> b >> d2 >> c) || d1 != '/' || d2 != '/') fail();
        ts.year = c;
        ts.month = static_cast<unsigned>(b);
        ts.day = static_cast<unsigned>(a);
    } else {
        fail();
    }
    if (in >> hh >> sep >> mm) {
        if (sep != ':') fail();
        ts.hour = static_cast<unsigned>(hh);
        ts.minute = static_cast<unsigned>(mm);
        if (in.peek() == ':') in >> sep >> ss;  // seconds accepted, dropped
    }
    if (!ts.valid()) fail();
    return ts;
}

struct PriceBar {
    Timestamp timestamp;
    double open = 0, high = 0, low = 0, close = 0;
    double adj_close = std::numeric_limits<double>::quiet_NaN();  // parsed, unused
    double volume = 0;

    void validate(std::size_t line) const {
        auto err = [&](const std::string& what) {
            throw std::invalid_argument("line " + std::to_string(line) + ": " + what);
        };
        if (!(low <= open && open <= high)) err("open outside [low, high]");
        if (!(low <= close && close <= high)) err("close outside [low, high]");
        if (volume < 0) err("negative volume");
    }
};

struct PriceSeries {
    std::vector<PriceBar> bars;
    Frequency frequency = Frequency::daily;
    std::string symbol;

    std::vector<double> closes() const {
        std::vector<double> out(bars.size());
        for (std::size_t i = 0; i < bars.size(); ++i) out[i] = bars[i].close;
        return out;
    }
};

namespace detail {

inline std::vector<std::string> split_csv_row(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    return fields;
}

inline double parse_number(const std::string& s, std::size_t line, const std::string& column) {
    if (s.empty())
        throw std::invalid_argument("line " + std::to_string(line) + ": null/empty " + column);
    double v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
        throw std::invalid_argument("line " + std::to_string(line) + ": malformed " + column +
                                    " '" + s + "'");
    return v;
}

}  // namespace detail

// Header row must name at least Date, Open, High, Low, Close, Volume
// (Adj Close optional). Rows are validated, sorted ascending and checked
// for duplicate timestamps; daily series must contain business days only.
inline PriceSeries parse_csv(std::istream& raw, Frequency frequency, std::string symbol = "") {
    PriceSeries out;
    out.frequency = frequency;
    out.symbol = std::move(symbol);
    std::string line;
    if (!std::getline(raw, line)) throw std::invalid_argument("no data rows");
    auto header = detail::split_csv_row(line);
    auto find_col = [&](const std::string& name) -> std::optional<std::size_t> {
        for (std::size_t i = 0; i < header.size(); ++i) {
            std::string h = header[i];
            std::erase_if(h, [](char c) { return c == ' ' || c == '_'; });
            std::string n = name;
            std::erase_if(n, [](char c) { return c == ' ' || c == '_'; });
            auto lower = [](std::string s) {
                std::transform(s.begin(), s.end(), s.begin(), ::tolower);
                return s;
            };
            if (lower(h) == lower(n)) return i;
        }
        return std::nullopt;
    };
    struct Cols {
        std::size_t date, open, high, low, close, volume;
        std::optional<std::size_t> adj;
    } cols{};
    auto require = [&](const std::string& name) {
        auto c = find_col(name);
        if (!c) throw std::invalid_argument("missing required column: " + name);
        return *c;
    };
    cols.date = require("Date");
    cols.open = require("Open");
    cols.high = require("High");
    cols.low = require("Low");
    cols.close = require("Close");
    cols.volume = require("Volume");
    cols.adj = find_col("Adj Close");

    std::size_t lineno = 1;
    while (std::getline(raw, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = detail::split_csv_row(line);
        if (fields.size() < header.size())
            throw std::invalid_argument("line " + std::to_string(lineno) + ": expected " +
                                        std::to_string(header.size()) + " fields, got " +
                                        std::to_string(fields.size()));
        PriceBar bar;
        if (fields[cols.date].empty())
            throw std::invalid_argument("line " + std::to_string(lineno) + ": null/empty Date");
        try {
            bar.timestamp = parse_timestamp(fields[cols.date]);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("line " + std::to_string(lineno) + ": " + e.what());
        }
        bar.open = detail::parse_number(fields[cols.open], lineno, "Open");
        bar.high = detail::parse_number(fields[cols.high], lineno, "High");
        bar.low = detail::parse_number(fields[cols.low], lineno, "Low");
        bar.close = detail::parse_number(fields[cols.close], lineno, "Close");
        bar.volume = detail::parse_number(fields[cols.volume], lineno, "Volume");
        if (cols.adj) bar.adj_close = detail::parse_number(fields[*cols.adj], lineno, "Adj Close");
        bar.validate(lineno);
        if (frequency == Frequency::daily && bar.timestamp.is_weekend())
            throw std::invalid_argument("line " + std::to_string(lineno) +
                                        ": weekend timestamp in a daily series (" +
                                        bar.timestamp.iso() + ")");
        out.bars.push_back(bar);
    }
    if (out.bars.empty()) throw std::invalid_argument("no data rows");
    std::stable_sort(out.bars.begin(), out.bars.end(),
                     [](const PriceBar& a, const PriceBar& b) { return a.timestamp < b.timestamp; });
    for (std::size_t i = 1; i < out.bars.size(); ++i)
        if (out.bars[i].timestamp == out.bars[i - 1].timestamp)
            throw std::invalid_argument("duplicate timestamp " + out.bars[i].timestamp.iso());
    return out;
}

// canonical dump: ISO-8601 timestamps, stable column order
inline void write_csv(std::ostream& out, const PriceSeries& series) {
    out << "Date,Open,High,Low,Close,Adj Close,Volume\n";
    char buf[256];
    for (const auto& b : series.bars) {
        double adj = std::isnan(b.adj_close) ? b.close : b.adj_close;
        std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      b.timestamp.iso().c_str(), b.open, b.high, b.low, b.close, adj, b.volume);
        out << buf;
    }
}

// ---------------------------------------------------------------------------
// splitting

struct TimeRange {
    Timestamp begin, end;  // half-open [begin, end)
    bool contains(const Timestamp& t) const { return begin <= t && t < end; }
};

struct SplitSpec {
    TimeRange train_range, val_range, test_range;
    std::array<double, 3> declared_fractions{0, 0, 0};  // optional, 0 if unknown

    void validate() const {
        if (train_range.end.key() > val_range.begin.key() ||
            val_range.end.key() > test_range.begin.key())
            throw std::invalid_argument("split ranges must be disjoint and ordered train < val < test");
        double s = declared_fractions[0] + declared_fractions[1] + declared_fractions[2];
        if (s != 0.0 && std::fabs(s - 1.0) > 0.01)
            throw std::invalid_argument("declared split fractions do not sum to 1");
    }

    // derive a spec by index fractions over an existing series
    static SplitSpec by_fractions(const PriceSeries& series, double train, double val,
                                  double test) {
        if (series.bars.size() < 3) throw std::invalid_argument("series too short to split");
        double s = train + val + test;
        if (std::fabs(s - 1.0) > 0.01)
            throw std::invalid_argument("split fractions must sum to 1");
        std::size_t n = series.bars.size();
        auto n_train = static_cast<std::size_t>(std::llround(train * n));
        auto n_val = static_cast<std::size_t>(std::llround(val * n));
        if (n_train == 0 || n_val == 0 || n_train + n_val >= n)
            throw std::invalid_argument("split fractions leave an empty partition");
        SplitSpec spec;
        Timestamp lo = series.bars.front().timestamp;
        Timestamp past_end = series.bars.back().timestamp;
        past_end.minute = 59;
        past_end.hour = 23;
        spec.train_range = {lo, series.bars[n_train].timestamp};
        spec.val_range = {series.bars[n_train].timestamp, series.bars[n_train + n_val].timestamp};
        spec.test_range = {series.bars[n_train + n_val].timestamp, past_end};
        spec.declared_fractions = {train, val, test};
        return spec;
    }
};

struct SplitResult {
    PriceSeries train, val, test;
    std::array<double, 3> realised_fractions{0, 0, 0};
    // index of the first bar of each partition in the parent series
    std::array<std::size_t, 3> offsets{0, 0, 0};
};

inline SplitResult split(const PriceSeries& series, const SplitSpec& spec) {
    spec.validate();
    SplitResult res;
    res.train.frequency = res.val.frequency = res.test.frequency = series.frequency;
    res.train.symbol = res.val.symbol = res.test.symbol = series.symbol;
    bool seen_train = false, seen_val = false, seen_test = false;
    for (std::size_t i = 0; i < series.bars.size(); ++i) {
        const auto& bar = series.bars[i];
        if (spec.train_range.contains(bar.timestamp)) {
            if (!seen_train) res.offsets[0] = i;
            res.train.bars.push_back(bar);
            seen_train = true;
        } else if (spec.val_range.contains(bar.timestamp)) {
            if (!seen_val) res.offsets[1] = i;
            res.val.bars.push_back(bar);
            seen_val = true;
        } else if (spec.test_range.contains(bar.timestamp)) {
            if (!seen_test) res.offsets[2] = i;
            res.test.bars.push_back(bar);
            seen_test = true;
        }
    }
    const char* names[3] = {"train", "validation", "test"};
    const std::size_t sizes[3] = {res.train.bars.size(), res.val.bars.size(),
                                  res.test.bars.size()};
    for (int i = 0; i < 3; ++i)
        if (sizes[i] == 0)
            throw std::invalid_argument(std::string("empty split partition: ") + names[i]);
    double total = static_cast<double>(sizes[0] + sizes[1] + sizes[2]);
    for (int i = 0; i < 3; ++i) res.realised_fractions[i] = sizes[i] / total;
    return res;
}

// ---------------------------------------------------------------------------
// normalisation

class Normaliser {
public:
    Normaliser(double min, double max) : min_(min), max_(max) {
        if (!(max > min)) throw std::invalid_argument("degenerate range: max must exceed min");
    }

    // statistics from TRAINING close prices only
    static Normaliser fit(const PriceSeries& train) { return fit(train.closes()); }

    static Normaliser fit(const std::vector<double>& values) {
        if (values.size() < 2) throw std::invalid_argument("need at least 2 values to fit");
        auto [mn, mx] = std::minmax_element(values.begin(), values.end());
        if (*mx == *mn) throw std::invalid_argument("degenerate range: constant series");
        return Normaliser(*mn, *mx);
    }

    double apply(double x) const { return (x - min_) / (max_ - min_); }
    double inverse(double y) const { return y * (max_ - min_) + min_; }

    std::vector<double> apply(const std::vector<double>& xs) const {
        std::vector<double> out(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) out[i] = apply(xs[i]);
        return out;
    }

    double min() const { return min_; }
    double max() const { return max_; }

private:
    double min_, max_;
};

// ---------------------------------------------------------------------------
// windowing

struct WindowedDataset {
    std::vector<double> inputs;          // N x L row-major
    std::vector<double> targets;         // N
    std::size_t window_length = 0;
    std::vector<std::size_t> source_indices;  // parent position of each target

    std::size_t count() const { return targets.size(); }
    const double* window(std::size_t i) const { return inputs.data() + i * window_length; }
};

inline WindowedDataset make_windows(const std::vector<double>& values, std::size_t window_length) {
    if (window_length == 0) throw std::invalid_argument("window length must be positive");
    if (values.size() <= window_length)
        throw std::invalid_argument("insufficient data: series length " +
                                    std::to_string(values.size()) + " <= window length " +
                                    std::to_string(window_length));
    WindowedDataset ds;
    ds.window_length = window_length;
    std::size_t n = values.size() - window_length;
    ds.inputs.reserve(n * window_length);
    ds.targets.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.inputs.insert(ds.inputs.end(), values.begin() + i, values.begin() + i + window_length);
        ds.targets.push_back(values[i + window_length]);
        ds.source_indices.push_back(i + window_length);
    }
    return ds;
}

}  // namespace trendlab::series
