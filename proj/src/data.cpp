#include "stllm/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "stllm/error.hpp"

namespace stllm::data {
namespace {

constexpr char kBinaryMagic[4] = {'S', 'T', 'L', 'L'};
constexpr std::uint32_t kBinaryVersion = 1;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    std::size_t lead = 0;
    while (lead < cell.size() && cell[lead] == ' ') ++lead;
    cells.push_back(cell.substr(lead));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

struct CsvChannel {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

CsvChannel read_csv_channel(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_traffic: cannot open " + path.string());
  CsvChannel out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (out.header.empty()) {
      out.header = std::move(cells);
      continue;
    }
    if (cells.size() != out.header.size()) {
      throw DataError("load_traffic: " + path.string() + " row " + std::to_string(out.rows.size()) + " (line " +
                      std::to_string(line_no) + ") has " + std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(out.header.size()));
    }
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string& s = cells[c];
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      const std::string where = path.string() + " row " + std::to_string(out.rows.size()) + ", column " +
                                std::to_string(c) + " (" + out.header[c] + ")";
      if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
        throw DataError("load_traffic: unparsable cell '" + s + "' at " + where);
      }
      if (!std::isfinite(v)) throw DataError("load_traffic: non-finite value at " + where);
      if (v < 0.0) throw DataError("load_traffic: negative value at " + where);
      row[c] = v;
    }
    out.rows.push_back(std::move(row));
  }
  if (out.rows.empty()) throw DataError("load_traffic: no rows in " + path.string());
  return out;
}

TrafficTensor load_csv(const std::filesystem::path& path, const LoadSchema& schema) {
  std::vector<CsvChannel> channels;
  channels.push_back(read_csv_channel(path));
  for (const auto& extra : schema.extra_channel_files) channels.push_back(read_csv_channel(extra));
  const std::size_t t = channels[0].rows.size();
  const std::size_t n = channels[0].header.size();
  for (const auto& ch : channels) {
    if (ch.rows.size() != t || ch.header.size() != n) {
      throw DataError("load_traffic: channel files disagree on timesteps or stations");
    }
  }
  const std::size_t c = channels.size();
  TrafficTensor tt;
  tt.values = Tensor({t, n, c});
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < n; ++j) tt.values[(i * n + j) * c + k] = channels[k].rows[i][j];
    }
  }
  tt.interval_minutes = schema.interval_minutes;
  tt.start_epoch = schema.start_epoch;
  tt.station_ids = channels[0].header;
  tt.validate();
  return tt;
}

template <typename T>
T read_le(std::istream& in, const std::string& what) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw DataError("load_traffic: truncated " + what);
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(buf[i]) << (8 * i);
  return static_cast<T>(u);
}

template <typename T>
void write_le(std::ostream& out, T value) {
  auto u = static_cast<std::make_unsigned_t<T>>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((u >> (8 * i)) & 0xFF));
}

TrafficTensor load_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_traffic: cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4)) throw DataError("load_traffic: no rows in " + path.string());
  if (std::memcmp(magic, kBinaryMagic, 4) != 0) throw DataError("load_traffic: bad magic in " + path.string());
  const auto version = read_le<std::uint32_t>(in, "version");
  if (version != kBinaryVersion) throw DataError("load_traffic: unsupported version " + std::to_string(version));
  const auto t = read_le<std::uint32_t>(in, "header");
  const auto n = read_le<std::uint32_t>(in, "header");
  const auto c = read_le<std::uint32_t>(in, "header");
  const auto interval = read_le<std::uint32_t>(in, "header");
  const auto start = read_le<std::int64_t>(in, "header");
  if (t == 0) throw DataError("load_traffic: no rows in " + path.string());
  TrafficTensor tt;
  tt.values = Tensor({t, n, c});
  for (double& v : tt.values.data()) v = std::bit_cast<double>(read_le<std::uint64_t>(in, "payload"));
  tt.interval_minutes = static_cast<int>(interval);
  tt.start_epoch = start;
  for (std::uint32_t j = 0; j < n; ++j) tt.station_ids.push_back("s" + std::to_string(j));
  tt.validate();
  return tt;
}

}  // namespace

void TrafficTensor::validate() const {
  if (values.rank() != 3) throw DataError("traffic tensor must be T x N x C, got " + shape_str(values.shape()));
  if (timesteps() == 0) throw DataError("traffic tensor: no rows");
  if (stations() == 0 || channels() == 0) throw DataError("traffic tensor: N and C must be >= 1");
  if (station_ids.size() != stations()) {
    throw DataError("traffic tensor: " + std::to_string(station_ids.size()) + " station ids for " +
                    std::to_string(stations()) + " stations");
  }
  if (interval_minutes <= 0) throw DataError("traffic tensor: interval must be positive");
  const std::size_t n = stations(), c = channels();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (!std::isfinite(v) || v < 0.0) {
      const std::size_t row = i / (n * c);
      const std::size_t col = (i / c) % n;
      throw DataError(std::string("traffic tensor: ") + (std::isfinite(v) ? "negative" : "non-finite") +
                      " value at row " + std::to_string(row) + ", column " + std::to_string(col));
    }
  }
}

TrafficTensor load_traffic(const std::filesystem::path& path, const LoadSchema& schema) {
  if (!std::filesystem::exists(path)) throw DataError("load_traffic: missing file " + path.string());
  return schema.format == FileFormat::Csv ? load_csv(path, schema) : load_binary(path);
}

void write_binary(const std::filesystem::path& path, const TrafficTensor& tt) {
  tt.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("write_binary: cannot open " + path.string());
  out.write(kBinaryMagic, 4);
  write_le<std::uint32_t>(out, kBinaryVersion);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tt.timesteps()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tt.stations()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tt.channels()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tt.interval_minutes));
  write_le<std::int64_t>(out, tt.start_epoch);
  for (double v : tt.values.data()) write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw DataError("write_binary: write failed for " + path.string());
}

std::vector<std::filesystem::path> write_csv(const std::filesystem::path& stem, const TrafficTensor& tt) {
  tt.validate();
  std::vector<std::filesystem::path> paths;
  const std::size_t t = tt.timesteps(), n = tt.stations(), c = tt.channels();
  for (std::size_t k = 0; k < c; ++k) {
    std::filesystem::path p = stem;
    p += c == 1 ? std::string(".csv") : "_c" + std::to_string(k) + ".csv";
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw DataError("write_csv: cannot open " + p.string());
    out.precision(17);
    for (std::size_t j = 0; j < n; ++j) out << (j ? "," : "") << tt.station_ids[j];
    out << '\n';
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < n; ++j) out << (j ? "," : "") << tt.values[(i * n + j) * c + k];
      out << '\n';
    }
    paths.push_back(p);
  }
  return paths;
}

// ---- calendar -------------------------------------------------------------

CalendarIndex calendar_indices(std::size_t t_index, std::int64_t start_epoch, int interval_minutes,
                               std::size_t steps_per_day, std::size_t days_per_week) {
  if (interval_minutes <= 0 || steps_per_day * static_cast<std::size_t>(interval_minutes) != 1440) {
    throw ConfigError("calendar: steps_per_day (" + std::to_string(steps_per_day) + ") x interval (" +
                      std::to_string(interval_minutes) + " min) must equal 1440");
  }
  if (days_per_week != 7) throw ConfigError("calendar: days_per_week must be 7");
  using namespace std::chrono;
  const std::int64_t step_seconds = static_cast<std::int64_t>(interval_minutes) * 60;
  const auto start = sys_seconds{seconds{start_epoch}};
  const auto start_day = floor<days>(start);
  const std::int64_t steps_into_start_day = (start - start_day).count() / step_seconds;
  const std::size_t day_index =
      static_cast<std::size_t>(steps_into_start_day + static_cast<std::int64_t>(t_index)) % steps_per_day;

  const auto at = start + seconds{static_cast<std::int64_t>(t_index) * step_seconds};
  const weekday wd{floor<days>(at)};
  return {day_index, static_cast<std::size_t>(wd.iso_encoding() - 1)};
}

// ---- windows --------------------------------------------------------------

Tensor WindowSample::x() const {
  const std::size_t n = source->stations(), c = source->channels();
  const auto begin = source->values.data().begin() + static_cast<long>(start * n * c);
  return Tensor({input_steps, n, c}, std::vector<double>(begin, begin + static_cast<long>(input_steps * n * c)));
}

Tensor WindowSample::y() const {
  const std::size_t n = source->stations(), c = source->channels();
  const auto begin = source->values.data().begin() + static_cast<long>((start + input_steps) * n * c);
  return Tensor({output_steps, n, c}, std::vector<double>(begin, begin + static_cast<long>(output_steps * n * c)));
}

std::vector<WindowSample> make_windows(std::shared_ptr<const TrafficTensor> tt, std::size_t input_steps,
                                       std::size_t output_steps, std::size_t steps_per_day,
                                       std::size_t days_per_week) {
  if (!tt) throw DataError("make_windows: null series");
  if (input_steps == 0 || output_steps == 0) throw ConfigError("make_windows: P and S must be >= 1");
  const std::size_t t = tt->timesteps();
  if (t < input_steps + output_steps) {
    throw DataError("make_windows: T=" + std::to_string(t) + " < P+S=" + std::to_string(input_steps + output_steps));
  }
  const std::size_t count = t - input_steps - output_steps + 1;
  std::vector<WindowSample> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    WindowSample w{tt, s, input_steps, output_steps, 0, 0};
    const auto cal =
        calendar_indices(w.last_input_step(), tt->start_epoch, tt->interval_minutes, steps_per_day, days_per_week);
    w.day_index = cal.day_index;
    w.week_index = cal.week_index;
    out.push_back(std::move(w));
  }
  return out;
}

Splits split_chronological(const std::vector<WindowSample>& windows, std::array<double, 3> ratios) {
  for (double r : ratios) {
    if (!(r > 0.0) || !std::isfinite(r)) throw ConfigError("split: ratios must be positive");
  }
  const std::size_t n = windows.size();
  if (n < 3) throw DataError("split: " + std::to_string(n) + " windows cannot fill 3 partitions");
  const double total = ratios[0] + ratios[1] + ratios[2];
  auto share = [&](double r) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(n) * r / total)));
  };
  const std::size_t n_val = share(ratios[1]);
  const std::size_t n_test = share(ratios[2]);
  if (n_val + n_test >= n) throw DataError("split: too few windows for the requested ratios");
  const std::size_t n_train = n - n_val - n_test;

  Splits s;
  s.train.kind = SplitKind::Train;
  s.validation.kind = SplitKind::Validation;
  s.test.kind = SplitKind::Test;
  s.train.windows.assign(windows.begin(), windows.begin() + static_cast<long>(n_train));
  s.validation.windows.assign(windows.begin() + static_cast<long>(n_train),
                              windows.begin() + static_cast<long>(n_train + n_val));
  s.test.windows.assign(windows.begin() + static_cast<long>(n_train + n_val), windows.end());
  return s;
}

WindowSplit chronological_prefix(const WindowSplit& train, double fraction) {
  if (train.kind != SplitKind::Train) throw ConfigError("few-shot prefix requires the training split");
  if (!(fraction > 0.0) || fraction > 1.0) throw ConfigError("few-shot fraction must be in (0, 1]");
  const auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(train.size()) - 1e-9));
  if (count == 0) throw DataError("few-shot fraction yields 0 windows");
  WindowSplit out;
  out.kind = SplitKind::Train;
  out.windows.assign(train.windows.begin(), train.windows.begin() + static_cast<long>(count));
  return out;
}

// ---- normalization --------------------------------------------------------

NormStats::NormStats(std::vector<double> mean, std::vector<double> std) : mean_(std::move(mean)), std_(std::move(std)) {
  if (mean_.size() != std_.size() || mean_.empty()) throw DataError("norm stats: channel count mismatch");
  for (std::size_t k = 0; k < std_.size(); ++k) {
    if (!(std_[k] > 0.0) || !std::isfinite(std_[k]) || !std::isfinite(mean_[k])) {
      throw DataError("norm stats: channel " + std::to_string(k) + " has zero or non-finite std");
    }
  }
}

NormStats NormStats::from_values(std::vector<double> mean, std::vector<double> std) {
  return NormStats(std::move(mean), std::move(std));
}

NormStats NormStats::fit(const WindowSplit& train) {
  if (train.kind != SplitKind::Train) throw DataError("norm stats: may only be fitted on the training split");
  if (train.empty()) throw DataError("norm stats: empty training split");
  const auto& first = train.windows.front();
  const auto& last = train.windows.back();
  const TrafficTensor& src = *first.source;
  const std::size_t n = src.stations(), c = src.channels();
  const std::size_t t_begin = first.start;
  const std::size_t t_end = last.start + last.input_steps + last.output_steps;
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  const double count = static_cast<double>((t_end - t_begin) * n);
  for (std::size_t t = t_begin; t < t_end; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < c; ++k) mean[k] += src.values[(t * n + j) * c + k];
    }
  }
  for (double& m : mean) m /= count;
  for (std::size_t t = t_begin; t < t_end; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < c; ++k) {
        const double d = src.values[(t * n + j) * c + k] - mean[k];
        var[k] += d * d;
      }
    }
  }
  std::vector<double> sd(c);
  for (std::size_t k = 0; k < c; ++k) sd[k] = std::sqrt(var[k] / count);
  return NormStats(std::move(mean), std::move(sd));
}

void NormStats::check_channels(const Tensor& x) const {
  if (x.rank() == 0 || x.shape().back() != mean_.size()) {
    throw ShapeError("norm stats: last axis of " + shape_str(x.shape()) + " must be " + std::to_string(mean_.size()));
  }
}

Tensor NormStats::normalize(const Tensor& x) const {
  check_channels(x);
  Tensor out = x;
  const std::size_t c = mean_.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean_[i % c]) / std_[i % c];
  return out;
}

Tensor NormStats::denormalize(const Tensor& z) const {
  check_channels(z);
  Tensor out = z;
  const std::size_t c = mean_.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * std_[i % c] + mean_[i % c];
  return out;
}

TrafficTensor NormStats::normalize(const TrafficTensor& tt) const {
  TrafficTensor out = tt;
  out.values = normalize(tt.values);
  return out;
}

nlohmann::json NormStats::to_json() const { return {{"mean", mean_}, {"std", std_}}; }

NormStats NormStats::from_json(const nlohmann::json& j) {
  return NormStats(j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>());
}

// ---- generator ------------------------------------------------------------

GeneratorConfig GeneratorConfig::taxi_like(std::size_t stations, std::size_t timesteps, std::uint64_t seed) {
  GeneratorConfig g;
  g.stations = stations;
  g.timesteps = timesteps;
  g.seed = seed;
  g.base_level = 40.0;
  g.daily_amp = 0.6;
  g.weekly_amp = 0.25;
  g.noise_std = 4.0;
  g.noise_ar = 0.85;
  g.spatial_corr = 0.6;
  return g;
}

GeneratorConfig GeneratorConfig::bike_like(std::size_t stations, std::size_t timesteps, std::uint64_t seed) {
  GeneratorConfig g;
  g.stations = stations;
  g.timesteps = timesteps;
  g.seed = seed;
  g.base_level = 6.0;
  g.daily_amp = 0.7;
  g.weekly_amp = 0.2;
  g.noise_std = 1.5;
  g.noise_ar = 0.6;
  g.spatial_corr = 0.3;
  return g;
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"N", stations},
          {"T", timesteps},
          {"seed", seed},
          {"base_level", base_level},
          {"daily_amp", daily_amp},
          {"weekly_amp", weekly_amp},
          {"noise_std", noise_std},
          {"noise_ar", noise_ar},
          {"spatial_corr", spatial_corr},
          {"channels", channels},
          {"interval_minutes", interval_minutes},
          {"start_epoch", start_epoch},
          {"steps_per_day", steps_per_day}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig g;
  try {
    g.stations = j.at("N").get<std::size_t>();
    g.timesteps = j.at("T").get<std::size_t>();
    g.seed = j.at("seed").get<std::uint64_t>();
    g.base_level = j.at("base_level").get<double>();
    g.daily_amp = j.at("daily_amp").get<double>();
    g.weekly_amp = j.at("weekly_amp").get<double>();
    g.noise_std = j.at("noise_std").get<double>();
    g.noise_ar = j.value("noise_ar", g.noise_ar);
    g.spatial_corr = j.value("spatial_corr", g.spatial_corr);
    g.channels = j.value("channels", g.channels);
    g.interval_minutes = j.value("interval_minutes", g.interval_minutes);
    g.start_epoch = j.value("start_epoch", g.start_epoch);
    g.steps_per_day = j.value("steps_per_day", g.steps_per_day);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  return g;
}

TrafficTensor synth_generate(const GeneratorConfig& g) {
  if (g.stations == 0 || g.timesteps == 0 || g.channels == 0) throw ConfigError("generator: N, T, C must be >= 1");
  if (g.noise_ar <= -1.0 || g.noise_ar >= 1.0) throw ConfigError("generator: noise_ar must be in (-1, 1)");
  if (g.spatial_corr < 0.0 || g.spatial_corr > 1.0) throw ConfigError("generator: spatial_corr must be in [0, 1]");
  if (g.steps_per_day == 0) throw ConfigError("generator: steps_per_day must be >= 1");
  const std::size_t n = g.stations, t_len = g.timesteps, c = g.channels;
  const std::size_t day = g.steps_per_day;
  const std::size_t week = 7 * day;

  std::mt19937_64 rng(g.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Evenly spaced scales in [0.5, 1.5] (mean exactly 1), shuffled per seed.
  std::vector<double> scale(n, 1.0);
  if (n > 1) {
    for (std::size_t j = 0; j < n; ++j) scale[j] = 0.5 + static_cast<double>(j) / static_cast<double>(n - 1);
    std::shuffle(scale.begin(), scale.end(), rng);
  }
  std::vector<std::size_t> shift(n);
  for (auto& s : shift) s = static_cast<std::size_t>(rng() % std::max<std::size_t>(1, day / 4));

  TrafficTensor tt;
  tt.values = Tensor({t_len, n, c});
  tt.interval_minutes = g.interval_minutes;
  tt.start_epoch = g.start_epoch;
  for (std::size_t j = 0; j < n; ++j) tt.station_ids.push_back("syn" + std::to_string(j));

  const double two_pi = 2.0 * std::numbers::pi;
  const double innovation = g.noise_std * std::sqrt(1.0 - g.noise_ar * g.noise_ar);
  const double shared = std::sqrt(g.spatial_corr);
  const double own = std::sqrt(1.0 - g.spatial_corr);
  std::vector<double> noise(n * c, 0.0);
  for (auto& e : noise) e = g.noise_std * normal(rng);

  for (std::size_t t = 0; t < t_len; ++t) {
    std::vector<double> common(c);
    for (auto& v : common) v = normal(rng);
    for (std::size_t j = 0; j < n; ++j) {
      const double daily = std::sin(two_pi * static_cast<double>((t + shift[j]) % day) / static_cast<double>(day));
      const double weekly = std::sin(two_pi * static_cast<double>(t % week) / static_cast<double>(week));
      const double level = g.base_level * scale[j] * (1.0 + g.daily_amp * daily + g.weekly_amp * weekly);
      for (std::size_t k = 0; k < c; ++k) {
        double& e = noise[j * c + k];
        const double z = normal(rng);
        if (t > 0) e = g.noise_ar * e + innovation * (shared * common[k] + own * z);
        const double value = level + (g.noise_std > 0.0 ? e : 0.0);
        tt.values[(t * n + j) * c + k] = std::max(0.0, value);
      }
    }
  }
  return tt;
}

}  // namespace stllm::data
